"""Kernel two-sample statistics between embedding samples.

The estimator is the biased (V-statistic) MMD^2; the gradient is taken with
respect to the points of one sample while the other sample and the kernel
bandwidth are held fixed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, ShapeError

RBF = "rbf"
LINEAR = "linear"
MEDIAN = "median"


@dataclass(frozen=True)
class KernelConfig:
    kind: str = RBF
    bandwidth: float | str = MEDIAN

    def __post_init__(self):
        if self.kind not in (RBF, LINEAR):
            raise ConfigError(f"unknown kernel kind {self.kind!r}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != MEDIAN:
                raise ConfigError(f"unknown bandwidth policy {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise ConfigError(f"rbf bandwidth must be > 0, got {self.bandwidth}")

    @property
    def resolved(self) -> bool:
        return self.kind == LINEAR or not isinstance(self.bandwidth, str)

    def with_bandwidth(self, sigma: float) -> "KernelConfig":
        return KernelConfig(self.kind, float(sigma))


@dataclass(frozen=True)
class EmbeddingSample:
    domain: str
    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if pts.shape[0] < 1:
            raise ShapeError("embedding sample must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ShapeError("embedding sample contains non-finite values")
        object.__setattr__(self, "points", pts)


def pair_key(a: str, b: str) -> tuple[str, str]:
    return tuple(sorted((a, b)))  # type: ignore[return-value]


@dataclass
class MmdConfig:
    kernel: KernelConfig = field(default_factory=KernelConfig)
    weights: dict[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        self.weights = {pair_key(*k): float(v) for k, v in self.weights.items()}
        for k, v in self.weights.items():
            if v < 0:
                raise ConfigError(f"MMD weight for {k} must be >= 0, got {v}")

    def weight(self, a: str, b: str) -> float:
        return self.weights.get(pair_key(a, b), 0.0)

    @classmethod
    def uniform(cls, devices, lam: float = 1.0, kernel: KernelConfig | None = None) -> "MmdConfig":
        devices = list(devices)
        weights = {
            pair_key(a, b): lam for i, a in enumerate(devices) for b in devices[i + 1 :]
        }
        return cls(kernel=kernel or KernelConfig(), weights=weights)


def _points(x) -> np.ndarray:
    if isinstance(x, EmbeddingSample):
        return x.points
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def _bandwidth(kernel: KernelConfig) -> float:
    if not kernel.resolved:
        raise ConfigError("rbf bandwidth policy must be resolved before evaluation")
    return float(kernel.bandwidth)


def kernel_eval(kernel: KernelConfig, x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"kernel_eval: length mismatch {x.shape} vs {y.shape}")
    if kernel.kind == LINEAR:
        return float(x @ y)
    sigma = _bandwidth(kernel)
    d = x - y
    return float(np.exp(-(d @ d) / (2.0 * sigma * sigma)))


def sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kernel_matrix(kernel: KernelConfig, a, b) -> np.ndarray:
    a, b = _points(a), _points(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"point dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if kernel.kind == LINEAR:
        return a @ b.T
    sigma = _bandwidth(kernel)
    return np.exp(-sq_distances(a, b) / (2.0 * sigma * sigma))


def median_heuristic(points) -> float:
    """sigma = sqrt(median pairwise squared distance / 2); 1.0 if that median is 0."""
    pts = _points(points)
    n = pts.shape[0]
    if n < 2:
        raise ConfigError("median heuristic needs at least 2 points")
    iu = np.triu_indices(n, k=1)
    med = float(np.median(sq_distances(pts, pts)[iu]))
    if med <= 0.0:
        return 1.0
    return float(np.sqrt(med / 2.0))


def resolve_kernel(kernel: KernelConfig, *samples) -> KernelConfig:
    if kernel.resolved:
        return kernel
    pooled = np.vstack([_points(s) for s in samples])
    return kernel.with_bandwidth(median_heuristic(pooled))


def mmd_squared(a, b, kernel: KernelConfig) -> float:
    a, b = _points(a), _points(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"mmd_squared: point dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    kernel = resolve_kernel(kernel, a, b)
    value = (
        kernel_matrix(kernel, a, a).mean()
        + kernel_matrix(kernel, b, b).mean()
        - 2.0 * kernel_matrix(kernel, a, b).mean()
    )
    if value < 0.0:
        if value < -1e-12:
            raise ArithmeticError(f"biased MMD^2 estimate {value} is negative beyond tolerance")
        value = 0.0
    return float(value)


def mmd_gradient(a, b, kernel: KernelConfig) -> np.ndarray:
    """d MMD^2 / d a[p] for each point of ``a``; ``b`` and bandwidth fixed."""
    a, b = _points(a), _points(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"mmd_gradient: point dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    kernel = resolve_kernel(kernel, a, b)
    n, m = a.shape[0], b.shape[0]
    if kernel.kind == LINEAR:
        return np.broadcast_to((2.0 / n) * (a.mean(axis=0) - b.mean(axis=0)), a.shape).copy()
    sigma2 = _bandwidth(kernel) ** 2
    kaa = kernel_matrix(kernel, a, a)
    kab = kernel_matrix(kernel, a, b)
    # d k(x, y)/dx = -k(x, y) (x - y) / sigma^2; the aa term counts each pair twice
    grad_aa = -(2.0 / (n * n * sigma2)) * (kaa.sum(axis=1)[:, None] * a - kaa @ a)
    grad_ab = (2.0 / (n * m * sigma2)) * (kab.sum(axis=1)[:, None] * a - kab @ b)
    return grad_aa + grad_ab


def naive_mmd_squared(a, b, kernel: KernelConfig) -> float:
    """Plain triple-loop double-sum reference, used as a test oracle."""
    a, b = _points(a), _points(b)
    kernel = resolve_kernel(kernel, a, b)
    n, m = len(a), len(b)
    saa = sum(kernel_eval(kernel, a[i], a[j]) for i in range(n) for j in range(n))
    sbb = sum(kernel_eval(kernel, b[i], b[j]) for i in range(m) for j in range(m))
    sab = sum(kernel_eval(kernel, a[i], b[j]) for i in range(n) for j in range(m))
    return saa / (n * n) + sbb / (m * m) - 2.0 * sab / (n * m)


def pairwise_mmd(pools: Mapping[str, np.ndarray], kernel: KernelConfig) -> dict[tuple[str, str], float]:
    """MMD^2 for every unordered pair of domains, bandwidth resolved per pair."""
    names = list(pools)
    out = {}
    for i, x in enumerate(names):
        for y in names[i + 1 :]:
            out[pair_key(x, y)] = mmd_squared(pools[x], pools[y], kernel)
    return out
