"""Small differentiable core: dense and 1-D conv layers, ReLU, softmax
cross-entropy, reverse-mode gradients, SGD and a finite-difference checker.

A *network* is a plain sequence of :class:`LayerParams`. Inputs are batched:
``(n, features)`` for a dense-first network, ``(n, channels, length)`` (or
``(n, length)`` for single-channel) for a conv-first network. A conv layer
feeding a dense layer is flattened channel-major.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import PreconditionError, ShapeError

DENSE = "dense"
CONV1D = "conv1d"


@dataclass(frozen=True)
class LayerParams:
    """Parameters of one layer.

    Dense weights have shape ``(out, in)``; conv1d weights have shape
    ``(out_channels, in_channels, kernel_width)``. ``relu`` marks whether a
    ReLU follows the layer.
    """

    kind: str
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    relu: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        if self.kind == DENSE:
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(
                    f"dense layer: weights {w.shape} incompatible with bias {b.shape}"
                )
        elif self.kind == CONV1D:
            if w.ndim != 3 or b.shape != (w.shape[0],):
                raise ShapeError(
                    f"conv1d layer: weights {w.shape} incompatible with bias {b.shape}"
                )
            if self.stride < 1:
                raise ShapeError(f"conv1d stride must be >= 1, got {self.stride}")
        else:
            raise ShapeError(f"unknown layer kind {self.kind!r}")

    @property
    def in_channels(self) -> int | None:
        return self.weights.shape[1] if self.kind == CONV1D else None

    @property
    def out_channels(self) -> int | None:
        return self.weights.shape[0] if self.kind == CONV1D else None

    @property
    def kernel_width(self) -> int | None:
        return self.weights.shape[2] if self.kind == CONV1D else None

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size


def dense_layer(weights, bias=None, relu: bool = False) -> LayerParams:
    weights = np.asarray(weights, dtype=np.float64)
    if bias is None:
        bias = np.zeros(weights.shape[0])
    return LayerParams(DENSE, weights, bias, relu=relu)


def conv1d_layer(weights, bias=None, stride: int = 1, relu: bool = True) -> LayerParams:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 1:
        weights = weights.reshape(1, 1, -1)
    if bias is None:
        bias = np.zeros(weights.shape[0])
    return LayerParams(CONV1D, weights, bias, stride=stride, relu=relu)


# ---------------------------------------------------------------- forward ops


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def dense_forward(params: LayerParams, x) -> np.ndarray:
    """``W @ x + b`` for a vector ``x`` or each row of a batch."""
    x = np.asarray(x, dtype=np.float64)
    n_in = params.weights.shape[1]
    if x.shape[-1] != n_in or x.ndim not in (1, 2):
        raise ShapeError(
            f"dense_forward: input has {x.shape[-1] if x.ndim else 0} features, "
            f"weights expect {n_in}"
        )
    return x @ params.weights.T + params.bias


def conv_output_length(length: int, kernel_width: int, stride: int) -> int:
    if length < kernel_width:
        raise ShapeError(
            f"conv1d: signal length {length} shorter than kernel width {kernel_width}"
        )
    return (length - kernel_width) // stride + 1


def _windows(x: np.ndarray, kernel_width: int, stride: int) -> np.ndarray:
    # (n, C, L) -> (n, C, L_out, K), read-only view
    win = np.lib.stride_tricks.sliding_window_view(x, kernel_width, axis=2)
    return win[:, :, ::stride, :]


def conv1d_forward(params: LayerParams, signal) -> np.ndarray:
    """Valid (unpadded) cross-correlation.

    Accepts ``(channels, length)`` or a batch ``(n, channels, length)``.
    """
    x = np.asarray(signal, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"conv1d_forward: expected (channels, length), got {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"conv1d_forward: signal has {x.shape[1]} channels, "
            f"layer expects {params.in_channels}"
        )
    conv_output_length(x.shape[2], params.kernel_width, params.stride)
    win = _windows(x, params.kernel_width, params.stride)
    out = np.einsum("nclk,ock->nol", win, params.weights) + params.bias[None, :, None]
    return out[0] if single else out


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    """Return ``(loss, probabilities)`` for one logit vector."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.shape[0]:
        raise IndexError(f"label {label} out of range for {z.shape[0]} classes")
    shifted = z - z.max()
    log_norm = np.log(np.exp(shifted).sum())
    log_probs = shifted - log_norm
    return float(-log_probs[label]), np.exp(log_probs)


def _batch_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE over the batch and its gradient w.r.t. the logits."""
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise IndexError(f"labels out of range for {k} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].sum() / n)
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / n


# ------------------------------------------------------------- network level


def output_shape(network: Sequence[LayerParams], input_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape; raises :class:`ShapeError` naming the layer."""
    shape = tuple(input_shape)
    for i, layer in enumerate(network):
        if layer.kind == CONV1D:
            if len(shape) == 1:
                shape = (1, shape[0])
            if len(shape) != 2 or shape[0] != layer.in_channels:
                raise ShapeError(
                    f"layer {i} (conv1d): input shape {shape} has wrong channel count, "
                    f"expected {layer.in_channels}"
                )
            if shape[1] < layer.kernel_width:
                raise ShapeError(
                    f"layer {i} (conv1d): length {shape[1]} < kernel width {layer.kernel_width}"
                )
            shape = (layer.out_channels, conv_output_length(shape[1], layer.kernel_width, layer.stride))
        else:
            flat = int(np.prod(shape))
            if flat != layer.weights.shape[1]:
                raise ShapeError(
                    f"layer {i} (dense): input dim {flat} != weights cols {layer.weights.shape[1]}"
                )
            shape = (layer.weights.shape[0],)
    return shape


def _prepare_inputs(network: Sequence[LayerParams], inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if not network:
        raise ShapeError("empty network")
    if network[0].kind == CONV1D and x.ndim == 2:
        x = x[:, None, :]
    if x.ndim < 2 or x.shape[0] == 0:
        raise PreconditionError("batch must be nonempty")
    output_shape(network, x.shape[1:])
    return x


def forward(network: Sequence[LayerParams], inputs) -> np.ndarray:
    """Batched forward pass; returns the network outputs ``(n, out)``."""
    x = _prepare_inputs(network, inputs)
    return _forward(network, x)[0]


def _forward(network, x):
    cache = []
    for layer in network:
        if layer.kind == CONV1D:
            pre = conv1d_forward(layer, x)
        else:
            if x.ndim > 2:
                x = x.reshape(x.shape[0], -1)
            pre = dense_forward(layer, x)
        cache.append((x, pre))
        x = np.maximum(pre, 0.0) if layer.relu else pre
    return x, cache


def activation_pattern(network: Sequence[LayerParams], inputs) -> list[np.ndarray]:
    """Boolean ``pre > 0`` masks for every ReLU layer; a change means a kink was crossed."""
    _, cache = _forward(network, _prepare_inputs(network, inputs))
    return [pre > 0 for layer, (_, pre) in zip(network, cache) if layer.relu]


@dataclass
class BackpropResult:
    loss: float
    grads: list[LayerParams]
    input_grad: np.ndarray
    outputs: np.ndarray


def backprop(
    network: Sequence[LayerParams],
    inputs,
    labels=None,
    extra_output_grads=None,
) -> BackpropResult:
    """Gradient of ``mean CE(outputs, labels) + sum <extra_output_grads, outputs>``.

    Either term may be omitted (``labels=None`` drops the CE term). ``grads``
    mirror the layers of ``network``; ``input_grad`` is the gradient with
    respect to the (prepared) inputs, which lets callers chain networks.
    """
    x = _prepare_inputs(network, inputs)
    out, cache = _forward(network, x)

    loss = 0.0
    upstream = np.zeros_like(out)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        loss, upstream = _batch_cross_entropy(out, labels)
    if extra_output_grads is not None:
        g = np.asarray(extra_output_grads, dtype=np.float64)
        if g.shape != out.shape:
            raise ShapeError(
                f"layer {len(network) - 1}: extra_output_grads shape {g.shape} "
                f"!= output shape {out.shape}"
            )
        loss += float(np.sum(g * out))
        upstream = upstream + g

    grads: list[LayerParams] = [None] * len(network)  # type: ignore[list-item]
    delta = upstream
    for i in range(len(network) - 1, -1, -1):
        layer = network[i]
        layer_in, pre = cache[i]
        if layer.relu:
            delta = delta * (pre > 0.0)
        if layer.kind == DENSE:
            dw = delta.T @ layer_in
            db = delta.sum(axis=0)
            dx = delta @ layer.weights
        else:
            k, s = layer.kernel_width, layer.stride
            win = _windows(layer_in, k, s)
            dw = np.einsum("nol,nclk->ock", delta, win)
            db = delta.sum(axis=(0, 2))
            dx = np.zeros_like(layer_in)
            l_out = delta.shape[2]
            span = s * (l_out - 1) + 1
            for j in range(k):
                dx[:, :, j : j + span : s] += np.einsum("nol,oc->ncl", delta, layer.weights[:, :, j])
        grads[i] = replace(layer, weights=dw, bias=db)
        if i > 0 and network[i - 1].kind == CONV1D and layer.kind == DENSE:
            dx = dx.reshape(cache[i - 1][1].shape)
        delta = dx
    return BackpropResult(loss=loss, grads=grads, input_grad=delta, outputs=out)


def loss_value(network, inputs, labels=None, extra_output_grads=None) -> float:
    x = _prepare_inputs(network, inputs)
    out = _forward(network, x)[0]
    loss = 0.0
    if labels is not None:
        loss = _batch_cross_entropy(out, np.asarray(labels, dtype=np.int64))[0]
    if extra_output_grads is not None:
        loss += float(np.sum(np.asarray(extra_output_grads) * out))
    return loss


def finite_difference_check(
    network: Sequence[LayerParams],
    inputs,
    labels=None,
    eps: float = 1e-5,
    extra_output_grads=None,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    With ``max_coords`` only a seeded random subset of coordinates per
    parameter array is probed.
    """
    if not 0.0 < eps <= 1e-2:
        raise PreconditionError(f"eps must lie in (0, 1e-2], got {eps}")
    analytic = backprop(network, inputs, labels, extra_output_grads).grads
    rng = np.random.default_rng(seed)
    work = [replace(layer, weights=layer.weights.copy(), bias=layer.bias.copy()) for layer in network]
    worst = 0.0
    for li, layer in enumerate(work):
        for name in ("weights", "bias"):
            arr = getattr(layer, name)
            grad = getattr(analytic[li], name).ravel()
            flat = arr.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                up = loss_value(work, inputs, labels, extra_output_grads)
                flat[c] = orig - eps
                down = loss_value(work, inputs, labels, extra_output_grads)
                flat[c] = orig
                numeric = (up - down) / (2.0 * eps)
                err = abs(grad[c] - numeric) / max(1.0, abs(grad[c]))
                worst = max(worst, err)
    return worst


def sgd_step(network: Sequence[LayerParams], grads: Sequence[LayerParams], learning_rate: float) -> list[LayerParams]:
    """Return ``params - learning_rate * grads`` layer by layer."""
    if not learning_rate > 0:
        raise PreconditionError(f"learning_rate must be > 0, got {learning_rate}")
    if len(network) != len(grads):
        raise ShapeError(f"{len(network)} layers but {len(grads)} gradient entries")
    out = []
    for i, (p, g) in enumerate(zip(network, grads)):
        if p.weights.shape != g.weights.shape or p.bias.shape != g.bias.shape:
            raise ShapeError(
                f"layer {i}: params {p.weights.shape}/{p.bias.shape} vs "
                f"grads {g.weights.shape}/{g.bias.shape}"
            )
        out.append(replace(p, weights=p.weights - learning_rate * g.weights, bias=p.bias - learning_rate * g.bias))
    return out
