"""Fast in-process property checks behind ``hhhfl gradcheck`` / ``hhhfl selftest``."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from .federation import ClientUpdate, Hyperparameters, ServerState, Simulation, aggregate, run_baseline
from .harness import SyntheticSpec, generate_synthetic
from .ingest import DeviceKind, ParseError, parse_mindbigdata_line, split_dataset
from .mmd import KernelConfig, MmdConfig, mmd_gradient, mmd_squared, naive_mmd_squared
from .models import Architecture, init_params


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _random_net(rng: np.random.Generator):
    conv = nx.conv1d_layer(rng.normal(size=(3, 1, 5)), rng.normal(size=3), stride=2)
    flat = 3 * ((30 - 5) // 2 + 1)
    return [conv, nx.dense_layer(rng.normal(size=(4, flat)) * 0.3, rng.normal(size=4)),
            nx.dense_layer(rng.normal(size=(2, 4)), rng.normal(size=2))]


def composite_loss(proj_layers, cls_layers, x, y, pools, lam: float, kernel: KernelConfig) -> float:
    """Mean cross-entropy through projector and classifier plus ``lam * sum MMD^2``."""
    emb = nx.forward(proj_layers, x)
    loss = nx.loss_value(cls_layers, emb, y)
    for pool in pools:
        loss += lam * mmd_squared(emb, pool, kernel)
    return float(loss)


def composite_gradients(proj_layers, cls_layers, x, y, pools, lam: float, kernel: KernelConfig):
    """Analytic gradients of :func:`composite_loss`, chained the same way a client step does."""
    emb = nx.forward(proj_layers, x)
    cls = nx.backprop(cls_layers, emb, y)
    upstream = cls.input_grad
    for pool in pools:
        upstream = upstream + lam * mmd_gradient(emb, pool, kernel)
    proj = nx.backprop(proj_layers, x, labels=None, extra_output_grads=upstream)
    return proj.grads, cls.grads


@dataclass
class GradientReport:
    max_error: float
    checked: int
    skipped: int


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def composite_gradient_check(proj_layers, cls_layers, x, y, pools=(), lam: float = 0.0,
                             kernel: KernelConfig | None = None, eps: float = 1e-5,
                             max_coords: int | None = None, seed: int = 0) -> GradientReport:
    """Relative error of :func:`composite_gradients` against central differences.

    A coordinate whose +/- eps probe flips any projector ReLU straddles a
    kink where no derivative exists; it is counted in ``skipped`` instead of
    being scored.
    """
    kernel = kernel or KernelConfig("rbf", 1.0)
    g_proj, g_cls = composite_gradients(proj_layers, cls_layers, x, y, pools, lam, kernel)
    work = {
        "proj": [replace(l, weights=l.weights.copy(), bias=l.bias.copy()) for l in proj_layers],
        "cls": [replace(l, weights=l.weights.copy(), bias=l.bias.copy()) for l in cls_layers],
    }
    base = nx.activation_pattern(work["proj"], x)
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for part, grads in (("proj", g_proj), ("cls", g_cls)):
        for li, layer in enumerate(work[part]):
            for name in ("weights", "bias"):
                flat = getattr(layer, name).reshape(-1)
                grad = getattr(grads[li], name).ravel()
                coords = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
                for c in coords:
                    orig = flat[c]
                    flat[c] = orig + eps
                    up = composite_loss(work["proj"], work["cls"], x, y, pools, lam, kernel)
                    kink = part == "proj" and not _same_pattern(base, nx.activation_pattern(work["proj"], x))
                    flat[c] = orig - eps
                    down = composite_loss(work["proj"], work["cls"], x, y, pools, lam, kernel)
                    kink = kink or (part == "proj" and not _same_pattern(base, nx.activation_pattern(work["proj"], x)))
                    flat[c] = orig
                    if kink:
                        skipped += 1
                        continue
                    checked += 1
                    err = abs(grad[c] - (up - down) / (2.0 * eps)) / max(1.0, abs(grad[c]))
                    worst = max(worst, err)
    return GradientReport(worst, checked, skipped)


def gradient_checks(seeds: int = 5) -> list[Check]:
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(s)
        net = _random_net(rng)
        x = rng.normal(size=(4, 30))
        y = rng.integers(0, 2, size=4)
        worst = max(worst, nx.finite_difference_check(net, x, y, eps=1e-5))
        g = rng.normal(size=(4, 2))
        worst = max(worst, nx.finite_difference_check(net, x, None, eps=1e-5, extra_output_grads=g))
        pools = [rng.normal(size=(5, 4)) + 0.5]
        res = composite_gradient_check(net[:2], net[2:], x, y, pools, 0.8, KernelConfig("rbf", 1.5))
        worst = max(worst, res.max_error)
    return [Check("finite-difference gradients", worst < 1e-4, f"max rel err {worst:.2e}")]


def mmd_checks(seeds: int = 5) -> list[Check]:
    out = []
    exact = mmd_squared([[0.0], [2.0]], [[1.0], [3.0]], KernelConfig("linear"))
    out.append(Check("linear MMD^2 hand case", abs(exact - 1.0) <= 1e-12, f"{exact!r}"))
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(s)
        a, b = rng.normal(size=(7, 3)), rng.normal(size=(5, 3)) + 0.5
        for k in (KernelConfig("linear"), KernelConfig("rbf", 1.3)):
            worst = max(worst, abs(mmd_squared(a, b, k) - naive_mmd_squared(a, b, k)))
    out.append(Check("MMD^2 vs naive double sum", worst <= 1e-10, f"max abs diff {worst:.2e}"))
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(4, 3))
    k = KernelConfig("rbf", 1.1)
    g = mmd_gradient(a, b, k)
    num = np.zeros_like(a)
    for idx in np.ndindex(a.shape):
        ap, am = a.copy(), a.copy()
        ap[idx] += 1e-6
        am[idx] -= 1e-6
        num[idx] = (mmd_squared(ap, b, k) - mmd_squared(am, b, k)) / 2e-6
    err = float(np.max(np.abs(g - num) / np.maximum(1.0, np.abs(g))))
    out.append(Check("MMD^2 gradient vs finite differences", err < 1e-5, f"max rel err {err:.2e}"))
    return out


def aggregation_checks() -> list[Check]:
    rng = np.random.default_rng(0)
    params = init_params([DeviceKind.MU], 0, arch=Architecture())
    proj, cls = params.projectors[DeviceKind.MU], params.classifier
    server = ServerState(0, params, {DeviceKind.MU: [0, 1, 2]}, MmdConfig(), Hyperparameters())
    ups = [ClientUpdate(i, DeviceKind.MU, proj, cls, int(rng.integers(1, 50)), 0.0, 0.0, None) for i in range(3)]
    agg = aggregate(server, ups)
    same = all(
        np.array_equal(a.weights, b.weights) for a, b in zip(agg.projectors[DeviceKind.MU].layers, proj.layers)
    )
    return [Check("aggregation idempotent", same, "identical updates reproduce input")]


def parse_checks() -> list[Check]:
    bad = ["", "1\t2", "1\t10\tXX\tFP1\t5\t3\t1,2,3", "1\t10\tMW\tFP1\t5\t4\t1,2,3",
           "1\t10\tMW\tFP1\t12\t1\t1", "x\t10\tMW\tFP1\t5\t1\t1", "1\t10\tMW\tFP1\t5\t1\tnan"]
    typed = 0
    for line in bad:
        try:
            parse_mindbigdata_line(line)
        except ParseError:
            typed += 1
    return [Check("parser rejects malformed lines", typed == len(bad), f"{typed}/{len(bad)} typed errors")]


def protocol_checks() -> list[Check]:
    devs = [DeviceKind.MW, DeviceKind.EP, DeviceKind.MU]
    data = generate_synthetic(SyntheticSpec.default(devs, 20, 4.0, 1.0), 0)
    split = split_dataset(data, 2, 0.2, 0)
    hyper = Hyperparameters(rounds=2, exchange_size=8)
    sim = Simulation(init_params(devs, 0), split.shards, split.test_sets, hyper, 0, record_messages=True)
    sim.run()
    leaked = [m for m in sim.transport.log if m.payload_len in (440, 512, 1024)]
    emb_ok = all(m.payload_len == 10 for m in sim.transport.log if m.kind.startswith(("pool/", "embeddings")))
    out = [Check("privacy flow", not leaked and emb_ok, f"{len(sim.transport.log)} messages, {len(leaked)} raw-length")]

    one = [s for s in split.shards if s.device == DeviceKind.MU][:1]
    p = init_params([DeviceKind.MU], 0)
    h = Hyperparameters(rounds=2, mmd_weight=0.0)
    a = Simulation(p, one, split.test_sets, h, 0, mmd=MmdConfig()).run()
    b = run_baseline(DeviceKind.MU, p, one, split.test_sets, h, 0).reports
    same = all(x.same_metrics(y) for x, y in zip(a, b)) and len(a) == len(b)
    out.append(Check("reduction to baseline", same, "one device, one client, lambda 0"))
    return out


def run_all(include_protocol: bool = True) -> list[Check]:
    checks = gradient_checks() + mmd_checks() + aggregation_checks() + parse_checks()
    if include_protocol:
        checks += protocol_checks()
    return checks
