"""Hierarchical federated training over heterogeneous device groups.

One round: the server broadcasts each client its device group's projector,
the global classifier and the foreign embedding pools; every client trains
locally on cross-entropy plus the weighted MMD^2 between its batch
embeddings and each foreign pool; the server then averages projectors
within each device group and the classifier over all clients, and pools
the freshly exchanged embeddings for the next round.

All client/server traffic goes through :class:`Transport`, which copies
payloads and keeps a log of what was sent.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ProtocolError
from .ingest import ClientShard, DeviceData, DeviceKind, sort_devices
from .mmd import KernelConfig, MmdConfig, mmd_gradient, mmd_squared, resolve_kernel
from .models import (
    ClassifierParams,
    ModelParams,
    ProjectorParams,
    layers_to_vector,
    predict,
    project_batch,
    vector_to_layers,
    layers_manifest,
    load_checkpoint,
    save_checkpoint,
)

SERVER = "server"


@dataclass(frozen=True)
class Hyperparameters:
    rounds: int = 100
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.01
    exchange_size: int = 64
    mmd_weight: float = 1.0

    def __post_init__(self):
        for name in ("rounds", "local_epochs", "batch_size", "exchange_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"hyperparameter {name} must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.mmd_weight < 0:
            raise ConfigError("mmd_weight must be >= 0")


# ------------------------------------------------------------------ transport


@dataclass(frozen=True)
class Message:
    round: int
    sender: str
    receiver: str
    kind: str
    payload_len: int
    rows: int = 1

    def to_json(self) -> str:
        return json.dumps(
            {"round": self.round, "from": self.sender, "to": self.receiver, "kind": self.kind,
             "payload_len": self.payload_len, "rows": self.rows},
            sort_keys=True,
        )


class Transport:
    """In-process stand-in for the network.

    Payloads are dicts of named arrays or scalars; each item is logged as
    one :class:`Message` whose ``payload_len`` is the length of one vector
    (the row length for matrices).
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.log: list[Message] = []

    def send(self, round_index: int, sender, receiver, payload: Mapping[str, object]) -> dict:
        delivered = {}
        for kind, value in payload.items():
            if isinstance(value, np.ndarray):
                arr = value.copy()
                arr.setflags(write=False)
                rows, length = (arr.shape[0], arr.shape[1]) if arr.ndim == 2 else (1, arr.size)
            else:
                arr = value
                rows, length = 1, 1
            if self.record:
                self.log.append(Message(round_index, str(sender), str(receiver), kind, int(length), int(rows)))
            delivered[kind] = arr
        return delivered

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for m in self.log:
                fh.write(m.to_json() + "\n")


# ----------------------------------------------------------- client / server


def _client_name(client_id: int) -> str:
    return f"client-{client_id}"


@dataclass
class ClientState:
    client_id: int
    device: DeviceKind
    shard: ClientShard
    seed: int

    def __post_init__(self):
        if len(self.shard) == 0:
            raise ProtocolError(f"client {self.client_id}: empty shard")
        if self.shard.device != self.device:
            raise ProtocolError(f"client {self.client_id}: shard device {self.shard.device} != {self.device}")


@dataclass
class BroadcastPayload:
    client_id: int
    device: DeviceKind
    projector: ProjectorParams
    classifier: ClassifierParams
    foreign_pools: dict[DeviceKind, np.ndarray]
    kernel: KernelConfig | None
    weights: dict[DeviceKind, float]


@dataclass
class ClientUpdate:
    client_id: int
    device: DeviceKind
    projector: ProjectorParams
    classifier: ClassifierParams
    sample_count: int
    train_loss: float
    train_accuracy: float
    embeddings: np.ndarray | None


@dataclass
class ServerState:
    round: int
    params: ModelParams
    registry: dict[DeviceKind, list[int]]
    mmd: MmdConfig
    hyper: Hyperparameters
    pools: dict[DeviceKind, np.ndarray] = field(default_factory=dict)


@dataclass
class RoundReport:
    round: int
    device_accuracy: dict[DeviceKind, float]
    pooled_accuracy: float
    mean_train_loss: float
    mmd: dict[tuple[str, str], float]
    duration_ms: float = 0.0

    def same_metrics(self, other: "RoundReport") -> bool:
        """Equality of everything except wall-clock time."""
        return replace(self, duration_ms=0.0) == replace(other, duration_ms=0.0)


def register_clients(shards: Sequence[ClientShard], seed: int) -> list[ClientState]:
    return [ClientState(s.client_id, s.device, s, seed) for s in sorted(shards, key=lambda s: s.client_id)]


def make_server(
    params: ModelParams,
    clients: Sequence[ClientState],
    hyper: Hyperparameters,
    mmd: MmdConfig | None = None,
) -> ServerState:
    registry: dict[DeviceKind, list[int]] = {}
    for c in sorted(clients, key=lambda c: c.client_id):
        registry.setdefault(c.device, []).append(c.client_id)
    registry = {d: registry[d] for d in sort_devices(registry)}
    if not registry:
        raise ProtocolError("no clients registered")
    missing = [d for d in registry if d not in params.projectors]
    if missing:
        raise ProtocolError(f"no projector for registered device(s) {missing}")
    if mmd is None:
        mmd = MmdConfig.uniform([d.value for d in registry], hyper.mmd_weight)
    return ServerState(0, params, registry, mmd, hyper)


def broadcast(server: ServerState, transport: Transport | None = None) -> dict[int, BroadcastPayload]:
    """Per-client payload: own group's projector, the classifier, foreign pools."""
    if not server.registry:
        raise ProtocolError("broadcast with an empty registry")
    unknown = [d for d in server.params.projectors if d not in server.registry]
    if unknown:
        raise ProtocolError(f"params hold projectors for unregistered device(s) {unknown}")

    kernel = None
    if server.pools:
        kernel = resolve_kernel(server.mmd.kernel, *server.pools.values())
    transport = transport or Transport(record=False)
    rnd = server.round + 1
    out = {}
    for device, ids in server.registry.items():
        proj = server.params.projectors[device]
        weights = {
            other: server.mmd.weight(device.value, other.value)
            for other in server.registry
            if other != device
        }
        pools = {
            other: server.pools[other]
            for other, lam in weights.items()
            if lam > 0 and other in server.pools
        }
        for cid in ids:
            payload = {
                "projector": layers_to_vector(proj.layers),
                "classifier": layers_to_vector(server.params.classifier.layers),
            }
            payload.update({f"pool/{d.value}": p for d, p in pools.items()})
            if kernel is not None and pools:
                payload["bandwidth"] = float(kernel.bandwidth) if kernel.kind == "rbf" else 0.0
            got = transport.send(rnd, SERVER, _client_name(cid), payload)
            out[cid] = BroadcastPayload(
                client_id=cid,
                device=device,
                projector=ProjectorParams(device, vector_to_layers(got["projector"], layers_manifest(proj.layers))),
                classifier=ClassifierParams(
                    vector_to_layers(got["classifier"], layers_manifest(server.params.classifier.layers))
                ),
                foreign_pools={d: got[f"pool/{d.value}"] for d in pools},
                kernel=kernel if pools else None,
                weights={d: weights[d] for d in pools},
            )
    return out


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def local_step(
    projector: ProjectorParams,
    classifier: ClassifierParams,
    x: np.ndarray,
    y: np.ndarray,
    foreign_pools: Mapping[DeviceKind, np.ndarray],
    weights: Mapping[DeviceKind, float],
    kernel: KernelConfig | None,
    learning_rate: float,
):
    """One SGD step on CE + sum of weighted MMD^2 terms.

    Returns ``(projector, classifier, loss, n_correct)``; loss and accuracy
    are measured before the step.
    """
    emb = nx.forward(projector.layers, x)
    cls = nx.backprop(classifier.layers, emb, y)
    loss = cls.loss
    upstream = cls.input_grad
    for device, pool in foreign_pools.items():
        lam = weights.get(device, 0.0)
        if lam <= 0 or kernel is None:
            continue
        loss += lam * mmd_squared(emb, pool, kernel)
        upstream = upstream + lam * mmd_gradient(emb, pool, kernel)
    proj = nx.backprop(projector.layers, x, labels=None, extra_output_grads=upstream)
    n_correct = int(np.sum(np.argmax(cls.outputs, axis=1) == y))
    if learning_rate > 0:
        projector = ProjectorParams(projector.device, nx.sgd_step(projector.layers, proj.grads, learning_rate))
        classifier = ClassifierParams(nx.sgd_step(classifier.layers, cls.grads, learning_rate))
    return projector, classifier, loss, n_correct


def client_local_update(
    client: ClientState,
    received: BroadcastPayload,
    hyper: Hyperparameters,
    round_index: int = 1,
    exchange: bool = True,
) -> ClientUpdate:
    if received.device != client.device or received.client_id != client.client_id:
        raise ProtocolError(
            f"client {client.client_id} ({client.device}) got payload for "
            f"client {received.client_id} ({received.device})"
        )
    rng = np.random.default_rng([client.seed, client.client_id, round_index])
    x, y = client.shard.features, client.shard.labels
    n = len(y)
    projector, classifier = received.projector, received.classifier
    losses, correct, seen = [], 0, 0
    for _ in range(hyper.local_epochs):
        for idx in _batches(n, hyper.batch_size, rng):
            projector, classifier, loss, n_ok = local_step(
                projector, classifier, x[idx], y[idx],
                received.foreign_pools, received.weights, received.kernel, hyper.learning_rate,
            )
            losses.append(loss * len(idx))
            correct += n_ok
            seen += len(idx)

    embeddings = None
    if exchange:
        pick = np.sort(rng.choice(n, size=min(hyper.exchange_size, n), replace=False))
        embeddings = project_batch(projector, x[pick])
    return ClientUpdate(
        client_id=client.client_id,
        device=client.device,
        projector=projector,
        classifier=classifier,
        sample_count=n,
        train_loss=float(sum(losses) / seen),
        train_accuracy=correct / seen,
        embeddings=embeddings,
    )


def upload(update: ClientUpdate, round_index: int, transport: Transport) -> ClientUpdate:
    """Send a client update to the server through the transport."""
    payload = {
        "projector": layers_to_vector(update.projector.layers),
        "classifier": layers_to_vector(update.classifier.layers),
        "sample_count": update.sample_count,
        "train_loss": update.train_loss,
        "train_accuracy": update.train_accuracy,
    }
    if update.embeddings is not None:
        payload["embeddings"] = update.embeddings
    got = transport.send(round_index, _client_name(update.client_id), SERVER, payload)
    return ClientUpdate(
        client_id=update.client_id,
        device=update.device,
        projector=ProjectorParams(update.device, vector_to_layers(got["projector"], layers_manifest(update.projector.layers))),
        classifier=ClassifierParams(vector_to_layers(got["classifier"], layers_manifest(update.classifier.layers))),
        sample_count=got["sample_count"],
        train_loss=got["train_loss"],
        train_accuracy=got["train_accuracy"],
        embeddings=got.get("embeddings"),
    )


def weighted_average(vectors: Sequence[np.ndarray], counts: Sequence[int]) -> np.ndarray:
    """Sample-weighted mean, anchored on the first vector.

    Computed as ``v0 + sum_k (n_k / N) (v_k - v0)`` in list order, so
    identical inputs return ``v0`` bit-exactly; the result is clipped into
    the elementwise [min, max] envelope of the inputs.
    """
    if not vectors:
        raise ProtocolError("nothing to average")
    total = float(sum(counts))
    if total <= 0:
        raise ProtocolError("sample counts must sum to a positive number")
    base = vectors[0]
    acc = np.zeros_like(base)
    for v, n in zip(vectors, counts):
        acc += (n / total) * (v - base)
    out = base + acc
    if len(vectors) > 1:
        stack = np.stack(vectors)
        out = np.clip(out, stack.min(axis=0), stack.max(axis=0))
    return out


def _check_shape(update: ClientUpdate, reference: ModelParams) -> None:
    try:
        proj = reference.projectors[update.device]
    except KeyError:
        raise ProtocolError(f"client {update.client_id}: device {update.device} has no global projector") from None
    ok = all(
        a.weights.shape == b.weights.shape and a.bias.shape == b.bias.shape
        for a, b in zip(proj.layers, update.projector.layers)
    ) and len(proj.layers) == len(update.projector.layers)
    ok = ok and len(update.classifier.layers) == len(reference.classifier.layers) and all(
        a.weights.shape == b.weights.shape and a.bias.shape == b.bias.shape
        for a, b in zip(reference.classifier.layers, update.classifier.layers)
    )
    if not ok:
        raise ProtocolError(f"client {update.client_id}: parameter shapes do not match the global model")


def aggregate(server: ServerState, updates: Iterable[ClientUpdate]) -> ModelParams:
    """Projectors averaged within each device group, classifier over all clients."""
    updates = sorted(updates, key=lambda u: u.client_id)
    for u in updates:
        _check_shape(u, server.params)
    groups = {d: [u for u in updates if u.device == d] for d in server.registry}
    empty = [d for d, g in groups.items() if not g]
    if empty:
        raise ProtocolError(f"no updates from device group(s) {empty}")

    projectors = {}
    for d, group in groups.items():
        template = group[0].projector.layers
        vec = weighted_average([layers_to_vector(u.projector.layers) for u in group], [u.sample_count for u in group])
        projectors[d] = ProjectorParams(d, vector_to_layers(vec, layers_manifest(template)))
    template = updates[0].classifier.layers
    vec = weighted_average([layers_to_vector(u.classifier.layers) for u in updates], [u.sample_count for u in updates])
    return ModelParams(projectors, ClassifierParams(vector_to_layers(vec, layers_manifest(template))))


def exchange_embeddings(updates: Iterable[ClientUpdate]) -> dict[DeviceKind, np.ndarray]:
    updates = sorted(updates, key=lambda u: u.client_id)
    pools: dict[DeviceKind, list[np.ndarray]] = {}
    for u in updates:
        if u.embeddings is not None and len(u.embeddings):
            pools.setdefault(u.device, []).append(u.embeddings)
    return {d: np.vstack(pools[d]) for d in sort_devices(pools)}


@dataclass
class Evaluation:
    device_accuracy: dict[DeviceKind, float]
    pooled_accuracy: float


def evaluate(params: ModelParams, test_sets: Mapping[DeviceKind, DeviceData]) -> Evaluation:
    per_device, correct, total = {}, 0, 0
    for d in sort_devices(test_sets):
        data = test_sets[d]
        if len(data) == 0:
            raise ProtocolError(f"empty test set for {d}")
        if d not in params.projectors:
            raise ProtocolError(f"no projector for test device {d}")
        hits = int(np.sum(predict(params, d, data.features) == data.labels))
        per_device[d] = hits / len(data)
        correct += hits
        total += len(data)
    return Evaluation(per_device, correct / total)


def _pairwise_pool_mmd(server: ServerState, pools: Mapping[DeviceKind, np.ndarray]) -> dict[tuple[str, str], float]:
    devices = list(server.registry)
    out = {}
    for i, a in enumerate(devices):
        for b in devices[i + 1 :]:
            key = (a.value, b.value)
            if a in pools and b in pools:
                out[key] = mmd_squared(pools[a], pools[b], server.mmd.kernel)
            else:
                out[key] = float("nan")
    return out


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    test_sets: Mapping[DeviceKind, DeviceData],
    transport: Transport | None = None,
    exchange: bool = True,
    workers: int = 1,
) -> tuple[ServerState, RoundReport]:
    """broadcast -> local updates -> aggregate -> exchange -> evaluate."""
    if server.round >= server.hyper.rounds:
        raise ProtocolError(f"round budget of {server.hyper.rounds} exhausted")
    start = time.perf_counter()
    transport = transport or Transport(record=False)
    rnd = server.round + 1
    clients = sorted(clients, key=lambda c: c.client_id)
    registered = {cid for ids in server.registry.values() for cid in ids}
    if {c.client_id for c in clients} != registered:
        raise ProtocolError("client list does not match the server registry")

    payloads = broadcast(server, transport)

    def work(c: ClientState) -> ClientUpdate:
        return client_local_update(c, payloads[c.client_id], server.hyper, rnd, exchange=exchange)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            local = list(pool.map(work, clients))
    else:
        local = [work(c) for c in clients]
    updates = [upload(u, rnd, transport) for u in sorted(local, key=lambda u: u.client_id)]

    params = aggregate(server, updates)
    pools = exchange_embeddings(updates) if exchange else {}
    new_server = replace(server, round=rnd, params=params, pools=pools)
    ev = evaluate(params, test_sets)
    n_total = sum(u.sample_count for u in updates)
    mean_loss = sum(u.train_loss * u.sample_count for u in updates) / n_total
    report = RoundReport(
        round=rnd,
        device_accuracy=ev.device_accuracy,
        pooled_accuracy=ev.pooled_accuracy,
        mean_train_loss=float(mean_loss),
        mmd=_pairwise_pool_mmd(server, pools) if exchange else {},
        duration_ms=(time.perf_counter() - start) * 1000.0,
    )
    return new_server, report


# ------------------------------------------------------------------ drivers


class Simulation:
    """Owns the server, the clients and the transport for one experiment."""

    def __init__(
        self,
        params: ModelParams,
        shards: Sequence[ClientShard],
        test_sets: Mapping[DeviceKind, DeviceData],
        hyper: Hyperparameters,
        seed: int,
        mmd: MmdConfig | None = None,
        exchange: bool = True,
        record_messages: bool = False,
        workers: int = 1,
    ):
        self.clients = register_clients(shards, seed)
        self.server = make_server(params, self.clients, hyper, mmd)
        missing = [d for d in self.server.registry if d not in test_sets]
        if missing:
            raise ProtocolError(f"no test set for device(s) {missing}")
        self.test_sets = {d: test_sets[d] for d in self.server.registry}
        self.exchange = exchange
        self.transport = Transport(record=record_messages)
        self.workers = workers
        self.reports: list[RoundReport] = []

    def step(self) -> RoundReport:
        self.server, report = run_round(
            self.server, self.clients, self.test_sets, self.transport, self.exchange, self.workers
        )
        self.reports.append(report)
        return report

    def run(self, callback=None) -> list[RoundReport]:
        while self.server.round < self.server.hyper.rounds:
            report = self.step()
            if callback is not None:
                callback(report)
        return self.reports

    def save(self, path) -> None:
        save_server_checkpoint(path, self.server)

    def restore(self, path) -> None:
        restored = load_server_checkpoint(path, self.server.hyper, self.server.mmd)
        if restored.registry != self.server.registry:
            raise ProtocolError("checkpoint registry does not match this simulation")
        self.server = restored


def run_hhhfl(params, shards, test_sets, hyper, seed, mmd=None, **kwargs) -> list[RoundReport]:
    return Simulation(params, shards, test_sets, hyper, seed, mmd=mmd, **kwargs).run()


def run_baseline(
    device: DeviceKind,
    params: ModelParams,
    shards: Sequence[ClientShard],
    test_sets: Mapping[DeviceKind, DeviceData],
    hyper: Hyperparameters,
    seed: int,
    record_messages: bool = False,
) -> Simulation:
    """Single-device FedAvg with the MMD term off and no embedding exchange."""
    device = DeviceKind.parse(device)
    own = [s for s in shards if s.device == device]
    if not own:
        raise ProtocolError(f"no shards for baseline device {device}")
    base_params = ModelParams({device: params.projectors[device]}, params.classifier)
    sim = Simulation(
        base_params, own, {device: test_sets[device]}, replace(hyper, mmd_weight=0.0), seed,
        mmd=MmdConfig(), exchange=False, record_messages=record_messages,
    )
    sim.run()
    return sim


# --------------------------------------------------------------- checkpoints


def save_server_checkpoint(path, server: ServerState) -> None:
    metadata = {
        "round": server.round,
        "registry": {d.value: ids for d, ids in server.registry.items()},
        "pools": [d.value for d in server.pools],
    }
    save_checkpoint(path, server.params, metadata, {f"pool_{d.value}": p for d, p in server.pools.items()})


def _ordered(tags) -> list[str]:
    return [d.value for d in sort_devices(tags)]


def load_server_checkpoint(path, hyper: Hyperparameters, mmd: MmdConfig) -> ServerState:
    ck = load_checkpoint(path)
    meta = ck.metadata
    registry = {DeviceKind(k): [int(i) for i in meta["registry"][k]] for k in _ordered(meta["registry"])}
    pools = {DeviceKind(k): ck.arrays[f"pool_{k}"] for k in _ordered(meta["pools"])}
    return ServerState(int(meta["round"]), ck.params, registry, mmd, hyper, pools)
