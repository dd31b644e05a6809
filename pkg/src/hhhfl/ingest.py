"""MindBigData ingestion: line parsing, event assembly, resampling to a fixed
per-device input dimension, and client sharding.

Raw line grammar (tab separated, one record per line)::

    id  event  device  channel  code  size  v0,v1,...,v{size-1}
"""
from __future__ import annotations

import enum
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ParseError, PreconditionError, SerializationError


class DeviceKind(str, enum.Enum):
    MW = "MW"
    EP = "EP"
    MU = "MU"

    def __str__(self) -> str:
        return self.value

    @property
    def order(self) -> int:
        return DEVICE_ORDER.index(self)

    @classmethod
    def parse(cls, tag) -> "DeviceKind":
        if isinstance(tag, cls):
            return tag
        try:
            return cls(str(tag).strip().upper())
        except ValueError:
            raise ConfigError(f"unknown device {tag!r}; expected one of MW, EP, MU") from None


DEVICE_ORDER = (DeviceKind.MW, DeviceKind.EP, DeviceKind.MU)


def sort_devices(devices: Iterable) -> list[DeviceKind]:
    return sorted({DeviceKind.parse(d) for d in devices}, key=lambda d: d.order)


@dataclass(frozen=True)
class DeviceConfig:
    kind: DeviceKind
    channel_names: tuple[str, ...]
    sampling_rate_hz: int
    input_dim: int

    def __post_init__(self):
        if self.input_dim <= 0:
            raise ConfigError(f"{self.kind}: input_dim must be > 0")
        if not self.channel_names:
            raise ConfigError(f"{self.kind}: at least one channel required")


DEFAULT_DEVICE_CONFIGS: dict[DeviceKind, DeviceConfig] = {
    DeviceKind.MW: DeviceConfig(DeviceKind.MW, ("FP1",), 512, 1024),
    DeviceKind.EP: DeviceConfig(
        DeviceKind.EP,
        ("AF3", "F7", "F3", "FC5", "T7", "P7", "O1", "O2", "P8", "T8", "FC6", "F4", "F8", "AF4"),
        128,
        440,
    ),
    DeviceKind.MU: DeviceConfig(DeviceKind.MU, ("TP9", "FP1", "FP2", "TP10"), 220, 512),
}


@dataclass(frozen=True)
class EegRecord:
    record_id: int
    event_id: int
    device: DeviceKind
    channel: str
    code: int
    size: int
    samples: np.ndarray = field(compare=False)

    def __eq__(self, other):
        if not isinstance(other, EegRecord):
            return NotImplemented
        return (
            (self.record_id, self.event_id, self.device, self.channel, self.code, self.size)
            == (other.record_id, other.event_id, other.device, other.channel, other.code, other.size)
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass
class EegEvent:
    event_id: int
    device: DeviceKind
    code: int
    channels: dict[str, np.ndarray]


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    label: int
    device: DeviceKind


@dataclass
class DeviceData:
    """All examples of one device as stacked arrays."""

    device: DeviceKind
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "DeviceData":
        idx = np.asarray(idx, dtype=np.int64)
        return DeviceData(self.device, self.features[idx], self.labels[idx])


@dataclass
class ClientShard:
    client_id: int
    device: DeviceKind
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class SplitResult:
    shards: list[ClientShard]
    test_sets: dict[DeviceKind, DeviceData]


# -------------------------------------------------------------------- parsing

N_FIELDS = 7


def _parse_int(text: str, name: str, line_number) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ParseError(f"field {name!r} is not an integer: {text!r}", line_number, "numeric") from None


def parse_mindbigdata_line(line: str, line_number: int | None = None) -> EegRecord:
    """Parse one raw line; every failure is a :class:`ParseError`."""
    if not isinstance(line, str):
        raise ParseError(f"expected text, got {type(line).__name__}", line_number)
    line = line.rstrip("\r\n")
    if not line.strip():
        raise ParseError("empty line", line_number)
    parts = line.split("\t")
    if len(parts) != N_FIELDS:
        raise ParseError(f"expected {N_FIELDS} tab-separated fields, got {len(parts)}", line_number, "fields")
    record_id = _parse_int(parts[0], "id", line_number)
    event_id = _parse_int(parts[1], "event", line_number)
    try:
        device = DeviceKind(parts[2].strip())
    except ValueError:
        raise ParseError(f"unknown device tag {parts[2]!r}", line_number, "device") from None
    channel = parts[3].strip()
    if not channel:
        raise ParseError("empty channel name", line_number)
    code = _parse_int(parts[4], "code", line_number)
    if not -1 <= code <= 9:
        raise ParseError(f"code {code} outside [-1, 9]", line_number, "code")
    size = _parse_int(parts[5], "size", line_number)
    if size < 0:
        raise ParseError(f"negative size {size}", line_number, "size")
    raw = parts[6].strip()
    tokens = raw.split(",") if raw else []
    values = []
    for tok in tokens:
        try:
            v = float(tok.strip())
        except ValueError:
            raise ParseError(f"non-numeric sample {tok!r}", line_number, "numeric") from None
        if not math.isfinite(v):
            raise ParseError(f"non-finite sample {tok!r}", line_number, "numeric")
        values.append(v)
    if len(values) != size:
        raise ParseError(f"size field says {size} samples, found {len(values)}", line_number, "size")
    return EegRecord(record_id, event_id, device, channel, code, size, np.asarray(values, dtype=np.float64))


def format_record(record: EegRecord) -> str:
    """Canonical line form: integers in decimal, samples via shortest repr."""
    data = ",".join(repr(float(v)) for v in record.samples)
    return "\t".join(
        [str(record.record_id), str(record.event_id), record.device.value, record.channel,
         str(record.code), str(record.size), data]
    )


@dataclass
class ParseStats:
    lines: int = 0
    records: int = 0
    errors: Counter = field(default_factory=Counter)

    @property
    def rejected(self) -> int:
        return sum(self.errors.values())


def iter_records(lines: Iterable[str], stats: ParseStats | None = None) -> Iterator[EegRecord]:
    """Parse lines, skipping (and counting) bad ones."""
    stats = stats if stats is not None else ParseStats()
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        stats.lines += 1
        try:
            rec = parse_mindbigdata_line(line, n)
        except ParseError as exc:
            stats.errors[exc.kind] += 1
            continue
        stats.records += 1
        yield rec


def read_mindbigdata(path, stats: ParseStats | None = None) -> Iterator[EegRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        yield from iter_records(fh, stats)


# ----------------------------------------------------------- event assembly


@dataclass
class AssemblyResult:
    events: list[EegEvent]
    dropped_incomplete: int = 0
    dropped_inconsistent: int = 0

    @property
    def dropped(self) -> int:
        return self.dropped_incomplete + self.dropped_inconsistent


def assemble_events(
    records: Iterable[EegRecord],
    configs: Mapping[DeviceKind, DeviceConfig] = DEFAULT_DEVICE_CONFIGS,
) -> AssemblyResult:
    """Group records by (device, event). Incomplete or conflicting groups are dropped."""
    groups: dict[tuple[DeviceKind, int], list[EegRecord]] = defaultdict(list)
    for rec in records:
        groups[(rec.device, rec.event_id)].append(rec)

    result = AssemblyResult(events=[])
    for (device, event_id), recs in sorted(groups.items(), key=lambda kv: (kv[0][0].order, kv[0][1])):
        expected = configs[device].channel_names
        codes = {r.code for r in recs}
        names = [r.channel for r in recs]
        if len(codes) > 1 or len(set(names)) != len(names) or not set(names) <= set(expected):
            result.dropped_inconsistent += 1
            continue
        if set(names) != set(expected):
            result.dropped_incomplete += 1
            continue
        channels = {r.channel: r.samples for r in recs}
        result.events.append(EegEvent(event_id, device, codes.pop(), channels))
    return result


# -------------------------------------------------------------- preprocessing


def resample_linear(x: np.ndarray, length: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise PreconditionError("cannot resample an empty signal")
    if x.size == length:
        return x.copy()
    if x.size == 1:
        return np.full(length, x[0])
    pos = np.linspace(0.0, x.size - 1, length)
    return np.interp(pos, np.arange(x.size, dtype=np.float64), x)


def z_normalize(x: np.ndarray) -> np.ndarray:
    if np.ptp(x) == 0.0:
        return np.zeros_like(x)
    centered = x - x.mean()
    sd = centered.std()
    return centered / (sd if sd >= 1e-12 else 1.0)


def stimulus_label(code: int) -> int:
    return 0 if code == -1 else 1


def preprocess(event: EegEvent, config: DeviceConfig) -> LabeledExample:
    """Resample each channel, concatenate in config order, resample to
    ``config.input_dim`` and z-normalize."""
    if event.device != config.kind:
        raise ConfigError(f"event from {event.device} passed with config for {config.kind}")
    per_channel = max(1, config.input_dim // len(config.channel_names))
    parts = []
    for name in config.channel_names:
        sig = event.channels.get(name)
        if sig is None or len(sig) == 0:
            raise PreconditionError(f"event {event.event_id}: channel {name} missing or empty")
        parts.append(resample_linear(sig, per_channel))
    joined = resample_linear(np.concatenate(parts), config.input_dim)
    return LabeledExample(z_normalize(joined), stimulus_label(event.code), config.kind)


def stack_examples(examples: Iterable[LabeledExample]) -> dict[DeviceKind, DeviceData]:
    by_device: dict[DeviceKind, list[LabeledExample]] = defaultdict(list)
    for ex in examples:
        by_device[ex.device].append(ex)
    return {
        d: DeviceData(d, np.stack([e.features for e in by_device[d]]), np.array([e.label for e in by_device[d]], dtype=np.int64))
        for d in sort_devices(by_device)
    }


def balance_classes(data: DeviceData, seed: int) -> DeviceData:
    """Downsample every class to the minority class size."""
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(data.labels, return_counts=True)
    keep = []
    for c in classes:
        idx = np.flatnonzero(data.labels == c)
        keep.append(rng.permutation(idx)[: counts.min()])
    return data.subset(np.sort(np.concatenate(keep)))


# ------------------------------------------------------------------- sharding


def _apportion(total: int, sizes: Sequence[int]) -> list[int]:
    """Largest-remainder split of ``total`` proportional to ``sizes``."""
    n = sum(sizes)
    quotas = [total * s / n for s in sizes]
    base = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[: total - sum(base)]:
        base[i] += 1
    return base


def split_dataset(
    data: Mapping[DeviceKind, DeviceData] | Sequence[LabeledExample],
    clients_per_device: int = 3,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> SplitResult:
    """Stratified per-device split into a test set and client shards.

    Within each class the order is a seeded permutation; the test set takes
    a proportional share of every class and the rest is dealt round-robin,
    class after class, so shard sizes and class ratios stay balanced.
    Client ids are assigned consecutively in device order MW, EP, MU.
    """
    if not isinstance(data, Mapping):
        data = stack_examples(data)
    if clients_per_device < 1:
        raise ConfigError("clients_per_device must be >= 1")
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")

    shards: list[ClientShard] = []
    tests: dict[DeviceKind, DeviceData] = {}
    next_id = 0
    for device in sort_devices(data):
        dd = data[device]
        n = len(dd)
        if n < clients_per_device + 1:
            raise ConfigError(
                f"{device}: {n} examples is too few for {clients_per_device} clients plus a test set"
            )
        n_test = min(max(1, int(round(test_fraction * n))), n - clients_per_device)
        rng = np.random.default_rng([seed, device.order])
        classes = np.unique(dd.labels)
        perms = [rng.permutation(np.flatnonzero(dd.labels == c)) for c in classes]
        test_counts = _apportion(n_test, [len(p) for p in perms])

        test_idx = np.concatenate([p[:t] for p, t in zip(perms, test_counts)])
        buckets: list[list[int]] = [[] for _ in range(clients_per_device)]
        slot = 0
        for p, t in zip(perms, test_counts):
            for i in p[t:]:
                buckets[slot % clients_per_device].append(int(i))
                slot += 1
        tests[device] = dd.subset(np.sort(test_idx))
        for b in buckets:
            sub = dd.subset(np.sort(np.asarray(b, dtype=np.int64)))
            shards.append(ClientShard(next_id, device, sub.features, sub.labels))
            next_id += 1
    return SplitResult(shards, tests)


# ---------------------------------------------------------------------- cache

CACHE_FORMAT = "hhhfl-dataset"
CACHE_VERSION = 1


def save_dataset(path, data: Mapping[DeviceKind, DeviceData]) -> None:
    header = {"format": CACHE_FORMAT, "version": CACHE_VERSION, "devices": [d.value for d in sort_devices(data)]}
    arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
    for d in sort_devices(data):
        arrays[f"{d.value}_features"] = data[d].features
        arrays[f"{d.value}_labels"] = data[d].labels
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_dataset(path) -> dict[DeviceKind, DeviceData]:
    with np.load(Path(path), allow_pickle=False) as z:
        try:
            header = json.loads(str(z["header"]))
        except (KeyError, ValueError) as exc:
            raise SerializationError(f"{path}: missing or corrupt header") from exc
        if header.get("format") != CACHE_FORMAT or header.get("version") != CACHE_VERSION:
            raise SerializationError(f"{path}: unsupported dataset format {header}")
        out = {}
        for tag in header["devices"]:
            d = DeviceKind(tag)
            out[d] = DeviceData(d, z[f"{tag}_features"], z[f"{tag}_labels"])
    return out


def ingest_files(
    paths: Iterable,
    configs: Mapping[DeviceKind, DeviceConfig] = DEFAULT_DEVICE_CONFIGS,
) -> tuple[dict[DeviceKind, DeviceData], dict]:
    """Raw files to stacked per-device datasets plus a drop/error report."""
    stats = ParseStats()
    records = [r for p in paths for r in read_mindbigdata(p, stats)]
    assembled = assemble_events(records, configs)
    examples = []
    rejected = 0
    for ev in assembled.events:
        try:
            examples.append(preprocess(ev, configs[ev.device]))
        except PreconditionError:
            rejected += 1
    report = {
        "lines": stats.lines,
        "records": stats.records,
        "parse_errors": dict(sorted(stats.errors.items())),
        "events": len(assembled.events),
        "dropped_incomplete": assembled.dropped_incomplete,
        "dropped_inconsistent": assembled.dropped_inconsistent,
        "rejected_events": rejected,
    }
    return stack_examples(examples), report
