"""Experiment front end: configuration, synthetic data, runs and summaries."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from .errors import ConfigError, DataError, ParseError
from .federation import Hyperparameters, RoundReport, Simulation, run_baseline
from .ingest import (
    DEFAULT_DEVICE_CONFIGS,
    DeviceConfig,
    DeviceData,
    DeviceKind,
    balance_classes,
    ingest_files,
    load_dataset,
    sort_devices,
    split_dataset,
)
from .mmd import KernelConfig, MmdConfig, pair_key
from .models import Architecture, init_params

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
METHODS = ("baseline", "hhhfl")


# --------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticDevice:
    input_dim: int
    examples_per_class: int = 300
    separation: float = 4.0
    noise: float = 1.0

    def __post_init__(self):
        if self.input_dim < 1 or self.examples_per_class < 1:
            raise ConfigError("synthetic input_dim and examples_per_class must be >= 1")
        if not self.separation > 0:
            raise ConfigError(f"synthetic separation must be > 0, got {self.separation}")
        if not self.noise > 0:
            raise ConfigError(f"synthetic noise must be > 0, got {self.noise}")


@dataclass(frozen=True)
class SyntheticSpec:
    devices: dict[DeviceKind, SyntheticDevice]

    def __post_init__(self):
        dims = [d.input_dim for d in self.devices.values()]
        if len(set(dims)) != len(dims):
            raise ConfigError(f"synthetic input dims must be pairwise distinct, got {dims}")

    @classmethod
    def default(cls, devices, examples_per_class=300, separation=4.0, noise=1.0, input_dims=None):
        input_dims = input_dims or {}
        return cls({
            d: SyntheticDevice(
                int(input_dims.get(d, DEFAULT_DEVICE_CONFIGS[d].input_dim)), examples_per_class, separation, noise
            )
            for d in sort_devices(devices)
        })


def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def generate_synthetic(spec: SyntheticSpec, seed: int) -> dict[DeviceKind, DeviceData]:
    """Two isotropic Gaussian classes per device, rotated device-specifically.

    Class means sit at -/+ separation/2 along the first axis (scaled by the
    noise level) before a random orthogonal rotation of the device's space.
    """
    out = {}
    for device in sort_devices(spec.devices):
        cfg = spec.devices[device]
        rng = np.random.default_rng([seed, device.order, 7])
        rot = random_rotation(cfg.input_dim, rng)
        offset = np.zeros(cfg.input_dim)
        offset[0] = cfg.separation * cfg.noise / 2.0
        n = cfg.examples_per_class
        labels = np.repeat(np.array([0, 1], dtype=np.int64), n)
        means = np.where(labels[:, None] == 1, offset, -offset)
        raw = means + cfg.noise * rng.standard_normal((2 * n, cfg.input_dim))
        feats = raw @ rot.T
        order = rng.permutation(2 * n)
        out[device] = DeviceData(device, feats[order], labels[order])
    return out


# ------------------------------------------------------------------ config


@dataclass
class DataConfig:
    source: str = "synthetic"
    paths: list[str] = field(default_factory=list)
    cache: str | None = None
    examples_per_class: int = 300
    separation: float = 4.0
    noise: float = 1.0
    input_dims: dict[str, int] = field(default_factory=dict)
    balance_classes: bool = False
    clients_per_device: int = 3
    test_fraction: float = 0.2


@dataclass
class MmdSection:
    kernel: str = "rbf"
    bandwidth: float | str = "median"
    weights: dict[str, float] = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    devices: list[DeviceKind]
    method: str
    seed: int
    data: DataConfig = field(default_factory=DataConfig)
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    mmd: MmdSection = field(default_factory=MmdSection)
    model: Architecture = field(default_factory=Architecture)
    output_dir: str = "runs"
    log_messages: bool = False
    record_timing: bool = False
    workers: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method: expected one of {METHODS}, got {self.method!r}")
        if self.method == "baseline" and len(self.devices) != 1:
            raise ConfigError(f"devices: baseline needs exactly one device, got {[d.value for d in self.devices]}")
        if self.method == "hhhfl" and len(self.devices) < 2:
            raise ConfigError("devices: hhhfl needs at least two devices")
        if self.data.source not in ("synthetic", "mindbigdata"):
            raise ConfigError(f"data.source: unknown source {self.data.source!r}")
        if self.data.source == "mindbigdata" and not (self.data.paths or self.data.cache):
            raise ConfigError("data: mindbigdata source needs paths or cache")
        return self

    def to_dict(self) -> dict:
        d = {
            "devices": [x.value for x in self.devices],
            "method": self.method,
            "seed": self.seed,
            "data": asdict(self.data),
            "hyper": asdict(self.hyper),
            "mmd": asdict(self.mmd),
            "model": asdict(self.model),
            "output_dir": self.output_dir,
            "log_messages": self.log_messages,
            "record_timing": self.record_timing,
            "workers": self.workers,
        }
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def mmd_config(self) -> MmdConfig:
        kernel = KernelConfig(self.mmd.kernel, self.mmd.bandwidth)
        base = MmdConfig.uniform([d.value for d in self.devices], self.hyper.mmd_weight, kernel)
        weights = dict(base.weights)
        for key, value in self.mmd.weights.items():
            weights[_parse_pair(key)] = float(value)
        return MmdConfig(kernel, weights)


def _parse_pair(key: str) -> tuple[str, str]:
    parts = [p.strip() for p in str(key).replace("+", "-").split("-")]
    if len(parts) != 2:
        raise ConfigError(f"mmd.weights: pair key {key!r} must look like 'MU-MW'")
    return pair_key(*(DeviceKind.parse(p).value for p in parts))


def _build(cls, raw, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


TOP_LEVEL = {"devices", "method", "seed", "data", "hyper", "mmd", "model", "output_dir",
             "log_messages", "record_timing", "workers"}


def config_from_dict(raw: Mapping, seed: int | None = None) -> ExperimentConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config root must be a mapping")
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(f"{key}: unknown key")
    for key in ("devices", "method"):
        if key not in raw:
            raise ConfigError(f"{key}: required")
    if seed is None:
        if "seed" not in raw:
            raise ConfigError("seed: required")
        seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed: expected an integer, got {seed!r}")
    if not isinstance(raw["devices"], list) or not raw["devices"]:
        raise ConfigError("devices: expected a nonempty list")
    devices = sort_devices(raw["devices"])
    if len(devices) != len(raw["devices"]):
        raise ConfigError("devices: duplicate entries")
    cfg = ExperimentConfig(
        devices=devices,
        method=str(raw["method"]),
        seed=seed,
        data=_build(DataConfig, raw.get("data"), "data"),
        hyper=_build(Hyperparameters, raw.get("hyper"), "hyper"),
        mmd=_build(MmdSection, raw.get("mmd"), "mmd"),
        model=_build(Architecture, raw.get("model"), "model"),
        output_dir=str(raw.get("output_dir", "runs")),
        log_messages=bool(raw.get("log_messages", False)),
        record_timing=bool(raw.get("record_timing", False)),
        workers=int(raw.get("workers", 1)),
    )
    cfg.mmd_config()
    return cfg.validate()


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, seed)


# -------------------------------------------------------------- experiment


def resolve_data(cfg: ExperimentConfig) -> tuple[dict[DeviceKind, DeviceData], dict[DeviceKind, DeviceConfig], dict]:
    dc = cfg.data
    if dc.source == "synthetic":
        dims = {DeviceKind.parse(k): v for k, v in dc.input_dims.items()}
        spec = SyntheticSpec.default(cfg.devices, dc.examples_per_class, dc.separation, dc.noise, dims)
        data = generate_synthetic(spec, cfg.seed)
        configs = {
            d: DeviceConfig(d, DEFAULT_DEVICE_CONFIGS[d].channel_names, DEFAULT_DEVICE_CONFIGS[d].sampling_rate_hz,
                            spec.devices[d].input_dim)
            for d in cfg.devices
        }
        report = {"source": "synthetic"}
    else:
        if dc.cache:
            data = load_dataset(dc.cache)
            report = {"source": "cache", "cache": dc.cache}
        else:
            data, report = ingest_files(dc.paths)
            report["source"] = "mindbigdata"
        configs = dict(DEFAULT_DEVICE_CONFIGS)
    empty = [d.value for d in cfg.devices if d not in data or len(data[d]) == 0]
    if empty:
        raise DataError(f"zero usable events for device(s) {empty}")
    data = {d: data[d] for d in cfg.devices}
    if dc.balance_classes:
        data = {d: balance_classes(v, cfg.seed) for d, v in data.items()}
    report["examples"] = {d.value: len(data[d]) for d in cfg.devices}
    return data, configs, report


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def metrics_columns(devices: Sequence[DeviceKind], with_mmd: bool) -> list[str]:
    cols = ["round"] + [f"acc_{d.value}" for d in devices] + ["acc_pooled", "train_loss"]
    if with_mmd:
        cols += [f"mmd2_{a.value}_{b.value}" for i, a in enumerate(devices) for b in devices[i + 1 :]]
    return cols + ["duration_ms"]


def metrics_row(report: RoundReport, devices: Sequence[DeviceKind], with_mmd: bool, timing: bool) -> list[str]:
    row = [str(report.round)] + [_fmt(report.device_accuracy[d]) for d in devices]
    row += [_fmt(report.pooled_accuracy), _fmt(report.mean_train_loss)]
    if with_mmd:
        row += [_fmt(report.mmd[(a.value, b.value)]) for i, a in enumerate(devices) for b in devices[i + 1 :]]
    row.append(f"{report.duration_ms:.3f}" if timing else "")
    return row


def provenance(cfg: ExperimentConfig) -> dict:
    return {
        "format": "hhhfl-metrics",
        "format_version": FORMAT_VERSION,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "method": cfg.method,
        "devices": [d.value for d in cfg.devices],
    }


def write_metrics_csv(path, cfg: ExperimentConfig, reports: Sequence[RoundReport]) -> None:
    with_mmd = cfg.method == "hhhfl"
    buf = io.StringIO()
    prov = provenance(cfg)
    buf.write("# " + " ".join(f"{k}={','.join(v) if isinstance(v, list) else v}" for k, v in prov.items()) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(metrics_columns(cfg.devices, with_mmd))
    for r in reports:
        writer.writerow(metrics_row(r, cfg.devices, with_mmd, cfg.record_timing))
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def rounds_to_fraction(curve: Sequence[float], target: float) -> int:
    """First 1-based round whose value reaches ``target``."""
    for i, v in enumerate(curve, start=1):
        if v >= target:
            return i
    return len(curve)


def curve_summary(curve: Sequence[float]) -> dict:
    final, best = curve[-1], max(curve)
    return {
        "final": final,
        "best": best,
        "rounds_to_90pct_final": rounds_to_fraction(curve, 0.9 * final),
        "rounds_to_90pct_best": rounds_to_fraction(curve, 0.9 * best),
    }


def build_summary(cfg: ExperimentConfig, reports: Sequence[RoundReport], data_report: dict) -> dict:
    curves = {d.value: [r.device_accuracy[d] for r in reports] for d in cfg.devices}
    if cfg.method == "hhhfl":
        curves["pooled"] = [r.pooled_accuracy for r in reports]
    per = {k: curve_summary(v) for k, v in curves.items()}
    summary = {
        "provenance": provenance(cfg),
        "rounds": len(reports),
        "final_accuracy": {k: v["final"] for k, v in per.items()},
        "best_accuracy": {k: v["best"] for k, v in per.items()},
        "rounds_to_90pct_final": {k: v["rounds_to_90pct_final"] for k, v in per.items()},
        "rounds_to_90pct_best": {k: v["rounds_to_90pct_best"] for k, v in per.items()},
        "final_train_loss": reports[-1].mean_train_loss,
        "data": data_report,
    }
    if cfg.method == "hhhfl":
        summary["final_mmd2"] = {f"{a}_{b}": v for (a, b), v in reports[-1].mmd.items()}
        summary["first_mmd2"] = {f"{a}_{b}": v for (a, b), v in reports[0].mmd.items()}
    return summary


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list[RoundReport]
    summary: dict
    out_dir: Path
    simulation: Simulation


def run_experiment(cfg: ExperimentConfig, out_dir=None, data=None) -> ExperimentResult:
    """Data -> shards -> federated rounds -> metrics.csv + summary.json.

    ``data`` may carry pre-built per-device datasets (used by tests and the
    benchmark to share one synthetic draw across runs).
    """
    cfg.validate()
    if data is None:
        data, configs, data_report = resolve_data(cfg)
    else:
        data = {d: data[d] for d in cfg.devices}
        configs = {
            d: DeviceConfig(d, DEFAULT_DEVICE_CONFIGS[d].channel_names, DEFAULT_DEVICE_CONFIGS[d].sampling_rate_hz,
                            data[d].features.shape[1])
            for d in cfg.devices
        }
        data_report = {"source": "provided", "examples": {d.value: len(data[d]) for d in cfg.devices}}
    split = split_dataset(data, cfg.data.clients_per_device, cfg.data.test_fraction, cfg.seed)
    params = init_params(cfg.devices, cfg.seed, configs, cfg.model)
    if cfg.method == "baseline":
        sim = run_baseline(cfg.devices[0], params, split.shards, split.test_sets, cfg.hyper, cfg.seed,
                           record_messages=cfg.log_messages)
    else:
        sim = Simulation(params, split.shards, split.test_sets, cfg.hyper, cfg.seed, mmd=cfg.mmd_config(),
                         record_messages=cfg.log_messages, workers=cfg.workers)
        sim.run()
    reports = sim.reports
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", cfg, reports)
    summary = build_summary(cfg, reports, data_report)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if cfg.log_messages:
        sim.transport.write_jsonl(out / "messages.jsonl")
    log.info("finished %s %s: final %s", cfg.method, [d.value for d in cfg.devices], summary["final_accuracy"])
    return ExperimentResult(cfg, reports, summary, out, sim)


# --------------------------------------------------------------- summarize


@dataclass
class RunCurves:
    label: str
    method: str
    devices: list[str]
    columns: dict[str, list[float]]


def method_label(method: str, devices: Sequence[str]) -> str:
    if method == "baseline":
        return "Baseline"
    return " + ".join(devices)


def read_metrics_csv(path) -> RunCurves:
    path = Path(path)
    header: dict[str, str] = {}
    rows: list[list[str]] = []
    cols: list[str] | None = None
    with open(path, encoding="utf-8", newline="") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        header[k] = v
                continue
            cells = next(csv.reader([line]))
            if cols is None:
                cols = cells
                if not cols or cols[0] != "round":
                    raise ParseError(f"{path}: expected a header row starting with 'round'", n)
                continue
            if len(cells) != len(cols):
                raise ParseError(f"{path}: expected {len(cols)} cells, got {len(cells)}", n)
            try:
                [float(c) for c in cells[:-1]]
                int(cells[0])
            except ValueError:
                raise ParseError(f"{path}: non-numeric cell", n) from None
            rows.append(cells)
    if cols is None or not rows:
        raise ParseError(f"{path}: no data rows", None)
    method = header.get("method", "hhhfl")
    devices = [c[len("acc_"):] for c in cols if c.startswith("acc_") and c != "acc_pooled"]
    if "devices" in header:
        devices = header["devices"].split(",")
    columns = {c: [float(r[i]) for r in rows] for i, c in enumerate(cols) if c not in ("duration_ms",)}
    return RunCurves(method_label(method, devices), method, devices, columns)


def summarize(paths: Sequence) -> tuple[str, dict]:
    """Per-device comparison of final/best accuracy and rounds-to-90% across runs."""
    if not paths:
        raise ConfigError("summarize needs at least one CSV")
    runs = [read_metrics_csv(p) for p in paths]
    seen: dict[str, int] = {}
    for r in runs:
        seen[r.label] = seen.get(r.label, 0) + 1
        if seen[r.label] > 1:
            r.label = f"{r.label} ({seen[r.label]})"
    all_devices = [d.value for d in sort_devices({d for r in runs for d in r.devices})]
    table: dict[str, dict[str, dict]] = {}
    for dev in all_devices:
        table[dev] = {}
        for r in runs:
            col = f"acc_{dev}"
            if col in r.columns:
                table[dev][r.label] = curve_summary(r.columns[col])
    lines = []
    for dev in all_devices:
        labels = list(table[dev])
        width = max([12] + [len(l) + 2 for l in labels])
        lines.append(f"HHHFL on {dev}")
        lines.append("metric".ljust(24) + "".join(l.rjust(width) for l in labels))
        for metric in ("final", "best", "rounds_to_90pct_final"):
            vals = []
            for l in labels:
                v = table[dev][l][metric]
                vals.append((f"{v:.4f}" if isinstance(v, float) else str(v)).rjust(width))
            lines.append(metric.ljust(24) + "".join(vals))
        lines.append("")
    return "\n".join(lines).rstrip() + "\n", {"devices": all_devices, "table": table}
