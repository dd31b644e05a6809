"""Per-device projector networks, the shared classifier, initialization and
flat (de)serialization of the whole parameter set."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import numerics as nx
from .errors import ConfigError, SerializationError, ShapeError
from .ingest import DEFAULT_DEVICE_CONFIGS, DeviceConfig, DeviceKind, LabeledExample, sort_devices

N_CLASSES = 2


@dataclass(frozen=True)
class Architecture:
    """Projector/classifier sizes shared by every device."""

    embedding_dim: int = 10
    conv_channels: int = 8
    kernel_width: int = 16
    stride: int = 8
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.embedding_dim < 2:
            raise ConfigError("embedding_dim must be >= 2")
        if min(self.conv_channels, self.kernel_width, self.stride) < 1:
            raise ConfigError("conv sizes must be positive")

    def conv_out_length(self, input_dim: int) -> int:
        return nx.conv_output_length(input_dim, self.kernel_width, self.stride)


@dataclass
class ProjectorParams:
    device: DeviceKind
    layers: list[nx.LayerParams]

    @property
    def input_dim(self) -> int:
        conv, dense = self.layers
        flat = dense.weights.shape[1] // conv.out_channels
        return (flat - 1) * conv.stride + conv.kernel_width

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[0]


@dataclass
class ClassifierParams:
    layers: list[nx.LayerParams]

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1]


@dataclass
class ModelParams:
    projectors: dict[DeviceKind, ProjectorParams]
    classifier: ClassifierParams

    @property
    def devices(self) -> list[DeviceKind]:
        return sort_devices(self.projectors)

    @property
    def embedding_dim(self) -> int:
        return self.classifier.input_dim


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_projector(device: DeviceKind, input_dim: int, arch: Architecture, rng: np.random.Generator) -> ProjectorParams:
    c, k = arch.conv_channels, arch.kernel_width
    conv_w = _glorot(rng, (c, 1, k), fan_in=k, fan_out=c * k)
    flat = c * arch.conv_out_length(input_dim)
    dense_w = _glorot(rng, (arch.embedding_dim, flat), fan_in=flat, fan_out=arch.embedding_dim)
    return ProjectorParams(
        device,
        [nx.conv1d_layer(conv_w, stride=arch.stride, relu=True), nx.dense_layer(dense_w)],
    )


def init_classifier(arch: Architecture, rng: np.random.Generator) -> ClassifierParams:
    w = _glorot(rng, (arch.n_classes, arch.embedding_dim), arch.embedding_dim, arch.n_classes)
    return ClassifierParams([nx.dense_layer(w)])


CLASSIFIER_STREAM = 1000


def init_params(
    devices: Iterable,
    seed: int,
    configs: Mapping[DeviceKind, DeviceConfig] = DEFAULT_DEVICE_CONFIGS,
    arch: Architecture = Architecture(),
) -> ModelParams:
    """Glorot-uniform weights, zero biases.

    Every component draws from its own stream keyed by ``(seed, device)``,
    so a device's projector initializes identically whatever the other
    devices in the experiment are.
    """
    devices = sort_devices(devices)
    if not devices:
        raise ConfigError("init_params needs at least one device")
    projectors = {
        d: init_projector(d, configs[d].input_dim, arch, np.random.default_rng([seed, d.order]))
        for d in devices
    }
    classifier = init_classifier(arch, np.random.default_rng([seed, CLASSIFIER_STREAM]))
    return ModelParams(projectors, classifier)


def _features(example) -> tuple[np.ndarray, DeviceKind | None]:
    if isinstance(example, LabeledExample):
        return example.features, example.device
    return np.asarray(example, dtype=np.float64), None


def project_batch(projector: ProjectorParams, features) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != projector.input_dim:
        raise ConfigError(
            f"{projector.device} projector expects {projector.input_dim} features, got {x.shape[1]}"
        )
    return nx.forward(projector.layers, x)


def project(projector: ProjectorParams, example) -> np.ndarray:
    """conv1d -> ReLU -> flatten -> dense, one example to one embedding."""
    features, device = _features(example)
    if device is not None and device != projector.device:
        raise ConfigError(f"{device} example passed to the {projector.device} projector")
    return project_batch(projector, features)[0]


def classify(classifier: ClassifierParams, embedding) -> np.ndarray:
    e = np.asarray(embedding, dtype=np.float64)
    if e.shape[-1] != classifier.input_dim:
        raise ShapeError(f"classifier expects embedding of length {classifier.input_dim}, got {e.shape[-1]}")
    return nx.dense_forward(classifier.layers[0], e)


def predict(params: ModelParams, device: DeviceKind, features) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest index."""
    logits = classify(params.classifier, project_batch(params.projectors[device], features))
    return np.argmax(logits, axis=1)


# -------------------------------------------------------------- flattening

CLASSIFIER_KEY = "classifier"


def projector_key(device: DeviceKind) -> str:
    return f"projector/{DeviceKind.parse(device).value}"


def layers_to_vector(layers: list[nx.LayerParams]) -> np.ndarray:
    return np.concatenate([np.concatenate([l.weights.ravel(), l.bias.ravel()]) for l in layers])


def layers_manifest(layers: list[nx.LayerParams]) -> list[dict]:
    return [
        {
            "kind": l.kind,
            "weights_shape": list(l.weights.shape),
            "bias_shape": list(l.bias.shape),
            "stride": l.stride,
            "relu": l.relu,
        }
        for l in layers
    ]


def vector_to_layers(vec: np.ndarray, manifest: list[dict]) -> list[nx.LayerParams]:
    vec = np.asarray(vec, dtype=np.float64)
    layers = []
    pos = 0
    try:
        for entry in manifest:
            ws, bs = tuple(entry["weights_shape"]), tuple(entry["bias_shape"])
            nw, nb = int(np.prod(ws)), int(np.prod(bs))
            if pos + nw + nb > vec.size:
                raise SerializationError(f"flat vector too short for manifest ({vec.size} values)")
            w = vec[pos : pos + nw].reshape(ws).copy()
            b = vec[pos + nw : pos + nw + nb].reshape(bs).copy()
            pos += nw + nb
            layers.append(nx.LayerParams(entry["kind"], w, b, stride=int(entry["stride"]), relu=bool(entry["relu"])))
    except (KeyError, TypeError, ValueError, ShapeError) as exc:
        raise SerializationError(f"invalid layer manifest: {exc}") from exc
    if pos != vec.size:
        raise SerializationError(f"flat vector has {vec.size} values, manifest describes {pos}")
    return layers


@dataclass
class FlatParams:
    vectors: dict[str, np.ndarray]
    manifest: dict[str, list[dict]] = field(default_factory=dict)


def flatten_params(params: ModelParams) -> FlatParams:
    """Component name -> flat vector, ordered by layer then row-major."""
    vectors, manifest = {}, {}
    for d in params.devices:
        key = projector_key(d)
        vectors[key] = layers_to_vector(params.projectors[d].layers)
        manifest[key] = layers_manifest(params.projectors[d].layers)
    vectors[CLASSIFIER_KEY] = layers_to_vector(params.classifier.layers)
    manifest[CLASSIFIER_KEY] = layers_manifest(params.classifier.layers)
    return FlatParams(vectors, manifest)


def unflatten_params(flat: FlatParams) -> ModelParams:
    if set(flat.vectors) != set(flat.manifest):
        raise SerializationError("vector and manifest components differ")
    if CLASSIFIER_KEY not in flat.vectors:
        raise SerializationError("missing classifier component")
    projectors = {}
    for key in flat.vectors:
        if key == CLASSIFIER_KEY:
            continue
        if not key.startswith("projector/"):
            raise SerializationError(f"unknown component {key!r}")
        try:
            device = DeviceKind(key.split("/", 1)[1])
        except ValueError:
            raise SerializationError(f"unknown device in component {key!r}") from None
        projectors[device] = ProjectorParams(device, vector_to_layers(flat.vectors[key], flat.manifest[key]))
    classifier = ClassifierParams(vector_to_layers(flat.vectors[CLASSIFIER_KEY], flat.manifest[CLASSIFIER_KEY]))
    return ModelParams(dict(sorted(projectors.items(), key=lambda kv: kv[0].order)), classifier)


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    fa, fb = flatten_params(a), flatten_params(b)
    return fa.manifest == fb.manifest and all(np.array_equal(fa.vectors[k], fb.vectors[k]) for k in fa.vectors)


# -------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "hhhfl-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    metadata: dict
    arrays: dict[str, np.ndarray]


def save_checkpoint(path, params: ModelParams, metadata: dict | None = None, arrays: Mapping[str, np.ndarray] | None = None) -> None:
    """Write params plus optional JSON metadata and extra named arrays."""
    flat = flatten_params(params)
    extra = dict(arrays or {})
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "embedding_dim": params.embedding_dim,
        "devices": [d.value for d in params.devices],
        "manifest": flat.manifest,
        "metadata": metadata or {},
        "extra_arrays": sorted(extra),
    }
    payload = {"header": np.array(json.dumps(header, sort_keys=True))}
    payload.update({k.replace("/", "__"): v for k, v in flat.vectors.items()})
    payload.update({f"extra__{k}": np.asarray(v) for k, v in extra.items()})
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        try:
            header = json.loads(str(z["header"]))
        except (KeyError, ValueError) as exc:
            raise SerializationError(f"{path}: missing or corrupt header") from exc
        if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
            raise SerializationError(f"{path}: unsupported checkpoint format")
        manifest = header["manifest"]
        try:
            vectors = {k: z[k.replace("/", "__")] for k in manifest}
            extra = {k: z[f"extra__{k}"] for k in header.get("extra_arrays", [])}
        except KeyError as exc:
            raise SerializationError(f"{path}: missing array {exc}") from exc
    params = unflatten_params(FlatParams(vectors, manifest))
    if params.embedding_dim != header["embedding_dim"]:
        raise SerializationError("embedding dim in header disagrees with classifier shape")
    return Checkpoint(params, header["metadata"], extra)
