import numpy as np
import pytest

from hhhfl import numerics as nx
from hhhfl.errors import ConfigError, SerializationError, ShapeError
from hhhfl.ingest import DEFAULT_DEVICE_CONFIGS, DeviceKind, LabeledExample
from hhhfl.models import (
    Architecture,
    ClassifierParams,
    FlatParams,
    classify,
    flatten_params,
    init_params,
    load_checkpoint,
    params_equal,
    project,
    save_checkpoint,
    unflatten_params,
)

ALL = list(DeviceKind)


def example(device, seed=0):
    dim = DEFAULT_DEVICE_CONFIGS[device].input_dim
    return LabeledExample(np.random.default_rng(seed).normal(size=dim), 1, device)


def test_init_deterministic():
    assert params_equal(init_params(ALL, 3), init_params(ALL, 3))


def test_init_distinct_seeds_differ():
    a, b = flatten_params(init_params(ALL, 1)), flatten_params(init_params(ALL, 2))
    assert not np.array_equal(a.vectors["classifier"], b.vectors["classifier"])


def test_init_biases_zero_and_glorot_bound():
    p = init_params(ALL, 0)
    for proj in p.projectors.values():
        for layer in proj.layers:
            assert np.all(layer.bias == 0.0)
    w = p.classifier.layers[0].weights
    assert w.shape == (2, 10)
    bound = np.sqrt(6 / 12)
    assert np.all(np.abs(w) < bound)
    assert np.unique(w).size == w.size


def test_projector_independent_of_other_devices():
    solo = init_params([DeviceKind.MU], 5).projectors[DeviceKind.MU]
    trio = init_params(ALL, 5).projectors[DeviceKind.MU]
    for a, b in zip(solo.layers, trio.layers):
        assert np.array_equal(a.weights, b.weights)


def test_projector_layout():
    p = init_params(ALL, 0)
    for d, proj in p.projectors.items():
        conv, dense = proj.layers
        assert conv.kind == "conv1d" and conv.in_channels == 1 and conv.relu
        assert (conv.out_channels, conv.kernel_width, conv.stride) == (8, 16, 8)
        assert dense.weights.shape[0] == 10
        assert proj.input_dim == DEFAULT_DEVICE_CONFIGS[d].input_dim


@pytest.mark.parametrize("device", ALL)
def test_project_output_dim_is_ten(device):
    p = init_params(ALL, 0)
    assert project(p.projectors[device], example(device)).shape == (10,)


def test_zero_projector_gives_zero_embedding():
    proj = init_params([DeviceKind.MW], 0).projectors[DeviceKind.MW]
    proj.layers = [nx.LayerParams(l.kind, np.zeros_like(l.weights), l.bias, l.stride, l.relu) for l in proj.layers]
    np.testing.assert_array_equal(project(proj, example(DeviceKind.MW)), 0.0)


def test_project_device_mismatch():
    p = init_params(ALL, 0)
    with pytest.raises(ConfigError):
        project(p.projectors[DeviceKind.MW], example(DeviceKind.MU))


def test_classify_cases():
    zero = ClassifierParams([nx.dense_layer(np.zeros((2, 10)))])
    logits = classify(zero, np.ones(10))
    np.testing.assert_array_equal(logits, [0.0, 0.0])
    _, probs = nx.softmax_cross_entropy(logits, 0)
    np.testing.assert_array_equal(probs, [0.5, 0.5])

    w = np.zeros((2, 10))
    w[0, 0] = w[1, 1] = 1.0
    emb = np.zeros(10)
    emb[:2] = [2.0, -1.0]
    np.testing.assert_array_equal(classify(ClassifierParams([nx.dense_layer(w)]), emb), [2.0, -1.0])

    with pytest.raises(ShapeError):
        classify(zero, np.ones(9))


@pytest.mark.parametrize("device", ALL)
def test_end_to_end_gradient_check(device):
    p = init_params([device], 1)
    net = p.projectors[device].layers + p.classifier.layers
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, DEFAULT_DEVICE_CONFIGS[device].input_dim))
    err = nx.finite_difference_check(net, x, [0, 1, 1], eps=1e-5, max_coords=300, seed=1)
    assert err < 1e-4


def test_flatten_round_trip_bit_exact():
    p = init_params(ALL, 9)
    flat = flatten_params(p)
    assert list(flat.vectors) == ["projector/MW", "projector/EP", "projector/MU", "classifier"]
    assert params_equal(unflatten_params(flat), p)


def test_flatten_structurally_equal():
    a, b = flatten_params(init_params(ALL, 4)), flatten_params(init_params(ALL, 4))
    assert a.manifest == b.manifest
    for k in a.vectors:
        assert np.array_equal(a.vectors[k], b.vectors[k])


def test_flatten_order_is_layer_then_row_major():
    p = init_params([DeviceKind.EP], 0)
    conv, dense = p.projectors[DeviceKind.EP].layers
    vec = flatten_params(p).vectors["projector/EP"]
    np.testing.assert_array_equal(vec[: conv.weights.size], conv.weights.ravel(order="C"))
    start = conv.weights.size + conv.bias.size
    np.testing.assert_array_equal(vec[start : start + dense.weights.size], dense.weights.ravel(order="C"))


def test_corrupted_manifest():
    flat = flatten_params(init_params(ALL, 0))
    bad = dict(flat.manifest)
    bad["classifier"] = [dict(bad["classifier"][0], weights_shape=[3, 10])]
    with pytest.raises(SerializationError):
        unflatten_params(FlatParams(flat.vectors, bad))
    with pytest.raises(SerializationError):
        unflatten_params(FlatParams({"classifier": flat.vectors["classifier"]}, flat.manifest))


def test_checkpoint_round_trip(tmp_path):
    p = init_params([DeviceKind.MW, DeviceKind.MU], 2, arch=Architecture(embedding_dim=6))
    path = tmp_path / "ck.npz"
    save_checkpoint(path, p, {"round": 7}, {"pool": np.arange(6.0).reshape(1, 6)})
    ck = load_checkpoint(path)
    assert params_equal(ck.params, p)
    assert ck.metadata == {"round": 7}
    np.testing.assert_array_equal(ck.arrays["pool"], np.arange(6.0).reshape(1, 6))


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, header=np.array('{"format": "other"}'))
    with pytest.raises(SerializationError):
        load_checkpoint(path)
