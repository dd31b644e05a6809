from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hhhfl import numerics as nx
from hhhfl.errors import ProtocolError
from hhhfl.federation import (
    ClientState,
    ClientUpdate,
    Hyperparameters,
    ServerState,
    Simulation,
    Transport,
    aggregate,
    broadcast,
    client_local_update,
    evaluate,
    exchange_embeddings,
    make_server,
    register_clients,
    run_baseline,
    weighted_average,
)
from hhhfl.ingest import ClientShard, DeviceData, DeviceKind, split_dataset
from hhhfl.mmd import MmdConfig, mmd_squared
from hhhfl.models import (
    ClassifierParams,
    ModelParams,
    ProjectorParams,
    flatten_params,
    init_params,
    layers_to_vector,
    params_equal,
)

MW, EP, MU = DeviceKind.MW, DeviceKind.EP, DeviceKind.MU
ALL = [MW, EP, MU]


def tiny_shard(device, client_id, n=6, dim=None, seed=0):
    dim = dim or {MW: 1024, EP: 440, MU: 512}[device]
    rng = np.random.default_rng(seed)
    return ClientShard(client_id, device, rng.normal(size=(n, dim)), np.arange(n) % 2)


def server_for(devices, shards, hyper=Hyperparameters(), seed=0, mmd=None):
    params = init_params(devices, seed)
    clients = register_clients(shards, seed)
    return make_server(params, clients, hyper, mmd), clients


# ---------------------------------------------------------------- broadcast


def test_broadcast_single_client_gets_everything():
    server, _ = server_for([MU], [tiny_shard(MU, 0)])
    payload = broadcast(server)[0]
    got = ModelParams({MU: payload.projector}, payload.classifier)
    assert params_equal(got, server.params)
    assert payload.foreign_pools == {} and payload.kernel is None


def test_broadcast_isolates_device_groups():
    shards = [tiny_shard(MW, 0), tiny_shard(EP, 1)]
    server, _ = server_for([MW, EP], shards)
    server = replace(server, pools={MW: np.ones((4, 10)), EP: np.zeros((3, 10))})
    transport = Transport()
    out = broadcast(server, transport)
    assert out[0].device == MW and out[0].projector.device == MW
    mw_vec = layers_to_vector(server.params.projectors[MW].layers)
    assert np.array_equal(layers_to_vector(out[0].projector.layers), mw_vec)
    # only the foreign pool is sent, never the own one
    assert set(out[0].foreign_pools) == {EP} and set(out[1].foreign_pools) == {MW}
    ep_len = mw_vec.size
    to_mw = [m for m in transport.log if m.receiver == "client-0" and m.kind == "projector"]
    assert [m.payload_len for m in to_mw] == [ep_len]
    for p in out.values():
        assert all(pool.shape[1] == 10 for pool in p.foreign_pools.values())


def test_broadcast_rejects_unregistered_projector():
    server, _ = server_for([MW], [tiny_shard(MW, 0)])
    server = replace(server, params=init_params([MW, EP], 0))
    with pytest.raises(ProtocolError):
        broadcast(server)


# ------------------------------------------------------------ local update


def manual_sgd(projector, classifier, x, y, batches, lr):
    """Plain CE mini-batch SGD through the numerics primitives."""
    net = projector.layers + classifier.layers
    for idx in batches:
        res = nx.backprop(net, x[idx], y[idx])
        net = nx.sgd_step(net, res.grads, lr)
    return net


def test_zero_lambda_is_plain_sgd():
    shard = tiny_shard(MU, 0, n=20)
    hyper = Hyperparameters(batch_size=8, learning_rate=0.05, local_epochs=2)
    server, clients = server_for([MU], [shard], hyper)
    payload = broadcast(server)[0]
    upd = client_local_update(clients[0], payload, hyper, round_index=1)
    rng = np.random.default_rng([clients[0].seed, 0, 1])
    batches = []
    for _ in range(2):
        order = rng.permutation(20)
        batches += [order[i : i + 8] for i in range(0, 20, 8)]
    expected = manual_sgd(payload.projector, payload.classifier, shard.features, shard.labels, batches, 0.05)
    got = upd.projector.layers + upd.classifier.layers
    for a, b in zip(got, expected):
        assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)
    assert upd.sample_count == 20
    assert upd.embeddings.shape == (20, 10)


def test_zero_learning_rate_fixed_point():
    shard = tiny_shard(EP, 0)
    hyper = Hyperparameters(learning_rate=0.0)
    server, clients = server_for([EP, MU], [shard, tiny_shard(MU, 1)], hyper)
    server = replace(server, pools={MU: np.random.default_rng(1).normal(size=(5, 10))})
    payload = broadcast(server)[0]
    upd = client_local_update(clients[0], payload, hyper)
    assert np.array_equal(layers_to_vector(upd.projector.layers), layers_to_vector(payload.projector.layers))
    assert np.array_equal(layers_to_vector(upd.classifier.layers), layers_to_vector(payload.classifier.layers))


def total_loss(proj_layers, cls_layers, x, y, pool, lam, kernel):
    emb = nx.forward(proj_layers, x)
    ce = nx.loss_value(cls_layers, emb, y)
    return ce + lam * mmd_squared(emb, pool, kernel)


def test_single_step_matches_finite_difference_oracle():
    rng = np.random.default_rng(3)
    shard = ClientShard(0, MU, rng.normal(size=(2, 512)), np.array([0, 1]))
    hyper = Hyperparameters(batch_size=2, learning_rate=0.1, mmd_weight=0.7)
    server, clients = server_for([MU, MW], [shard, tiny_shard(MW, 1)], hyper)
    pool = rng.normal(size=(6, 10))
    server = replace(server, pools={MW: pool})
    payload = broadcast(server)[0]
    kernel = payload.kernel
    assert kernel.resolved and payload.weights == {MW: 0.7}
    upd = client_local_update(clients[0], payload, hyper)

    # oracle: numerical gradient of CE + lambda*MMD^2 on a few coordinates per array
    proj, cls = payload.projector.layers, payload.classifier.layers
    x, y = shard.features, shard.labels
    eps = 1e-6
    probe = np.random.default_rng(0)
    for which, layers in (("proj", proj), ("cls", cls)):
        new_layers = upd.projector.layers if which == "proj" else upd.classifier.layers
        for li, layer in enumerate(layers):
            for name in ("weights", "bias"):
                arr = getattr(layer, name)
                for c in probe.choice(arr.size, size=min(8, arr.size), replace=False):
                    def shifted(delta):
                        a = arr.copy().ravel()
                        a[c] += delta
                        mod = replace(layer, **{name: a.reshape(arr.shape)})
                        ls = list(layers)
                        ls[li] = mod
                        if which == "proj":
                            return total_loss(ls, cls, x, y, pool, 0.7, kernel)
                        return total_loss(proj, ls, x, y, pool, 0.7, kernel)
                    g = (shifted(eps) - shifted(-eps)) / (2 * eps)
                    expected = arr.ravel()[c] - 0.1 * g
                    got = getattr(new_layers[li], name).ravel()[c]
                    assert got == pytest.approx(expected, abs=1e-8)


def test_client_rejects_foreign_payload():
    shards = [tiny_shard(MW, 0), tiny_shard(EP, 1)]
    server, clients = server_for([MW, EP], shards)
    payloads = broadcast(server)
    with pytest.raises(ProtocolError):
        client_local_update(clients[0], payloads[1], server.hyper)


def test_empty_shard_rejected_at_registration():
    empty = ClientShard(0, MW, np.zeros((0, 1024)), np.zeros(0, dtype=int))
    with pytest.raises(ProtocolError):
        ClientState(0, MW, empty, 0)


# ---------------------------------------------------------------- aggregate


def update_from(params, device, cid, n, scale=0.0):
    proj = params.projectors[device]
    shift = lambda layers: [replace(l, weights=l.weights + scale, bias=l.bias + scale) for l in layers]
    return ClientUpdate(cid, device, ProjectorParams(device, shift(proj.layers)),
                        ClassifierParams(shift(params.classifier.layers)), n, 0.0, 0.0, None)


def bare_server(params, registry):
    return ServerState(0, params, registry, MmdConfig(), Hyperparameters())


def test_aggregate_idempotent():
    params = init_params([MW, EP], 0)
    server = bare_server(params, {MW: [0, 1, 2], EP: [3]})
    ups = [update_from(params, MW, i, n) for i, n in enumerate((3, 7, 11))] + [update_from(params, EP, 3, 5)]
    assert params_equal(aggregate(server, ups), params)


def test_aggregate_weighted_scalar_view():
    assert weighted_average([np.array([0.0]), np.array([4.0])], [1, 3])[0] == 3.0


def test_aggregate_weighted_mean_in_params():
    params = init_params([MU], 0)
    server = bare_server(params, {MU: [0, 1]})
    ups = [update_from(params, MU, 0, 1, scale=0.0), update_from(params, MU, 1, 3, scale=4.0)]
    agg = aggregate(server, ups)
    base = flatten_params(params).vectors
    got = flatten_params(agg).vectors
    np.testing.assert_allclose(got["projector/MU"], base["projector/MU"] + 3.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(got["classifier"], base["classifier"] + 3.0, rtol=0, atol=1e-12)


def test_aggregate_singleton_groups():
    params = init_params([MW, EP], 0)
    server = bare_server(params, {MW: [0], EP: [1]})
    a, b = update_from(params, MW, 0, 2, scale=1.0), update_from(params, EP, 1, 6, scale=-1.0)
    agg = aggregate(server, [b, a])
    assert np.array_equal(layers_to_vector(agg.projectors[MW].layers), layers_to_vector(a.projector.layers))
    assert np.array_equal(layers_to_vector(agg.projectors[EP].layers), layers_to_vector(b.projector.layers))
    expected = layers_to_vector(params.classifier.layers) + (2 * 1.0 + 6 * -1.0) / 8
    np.testing.assert_allclose(layers_to_vector(agg.classifier.layers), expected, rtol=0, atol=1e-12)


def test_aggregate_permutation_invariant():
    params = init_params([MW, MU], 0)
    server = bare_server(params, {MW: [0, 1], MU: [2, 3]})
    ups = [update_from(params, MW, 0, 3, 0.1), update_from(params, MW, 1, 5, -0.4),
           update_from(params, MU, 2, 2, 0.7), update_from(params, MU, 3, 9, 0.2)]
    ref = flatten_params(aggregate(server, ups)).vectors
    for perm in ([3, 1, 0, 2], [2, 3, 1, 0]):
        got = flatten_params(aggregate(server, [ups[i] for i in perm])).vectors
        assert all(np.array_equal(ref[k], got[k]) for k in ref)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3), min_size=1, max_size=6),
    st.data(),
)
def test_weighted_average_is_convex(vectors, data):
    counts = data.draw(st.lists(st.integers(1, 1000), min_size=len(vectors), max_size=len(vectors)))
    arrs = [np.array(v) for v in vectors]
    out = weighted_average(arrs, counts)
    stack = np.stack(arrs)
    assert np.all(out >= stack.min(axis=0)) and np.all(out <= stack.max(axis=0))


def test_aggregate_shape_mismatch_names_client():
    params = init_params([MW], 0)
    server = bare_server(params, {MW: [0, 1]})
    bad = update_from(init_params([MW], 0), MW, 1, 2)
    bad.classifier = ClassifierParams([nx.dense_layer(np.zeros((2, 9)))])
    with pytest.raises(ProtocolError, match="client 1"):
        aggregate(server, [update_from(params, MW, 0, 2), bad])


def test_aggregate_requires_every_group():
    params = init_params([MW, EP], 0)
    server = bare_server(params, {MW: [0], EP: [1]})
    with pytest.raises(ProtocolError):
        aggregate(server, [update_from(params, MW, 0, 2)])


# ----------------------------------------------------------------- exchange


def _with_emb(cid, device, n):
    return ClientUpdate(cid, device, None, None, n, 0.0, 0.0, np.full((n, 10), float(cid)))


def test_exchange_passthrough_and_concat():
    pools = exchange_embeddings([_with_emb(0, MW, 8)])
    assert pools[MW].shape == (8, 10)
    pools = exchange_embeddings([_with_emb(1, MW, 8), _with_emb(0, MW, 8), _with_emb(2, EP, 4)])
    assert pools[MW].shape == (16, 10) and pools[EP].shape == (4, 10)
    # client-id order, regardless of list order
    assert pools[MW][0, 0] == 0.0 and pools[MW][-1, 0] == 1.0
    assert all(p.shape[1] not in (440, 512, 1024) for p in pools.values())


# ------------------------------------------------------------------- rounds


def test_round_counter_and_report(small_split):
    hyper = Hyperparameters(rounds=3, exchange_size=8)
    sim = Simulation(init_params(ALL, 0), small_split.shards, small_split.test_sets, hyper, seed=0)
    for expected in (1, 2, 3):
        assert sim.step().round == expected
    assert sim.server.round == 3
    with pytest.raises(ProtocolError):
        sim.step()
    r = sim.reports[-1]
    assert set(r.device_accuracy) == set(ALL)
    assert all(0.0 <= a <= 1.0 for a in r.device_accuracy.values())
    assert set(r.mmd) == {("MW", "EP"), ("MW", "MU"), ("EP", "MU")}
    assert all(v >= 0 for v in r.mmd.values())


def test_round_first_has_no_mmd_term(small_split):
    hyper = Hyperparameters(rounds=1)
    sim = Simulation(init_params(ALL, 0), small_split.shards, small_split.test_sets, hyper, seed=0)
    payloads = broadcast(sim.server)
    assert all(p.foreign_pools == {} for p in payloads.values())


def _run(split, seed=0, rounds=3, workers=1):
    hyper = Hyperparameters(rounds=rounds, exchange_size=8)
    sim = Simulation(init_params(ALL, seed), split.shards, split.test_sets, hyper, seed=seed, workers=workers)
    return sim.run(), sim


def test_same_seed_same_reports(small_split):
    a, _ = _run(small_split)
    b, _ = _run(small_split)
    assert all(x.same_metrics(y) for x, y in zip(a, b))


def test_parallel_clients_match_sequential(small_split):
    a, sa = _run(small_split)
    b, sb = _run(small_split, workers=3)
    assert all(x.same_metrics(y) for x, y in zip(a, b))
    assert params_equal(sa.server.params, sb.server.params)


@pytest.mark.parametrize("seed", [0, 1])
def test_mmd_decreases_on_shifted_domains(seed):
    from hhhfl.harness import SyntheticSpec, generate_synthetic

    data = generate_synthetic(SyntheticSpec.default(ALL, 60, separation=4.0), seed)
    split = split_dataset(data, 2, 0.2, seed)
    hyper = Hyperparameters(rounds=30, exchange_size=32)
    reports = Simulation(init_params(ALL, seed), split.shards, split.test_sets, hyper, seed=seed).run()
    for pair, first in reports[0].mmd.items():
        assert reports[29].mmd[pair] < first


def test_checkpoint_resume_is_exact(small_split, tmp_path):
    hyper = Hyperparameters(rounds=4, exchange_size=8)
    full = Simulation(init_params(ALL, 0), small_split.shards, small_split.test_sets, hyper, seed=0)
    full.run()

    first = Simulation(init_params(ALL, 0), small_split.shards, small_split.test_sets, hyper, seed=0)
    first.step()
    first.step()
    first.save(tmp_path / "server.npz")
    resumed = Simulation(init_params(ALL, 1), small_split.shards, small_split.test_sets, hyper, seed=0)
    resumed.restore(tmp_path / "server.npz")
    assert resumed.server.round == 2
    tail = resumed.run()
    assert all(x.same_metrics(y) for x, y in zip(tail, full.reports[2:]))
    assert params_equal(resumed.server.params, full.server.params)


# --------------------------------------------------------------- evaluation


def test_zero_classifier_predicts_lowest_index():
    params = init_params([MU], 0)
    params.classifier = ClassifierParams([nx.dense_layer(np.zeros((2, 10)))])
    labels = np.array([0, 0, 0, 1, 1])
    test = {MU: DeviceData(MU, np.random.default_rng(0).normal(size=(5, 512)), labels)}
    ev = evaluate(params, test)
    assert ev.device_accuracy[MU] == 0.6 and ev.pooled_accuracy == 0.6


def test_pooled_accuracy_weights_by_size(small_split):
    params = init_params(ALL, 0)
    ev = evaluate(params, small_split.test_sets)
    n = {d: len(small_split.test_sets[d]) for d in ALL}
    expected = sum(ev.device_accuracy[d] * n[d] for d in ALL) / sum(n.values())
    assert ev.pooled_accuracy == pytest.approx(expected, abs=1e-12)


def test_evaluate_missing_projector(small_split):
    with pytest.raises(ProtocolError):
        evaluate(init_params([MW], 0), small_split.test_sets)


def test_separable_data_reaches_perfect_accuracy():
    from hhhfl.harness import SyntheticSpec, generate_synthetic

    data = generate_synthetic(SyntheticSpec.default([MU, EP], 40, separation=20.0), 1)
    split = split_dataset(data, 2, 0.2, 1)
    hyper = Hyperparameters(rounds=15, exchange_size=8, learning_rate=0.05)
    reports = Simulation(init_params([MU, EP], 1), split.shards, split.test_sets, hyper, seed=1).run()
    assert reports[-1].pooled_accuracy == 1.0


# ----------------------------------------------------------------- baseline


def test_baseline_equals_single_device_round_stream(small_split):
    shards = [s for s in small_split.shards if s.device == EP]
    hyper = Hyperparameters(rounds=3, mmd_weight=0.0)
    params = init_params([EP], 0)
    base = run_baseline(EP, params, shards, small_split.test_sets, hyper, 0, record_messages=True)
    fed = Simulation(params, shards, {EP: small_split.test_sets[EP]}, hyper, 0, mmd=MmdConfig()).run()
    assert len(base.reports) == 3
    assert all(x.same_metrics(replace(y, mmd={})) for x, y in zip(base.reports, fed))
    assert not any(m.kind.startswith(("embeddings", "pool/")) for m in base.transport.log)


def test_three_independent_baselines(small_split):
    hyper = Hyperparameters(rounds=2)
    params = init_params(ALL, 0)
    streams = {d: run_baseline(d, params, small_split.shards, small_split.test_sets, hyper, 0).reports for d in ALL}
    assert len(streams) == 3
    for d, reports in streams.items():
        assert set(reports[0].device_accuracy) == {d}
        assert reports[0].mmd == {}


# ------------------------------------------------------------------ privacy


def test_message_log_carries_no_raw_vectors(small_split, tmp_path):
    hyper = Hyperparameters(rounds=2, exchange_size=8)
    sim = Simulation(init_params(ALL, 0), small_split.shards, small_split.test_sets, hyper, 0, record_messages=True)
    sim.run()
    log = sim.transport.log
    assert log
    assert not [m for m in log if m.payload_len in (440, 512, 1024)]
    emb = [m for m in log if m.kind == "embeddings" or m.kind.startswith("pool/")]
    assert emb and all(m.payload_len == 10 for m in emb)
    kinds = {m.kind for m in log if m.receiver == "server"}
    assert kinds == {"projector", "classifier", "sample_count", "train_loss", "train_accuracy", "embeddings"}
    path = tmp_path / "messages.jsonl"
    sim.transport.write_jsonl(path)
    import json

    first = json.loads(path.read_text().splitlines()[0])
    assert set(first) >= {"round", "from", "to", "kind", "payload_len"}
