import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coinfer.core import BatchPolicy, DeviceProfile, NetworkState, Scheme, Strategy, SystemConfig
from coinfer.predictor import (PredictorModel, encode, evaluate_relative, grad_check, load_checkpoint,
                               save_checkpoint, throughput_loss_and_grads, aggregation_matrix, train_relative,
                               train_throughput)
from coinfer.profiles import GCODE_MODELNET40, SubtaskLatencyLUT, synthetic_system
from coinfer.samples import PairSample, Sample, make_pairs
from coinfer.simulator import SimConfig, measure_sample, random_schemes, simulate
from coinfer.sysgraph import (FEATURE_DIM, Normalizer, SystemGraph, build_system_graph, features_from_raw,
                              raw_node_latencies)


def permuted(graph: SystemGraph, feats: np.ndarray, perm):
    """Relabel node ``perm[k]`` as ``k``."""
    inv = {old: new for new, old in enumerate(perm)}
    nodes = tuple(graph.nodes[p] for p in perm)
    edges = tuple(sorted((inv[s], inv[d]) for s, d in graph.edges))
    return SystemGraph(nodes, edges), feats[list(perm)]


def system_samples(seed, k=4):
    cfg, lut = synthetic_system(seed, (1, 3), (2, 4))
    rng = np.random.default_rng(seed)
    return [measure_sample(cfg, lut, s, group=seed, config_seed=seed) for s in random_schemes(cfg, rng, k)]


def test_zero_weights_give_zero_embedding_and_ln2():
    cfg, lut = synthetic_system(4)
    g = build_system_graph(cfg)
    raw = raw_node_latencies(g, Scheme.uniform(cfg.client_ids, Strategy.dp()), cfg, lut)
    model = PredictorModel.zeros(8)
    feats = features_from_raw(g, raw, Normalizer(0.0, 5.0))
    assert np.array_equal(encode(g, feats, model.params), np.zeros(8))
    assert model.predict_throughput(g, feats) == pytest.approx(np.log(2.0), abs=1e-15)


def test_single_node_forward_by_hand():
    g = SystemGraph((("x", "Global"),), ((0, 0),))
    x = np.array([[1, 0, 0, 0, 0, 0.5]])
    w = {k: np.zeros_like(v) for k, v in PredictorModel.fresh(2, input_layer=False).params.items()}
    w["gin1.w1"][0] = [0.5, -1.0]
    w["gin1.w1"][5] = [1.0, 2.0]
    w["gin1.b1"][:] = [0.0, 0.5]
    w["gin1.w2"][:] = [[1.0, 0.0], [0.0, -2.0]]
    w["gin2.w1"][:] = [[0.25, 0.5], [1.0, 1.0]]
    w["gin2.b1"][:] = [-1.0, 0.0]
    w["gin2.w2"][:] = [[3.0, 0.0], [0.5, -1.0]]
    w["gin2.b2"][:] = [0.5, 0.0]
    # layer 1: 2x -> [2, 0.5] -> [2, -1] -> relu [2, 0]
    # layer 2: [4, 0] -> [1, 2] - [1, 0] -> [0, 2] -> [1, -2] + [0.5, 0] -> relu [1.5, 0]
    assert np.array_equal(encode(g, x, w), [1.5, 0.0])


def test_feature_dimension_mismatch():
    cfg, _ = synthetic_system(1)
    g = build_system_graph(cfg)
    model = PredictorModel.fresh(4)
    with pytest.raises(ValueError, match="feature dim"):
        encode(g, np.zeros((g.n_nodes, FEATURE_DIM + 1)), model.params)
    with pytest.raises(ValueError, match="rows"):
        encode(g, np.zeros((g.n_nodes + 1, FEATURE_DIM)), model.params)


@settings(max_examples=15)
@given(st.integers(0, 5000), st.integers(0, 100), st.booleans())
def test_permutation_invariance(seed, wseed, input_layer):
    cfg, lut = synthetic_system(seed, (1, 4))
    g = build_system_graph(cfg)
    rng = np.random.default_rng(seed)
    scheme = random_schemes(cfg, rng, 1)[0]
    feats = features_from_raw(g, raw_node_latencies(g, scheme, cfg, lut), Normalizer(0.0, 6.0))
    model = PredictorModel.fresh(8, wseed, input_layer=input_layer)
    g2, f2 = permuted(g, feats, rng.permutation(g.n_nodes))
    assert np.allclose(encode(g, feats, model.params), encode(g2, f2, model.params), atol=1e-12)
    assert model.predict_throughput(g, feats) == pytest.approx(model.predict_throughput(g2, f2), rel=1e-12)


@settings(max_examples=25)
@given(st.integers(0, 5000), st.integers(0, 100))
def test_relative_antisymmetry(seed, wseed):
    s = system_samples(seed, 2)
    if len(s) < 2:
        return
    model = PredictorModel.fresh(8, wseed)
    norm = Normalizer(0.0, 6.0)
    fa, fb = features_from_raw(s[0].graph, s[0].raw, norm), features_from_raw(s[1].graph, s[1].raw, norm)
    assert model.predict_relative(s[0].graph, fa, fb) + model.predict_relative(s[0].graph, fb, fa) == 1.0
    assert model.predict_relative(s[0].graph, fa, fa) == 0.5


def test_relative_rejects_topology_mismatch():
    a, b = system_samples(0, 1)[0], system_samples(1, 1)[0]
    assert a.graph.n_nodes != b.graph.n_nodes
    model = PredictorModel.fresh(4, normalizer=Normalizer(0.0, 5.0))
    with pytest.raises(ValueError):
        model.predict_relative(a.graph, model.features(a.graph, a.raw), model.features(b.graph, b.raw))


def test_untrained_use_is_flagged():
    s = system_samples(2, 1)[0]
    model = PredictorModel.fresh(4, normalizer=Normalizer(0.0, 5.0))
    model.predict_throughput(s.graph, model.features(s.graph, s.raw))
    assert model.metadata["used_untrained"]


@pytest.mark.parametrize("input_layer", [True, False])
def test_grad_check_on_five_models(input_layer):
    worst = 0.0
    for seed in range(5):
        samples = system_samples(100 + seed, 2)
        a, b = samples[0], samples[-1]
        model = PredictorModel.fresh(8, seed, normalizer=Normalizer(0.0, 6.0), input_layer=input_layer)
        model.output_scale = a.throughput
        pair = PairSample(a.graph, a.raw, b.raw, int(a.throughput > b.throughput))
        worst = max(worst, grad_check(model, a, pair, n_weights=40, seed=seed))
    assert worst < 1e-4


def test_grad_check_repeatable():
    s = system_samples(7, 1)[0]
    model = PredictorModel.fresh(8, 1, normalizer=Normalizer(0.0, 6.0))
    assert grad_check(model, s, seed=3) == grad_check(model, s, seed=3)


@pytest.mark.parametrize("input_layer", [True, False])
def test_zero_features_give_zero_input_gradients(input_layer):
    g = system_samples(5, 1)[0].graph
    model = PredictorModel.fresh(8, 0, input_layer=input_layer)
    X = np.zeros((1, g.n_nodes, FEATURE_DIM))
    _, grads = throughput_loss_and_grads(model.params, aggregation_matrix(g), X, np.array([3.0]), 1.0)
    first = "enc.w" if input_layer else "gin1.w1"
    assert not np.any(grads[first])


def test_checkpoint_round_trip(tmp_path):
    s = system_samples(9, 1)[0]
    model = PredictorModel.fresh(6, 2, normalizer=Normalizer(0.0, 7.5))
    model.output_scale, model.trained = 42.0, True
    save_checkpoint(model, tmp_path / "m.ckpt")
    again = load_checkpoint(tmp_path / "m.ckpt")
    assert again.normalizer == model.normalizer and again.output_scale == 42.0 and again.trained
    assert again.params.keys() == model.params.keys()
    assert all(np.array_equal(again.params[k], model.params[k]) for k in model.params)
    f = model.features(s.graph, s.raw)
    assert again.predict_throughput(s.graph, f) == model.predict_throughput(s.graph, f)


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"not a model")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")


def test_throughput_loss_decreases_on_toy_set():
    samples = system_samples(21, 5) + system_samples(22, 5)
    model, _ = train_throughput(samples[:10], epochs=50, hidden=16, val_samples=[], warmup=0.0)
    h = model.metadata["history"]
    assert np.mean(h[-10:]) < np.mean(h[:10])


def test_training_is_seed_deterministic():
    samples = system_samples(31, 6) + system_samples(32, 6)
    a, _ = train_throughput(samples, epochs=5, hidden=8, seed=4)
    b, _ = train_throughput(samples, epochs=5, hidden=8, seed=4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_empty_inputs_rejected():
    with pytest.raises(ValueError):
        train_throughput([])
    with pytest.raises(ValueError):
        train_relative([])


def test_equal_targets_warn_but_train(caplog):
    samples = system_samples(41, 4)
    flat = [Sample(s.graph, s.raw, 10.0, s.group) for s in samples]
    model, _ = train_throughput(flat, epochs=2, hidden=4, val_samples=[])
    assert model.trained and "equal" in caplog.text


def _separable_pairs(n, rng):
    cfg, lut = synthetic_system(0, (1, 1))
    g = build_system_graph(cfg)
    pairs = []
    for _ in range(n):
        a, b = rng.uniform(1, 100, size=2)
        base = np.array([0.0, 1.0, 2.0, 2.0, 0.0])
        ra, rb = base.copy(), base.copy()
        ra[0], rb[0] = a, b
        pairs.append(PairSample(g, ra, rb, int(a < b)))
    return pairs


def test_separable_pairs_are_learned():
    pairs = _separable_pairs(200, np.random.default_rng(0))
    model, _ = train_relative(pairs, epochs=200, hidden=16, val_pairs=[])
    assert evaluate_relative(model, pairs) >= 0.99


def test_label_flip_mirrors_accuracy():
    pairs = _separable_pairs(60, np.random.default_rng(1))
    model, _ = train_relative(pairs, epochs=10, hidden=8, val_pairs=[])
    flipped = [PairSample(p.graph, p.raw_a, p.raw_b, 1 - p.label) for p in pairs]
    assert evaluate_relative(model, flipped) == pytest.approx(1 - evaluate_relative(model, pairs))


def test_make_pairs_counts():
    g = system_samples(50, 1)[0]
    mk = lambda thr, grp: Sample(g.graph, g.raw, thr, grp)
    assert len(make_pairs([mk(t, 0) for t in (1, 2, 3, 4)])) == 6
    assert make_pairs([mk(5, 0), mk(5, 0)]) == []
    assert len(make_pairs([mk(1, 0), mk(2, 0), mk(3, 0), mk(1, 1), mk(2, 1)])) == 4
    (p,) = make_pairs([mk(1, 0), mk(2, 0)])
    assert p.label == 0


def test_prediction_time_on_largest_graph():
    cfg, lut = synthetic_system(3, (9, 9))
    g = build_system_graph(cfg)
    assert g.n_nodes == 29
    model = PredictorModel.fresh(64, normalizer=Normalizer(0.0, 6.0))
    f = model.features(g, raw_node_latencies(g, Scheme.uniform(cfg.client_ids, Strategy.dp()), cfg, lut))
    times = []
    for _ in range(20):
        t0 = time.perf_counter()
        model.predict_throughput(g, f)
        times.append(time.perf_counter() - t0)
    assert np.median(times) <= 0.010


def amplified_pp_case():
    """TX2-GPU device, i7 edge, 100 Mbps: amplified PP at 30.4 ms against DP at 13.7 ms."""
    cfg = SystemConfig((DeviceProfile("d0", "tx2-gpu"), DeviceProfile("edge", "i7-cpu", "server")),
                       {"d0": GCODE_MODELNET40}, NetworkState(100.0, 0.5), BatchPolicy(1, 0.0), 1)
    lut = SubtaskLatencyLUT([
        ("tx2-gpu", "gcode-mn40", 0, 1, 1, 2.0), ("tx2-gpu", "gcode-mn40", 0, 2, 1, 13.7),
        ("i7-cpu", "gcode-mn40", 1, 2, 1, 0.83), ("i7-cpu", "gcode-mn40", 0, 2, 1, 12.2),
    ])
    return cfg, lut, Scheme.uniform(["d0"], Strategy.dp()), Scheme.uniform(["d0"], Strategy.pp(1))


def test_amplified_pp_case_ground_truth():
    cfg, lut, fast, slow = amplified_pp_case()
    one = SimConfig(cfg, lut, max_tasks=1)
    assert simulate(one, fast).completed_tasks()[0].latency_ms == pytest.approx(13.7)
    assert simulate(one, slow).completed_tasks()[0].latency_ms == pytest.approx(30.4, abs=0.01)


def test_trained_relative_ranks_faster_scheme(trained):
    cfg, lut, fast, slow = amplified_pp_case()
    model = trained["relative"]
    g = build_system_graph(cfg)
    fa = model.features(g, raw_node_latencies(g, fast, cfg, lut))
    fb = model.features(g, raw_node_latencies(g, slow, cfg, lut))
    assert model.predict_relative(g, fa, fb) > 0.5
