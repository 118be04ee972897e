import csv
import io
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coinfer.core import BatchPolicy, ConfigError, DeviceProfile, ModelProfile, NetworkState, Scheme, Strategy, \
    SystemConfig
from coinfer.profiles import (GCODE_MODELNET40, LUTLookupError, SubtaskLatencyLUT, load_fixture_lut, load_scenario,
                              lookup_latency, synthetic_system)
from coinfer.simulator import (SimConfig, SimulationError, Workload, brute_force_best, full_scheme_space,
                               generate_training_set, measure_sample, random_schemes, simulate, training_horizon)

from conftest import two_layer_system


def test_pipeline_first_latency_and_rate():
    cfg, lut = two_layer_system(5, 2, 3)
    res = simulate(SimConfig(cfg, lut, max_tasks=2000), Scheme.uniform(cfg.client_ids, Strategy.pp(1)))
    first = min(res.completed_tasks(), key=lambda t: t.task_id)
    assert first.latency_ms == pytest.approx(10.0)
    assert res.throughput == pytest.approx(200.0, rel=0.01)


def test_device_only_rate():
    cfg, lut = two_layer_system(5, 2, 3, dev_full=20)
    res = simulate(SimConfig(cfg, lut, max_tasks=500), Scheme.uniform(cfg.client_ids, Strategy.pp(2)))
    assert res.throughput == pytest.approx(50.0, rel=0.01)


def test_dp_replica_rates_add():
    cfg, lut = two_layer_system(5, 2, 3, dev_full=20, srv_full=5, result_bytes=250.0)
    res = simulate(SimConfig(cfg, lut, max_tasks=3000), Scheme.uniform(cfg.client_ids, Strategy.dp()))
    assert res.throughput == pytest.approx(250.0, rel=0.01)
    where = [t.where for t in res.completed_tasks()]
    # one in five inputs stays on the device
    assert where.count("device") / len(where) == pytest.approx(0.2, abs=0.02)


def _gcode_pair(bandwidth, overhead=0.5):
    devs = (DeviceProfile("d0", "tx2-gpu"), DeviceProfile("d1", "tx2-gpu"), DeviceProfile("edge", "i7-cpu", "server"))
    return SystemConfig(devs, {"d0": GCODE_MODELNET40, "d1": GCODE_MODELNET40},
                        NetworkState(bandwidth, overhead), BatchPolicy(), 2)


def test_all_dp_wins_at_one_megabit():
    sim = SimConfig(_gcode_pair(1.0), load_fixture_lut(), max_tasks=200)
    best, _ = brute_force_best(sim, full_scheme_space(sim.system))
    assert best == Scheme.uniform(["d0", "d1"], Strategy.dp())


def test_fast_link_winner_follows_compute():
    lut = load_fixture_lut()
    fast = SimConfig(_gcode_pair(1e6, 0.0), lut, max_tasks=200)
    best, res = brute_force_best(fast, full_scheme_space(fast.system))
    tiny = ModelProfile("gcode-mn40", 2, (1e-9, 1e-9, 1e-9))
    compute_only = fast.with_system(replace(fast.system, models={"d0": tiny, "d1": tiny}))
    best2, res2 = brute_force_best(compute_only, full_scheme_space(compute_only.system))
    assert best == best2
    assert res.throughput == pytest.approx(res2.throughput, rel=1e-3)


def test_brute_force_single_and_empty():
    cfg, lut = two_layer_system(5, 2, 3)
    only = Scheme.uniform(cfg.client_ids, Strategy.pp(1))
    assert brute_force_best(SimConfig(cfg, lut), [only])[0] == only
    with pytest.raises(ValueError):
        brute_force_best(SimConfig(cfg, lut), [])


@settings(max_examples=20)
@given(st.integers(0, 100_000), st.sampled_from(["closed", "open"]))
def test_conservation(seed, mode):
    cfg, lut = synthetic_system(seed, (1, 4), (2, 5))
    scheme = random_schemes(cfg, np.random.default_rng(seed), 1)[0]
    res = simulate(SimConfig(cfg, lut, Workload(mode, rate_hz=50.0), max_tasks=60, seed=seed), scheme)
    ids = [t.task_id for t in res.tasks]
    assert len(ids) == len(set(ids))
    assert res.issued == res.completed + res.in_flight
    assert res.completed == len(res.completed_tasks()) > 0
    assert all(t.complete_ms >= t.issue_ms for t in res.completed_tasks())
    assert res.throughput > 0


def test_determinism_and_exports():
    cfg, lut = synthetic_system(77, (3, 3))
    scheme = random_schemes(cfg, np.random.default_rng(0), 1)[0]
    sim = SimConfig(cfg, lut, Workload("open", rate_hz=30.0, poisson=True), max_tasks=120, seed=5)
    a, b = simulate(sim, scheme), simulate(sim, scheme)
    assert a.to_json() == b.to_json() and a.to_csv() == b.to_csv()
    rows = list(csv.DictReader(io.StringIO(a.to_csv())))
    assert len(rows) == a.completed
    assert set(rows[0]) == {"task_id", "device", "issue_ms", "complete_ms", "scheme", "where"}


def test_errors():
    cfg, lut = two_layer_system(5, 2, 3)
    with pytest.raises(ValueError):
        SimConfig(cfg, lut, max_tasks=0)
    with pytest.raises(ValueError):
        SimConfig(cfg, lut, max_tasks=None)
    with pytest.raises(SimulationError):
        simulate(SimConfig(cfg, lut, max_tasks=None, duration_ms=1.0), Scheme.uniform(cfg.client_ids, Strategy.pp(1)))
    gap = SimConfig(cfg, SubtaskLatencyLUT([r for r in lut if r[0] != "edge"]))
    with pytest.raises(LUTLookupError):
        simulate(gap, Scheme.uniform(cfg.client_ids, Strategy.pp(1)))
    with pytest.raises(ConfigError):
        simulate(SimConfig(cfg, lut), [(5.0, Scheme.uniform(cfg.client_ids, Strategy.pp(1)))])


def test_scheme_timeline_switches_mid_run():
    cfg, lut = two_layer_system(5, 2, 3, dev_full=20, srv_full=5)
    tl = [(0.0, Scheme.uniform(cfg.client_ids, Strategy.pp(1))), (100.0, Scheme.uniform(cfg.client_ids, Strategy.dp()))]
    res = simulate(SimConfig(cfg, lut, max_tasks=100), tl)
    versions = {t.version for t in res.completed_tasks()}
    assert versions == {0, 1}
    for t in res.completed_tasks():
        assert (t.strategy == "pp:1") == (t.version == 0)


def test_training_set_reproduces_and_audits():
    a = generate_training_set(20, seed=3, schemes_per_config=4)
    b = generate_training_set(20, seed=3, schemes_per_config=4)
    assert [s.throughput for s in a] == [s.throughput for s in b]
    for s in a:
        cfg, lut = synthetic_system(s.config_seed)
        again = measure_sample(cfg, lut, Scheme.parse(s.scheme))
        assert again.throughput == s.throughput
        assert np.array_equal(again.raw, s.raw)
    with pytest.raises(ValueError):
        generate_training_set(0, seed=3)


def test_training_horizon_grows_with_devices():
    one, _ = synthetic_system(0, (1, 1))
    three, _ = synthetic_system(0, (3, 3))
    assert training_horizon(three) > training_horizon(one)


def test_batch_throughput_peaks_at_knee():
    cfg, lut = load_scenario("fixture:batch")
    costs = {b: lookup_latency(lut, cfg.server.kind, "knee-gnn", (0, 2), b) for b in range(1, 9)}
    knee = max(costs, key=lambda b: b / costs[b])
    rates = []
    for mb in range(1, 9):
        sys_ = replace(cfg, batch_policy=BatchPolicy(mb, 10.0))
        sim = SimConfig(sys_, lut, Workload("open", rate_hz=200.0), max_tasks=2000)
        rates.append(simulate(sim, Scheme.uniform(cfg.client_ids, Strategy.pp(0))).throughput)
    peak = int(np.argmax(rates)) + 1
    assert peak == knee == 5
    assert all(rates[i] <= rates[i + 1] * 1.001 for i in range(knee - 1))
    assert all(rates[i] >= rates[i + 1] * 0.999 for i in range(knee - 1, 7))


def test_server_batches_respect_cap():
    cfg, lut = load_scenario("fixture:batch")
    sim = SimConfig(cfg, lut, Workload("open", rate_hz=200.0), max_tasks=300, record_events=True)
    res = simulate(sim, Scheme.uniform(cfg.client_ids, Strategy.pp(0)))
    sizes = [len(e[2]) for e in res.events if e[1] == "batch"]
    assert sizes and max(sizes) <= cfg.batch_policy.max_batch
    assert sum(sizes) >= res.completed
