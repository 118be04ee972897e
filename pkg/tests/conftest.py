import os
import time

import numpy as np
import pytest
from hypothesis import settings

from coinfer.core import BatchPolicy, DeviceProfile, ModelProfile, NetworkState, SystemConfig
from coinfer.profiles import SubtaskLatencyLUT

settings.register_profile("default", max_examples=40, deadline=None)
settings.register_profile("ci", max_examples=15, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

BYTES_PER_MS_AT_1MBPS = 125.0  # 10^6 bits/s = 125 bytes/ms


def two_layer_system(dev_ms, xfer_ms, srv_ms, *, dev_full=None, srv_full=None, result_bytes=1e-6,
                     n_clients=1, batch=BatchPolicy(1, 0.0), workers=1, kind="tx2-gpu"):
    """Clients running a 2-layer model at 1 Mbps with no per-message overhead.

    PP(1) has stages ``dev_ms`` / ``xfer_ms`` / ``srv_ms``; DP uses ``dev_full`` and
    ``srv_full`` with the same raw-input transfer.
    """
    vols = (xfer_ms * BYTES_PER_MS_AT_1MBPS, xfer_ms * BYTES_PER_MS_AT_1MBPS, result_bytes)
    model = ModelProfile("toy", 2, vols)
    ids = [f"d{i}" for i in range(n_clients)]
    devices = [DeviceProfile(d, kind) for d in ids] + [DeviceProfile("srv", "edge", "server")]
    config = SystemConfig(tuple(devices), {d: model for d in ids}, NetworkState(1.0), batch, workers)
    dev_full = dev_full if dev_full is not None else dev_ms * 2
    srv_full = srv_full if srv_full is not None else srv_ms * 2
    lut = SubtaskLatencyLUT([
        (kind, "toy", 0, 1, 1, dev_ms), (kind, "toy", 1, 2, 1, dev_ms), (kind, "toy", 0, 2, 1, dev_full),
        ("edge", "toy", 0, 1, 1, srv_ms), ("edge", "toy", 1, 2, 1, srv_ms), ("edge", "toy", 0, 2, 1, srv_full),
    ])
    return config, lut


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def trained():
    """Both heads trained once on a 2000-sample simulated dataset, split by system."""
    from coinfer.predictor import train_relative, train_throughput
    from coinfer.samples import make_pairs, split_groups
    from coinfer.simulator import generate_training_set

    t0 = time.perf_counter()
    samples = generate_training_set(2000, seed=0)
    train, val = split_groups(samples, 0.7, 0)
    thr, _ = train_throughput(train, epochs=200, val_samples=val)
    t1 = time.perf_counter()
    rel, acc = train_relative(make_pairs(train), epochs=100, val_pairs=make_pairs(val))
    t2 = time.perf_counter()
    return {"samples": samples, "train": train, "val": val, "throughput": thr, "relative": rel,
            "relative_accuracy": acc, "throughput_metrics": thr.metadata["validation"],
            "seconds": {"data_and_throughput": t1 - t0, "relative": t2 - t1}}


# criterion lines collected by test_acceptance, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
