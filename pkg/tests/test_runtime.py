import asyncio
import socket
import time

import pytest

from coinfer.core import NetworkState, Scheme, Strategy
from coinfer.profiles import load_scenario
from coinfer.runtime import DeviceClient, DeviceOptions, EdgeServer, ServerOptions, SessionError, run_device
from coinfer.runtime import protocol as P
from coinfer.scheduler import Evaluator

SCALE = 0.3


def loopback():
    return load_scenario("fixture:loopback")


async def run_loopback(cfg, lut, devices, tasks, server_opts=None, scale=SCALE, during=None):
    srv = EdgeServer(cfg, lut, server_opts or ServerOptions(time_scale=scale, max_sessions=len(devices)))
    host, port = await srv.start()
    clients = [DeviceClient(cfg, lut, DeviceOptions(host, port, d, tasks=tasks, time_scale=scale))
               for d in devices]
    jobs = [c.run() for c in clients] + ([during(srv)] if during else [])
    stats = (await asyncio.gather(*jobs))[:len(devices)]
    await asyncio.wait_for(srv.wait_done(), 10)
    await srv.stop()
    return srv, stats


def check_atomic(srv, stats):
    """Each task ran entirely under the strategy it was issued with."""
    by_id = {(s.device_id, r.task_id): r for s in stats for r in s.records}
    for row in srv.rows:
        rec = by_id[(row["device"], row["task_id"])]
        assert row["scheme"] == rec.strategy
        strat = Strategy.parse(row["scheme"])
        start = 0 if strat.is_dp else strat.split
        assert row["layers"] == f"{start}-2"
    for s in stats:
        versions = [r.version for r in sorted(s.records, key=lambda r: r.task_id)]
        assert versions == sorted(versions)


def test_three_devices_with_mid_run_update():
    cfg, lut = loopback()
    srv, stats = asyncio.run(run_loopback(cfg, lut, ["d0", "d1", "d2"], 100))
    assert not srv.errors
    assert all(s.conserved and s.completed == 100 for s in stats)
    assert sum(s.completed for s in stats) == 300
    # the bandwidth drop changes every device's strategy once traffic is flowing
    assert any(r[1] == "bandwidth" for r in srv.reschedules)
    assert all(len({v for v, _ in s.updates}) >= 2 for s in stats)
    check_atomic(srv, stats)


def test_stable_scheme_single_device():
    cfg, lut = loopback()
    cfg = cfg.with_network(NetworkState(100.0, 0.5))
    srv, (stats,) = asyncio.run(run_loopback(cfg, lut, ["d0"], 40))
    assert stats.conserved and stats.completed == 40
    assert len(stats.updates) == 1
    check_atomic(srv, [stats])


def test_zero_tasks_returns_immediately():
    cfg, lut = loopback()
    stats = run_device(cfg, lut, DeviceOptions("127.0.0.1", 1, "d0", tasks=0))
    assert stats.sent == 0 and stats.conserved


def _closed_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_unreachable_server_fails_within_retry_budget():
    cfg, lut = loopback()
    t0 = time.monotonic()
    with pytest.raises(SessionError, match="3 retries"):
        run_device(cfg, lut, DeviceOptions("127.0.0.1", _closed_port(), "d0", tasks=5, retry_delay_s=0.05))
    assert time.monotonic() - t0 < 2.0


def test_unknown_device_rejected():
    cfg, lut = loopback()
    with pytest.raises(ValueError):
        DeviceClient(cfg, lut, DeviceOptions(device_id="server"))


class SlowEvaluator(Evaluator):
    """Ties every comparison after a delay, standing in for an expensive predictor."""

    def __init__(self, delay_s, spans):
        super().__init__()
        self.delay_s, self.spans = delay_s, spans

    def compare(self, a, b):
        t0 = time.monotonic()
        time.sleep(self.delay_s)
        self.spans.append((t0, time.monotonic()))
        return 0.5


def test_scheduling_does_not_delay_flushes():
    cfg, lut = loopback()
    cfg = cfg.with_network(NetworkState(100.0, 0.5))
    spans, calls = [], []

    def factory(c, l):
        calls.append(1)
        return SlowEvaluator(0.0 if len(calls) == 1 else 0.15, spans)

    async def trigger(srv):
        while len(srv.rows) < 10:
            await asyncio.sleep(0.01)
        srv.request_reschedule("test")

    opts = ServerOptions(time_scale=1.0, max_sessions=1, evaluator_factory=factory)
    srv, (stats,) = asyncio.run(run_loopback(cfg, lut, ["d0"], 150, opts, scale=1.0, during=trigger))
    assert stats.conserved
    assert any(r[1] == "test" for r in srv.reschedules)
    slow = [s for s in spans if s[1] - s[0] > 0.1]
    assert slow, "the slow evaluator never ran"
    lo = (min(s[0] for s in slow) - srv._t0) * 1000.0
    hi = (max(s[1] for s in slow) - srv._t0) * 1000.0
    during = [r for r in srv.rows if lo <= r["flush_ms"] <= hi]
    assert during, "no batch was flushed while the optimizer ran"
    window = cfg.batch_policy.window_ms
    late = [r["flush_ms"] - r["recv_ms"] - window for r in during]
    assert max(late) < window


def test_malformed_frame_closes_only_that_connection():
    cfg, lut = loopback()
    cfg = cfg.with_network(NetworkState(100.0, 0.5))

    async def go():
        srv = EdgeServer(cfg, lut, ServerOptions(time_scale=SCALE, max_sessions=2))
        host, port = await srv.start()
        reader, writer = await asyncio.open_connection(host, port)
        writer.write(b"\x07" + b"\x00" * 20)
        await writer.drain()
        assert await reader.read() == b""  # server hung up
        writer.close()
        stats = await DeviceClient(cfg, lut, DeviceOptions(host, port, "d0", tasks=20, time_scale=SCALE)).run()
        await asyncio.wait_for(srv.wait_done(), 10)
        await srv.stop()
        return srv, stats

    srv, stats = asyncio.run(go())
    assert stats.conserved and stats.completed == 20
    assert len(srv.errors) == 1 and "unknown message type" in srv.errors[0]


def test_duplicate_registration_rejected():
    cfg, lut = loopback()

    async def go():
        srv = EdgeServer(cfg, lut, ServerOptions(time_scale=SCALE))
        host, port = await srv.start()
        body = P.encode_scheduling(P.SUB_REGISTER, {"device_id": "d0"})
        r1, w1 = await asyncio.open_connection(host, port)
        await P.write_frame(w1, P.MSG_SCHEDULING, 0, body)
        h, payload = await P.read_frame(r1)
        assert P.decode_scheduling(payload)[0] == P.SUB_REGISTER_ACK
        r2, w2 = await asyncio.open_connection(host, port)
        await P.write_frame(w2, P.MSG_SCHEDULING, 0, body)
        assert await r2.read() == b""
        w1.close()
        w2.close()
        await asyncio.sleep(0.05)
        await srv.stop()
        return srv

    srv = asyncio.run(go())
    assert any("already connected" in e for e in srv.errors)


def test_manual_scheme_push_reaches_device():
    cfg, lut = loopback()
    cfg = cfg.with_network(NetworkState(100.0, 0.5))

    async def push(srv):
        while len(srv.rows) < 5:
            await asyncio.sleep(0.01)
        await srv.apply_scheme(Scheme.uniform(["d0"], Strategy.pp(0)))

    srv, (stats,) = asyncio.run(run_loopback(cfg, lut, ["d0"], 60, during=push))
    assert stats.conserved
    assert stats.updates[-1][1] == "pp:0"
    assert any(r.strategy == "pp:0" for r in stats.records)
    check_atomic(srv, [stats])
