"""Asyncio edge server: registration, batch queue, worker pool, rescheduling.

Compute is emulated: a batch for layers ``[i, j)`` occupies a worker for
``lut(server_kind, model, [i, j), batch) * time_scale`` wall milliseconds.
Config times are virtual milliseconds; ``time_scale`` maps them to wall time.
"""
from __future__ import annotations

import asyncio
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..batching import Batch, BatchQueue
from ..core import Scheme, SystemConfig
from ..profiles import SubtaskLatencyLUT, lookup_latency
from ..scheduler import (EvaluatorFactory, SchedulerConfig, SystemState, oracle_factory, optimize,
                         should_reschedule)
from . import protocol as P

log = logging.getLogger(__name__)


@dataclass
class ServerOptions:
    host: str = "127.0.0.1"
    port: int = 0
    time_scale: float = 1.0
    max_sessions: int | None = None  # stop after this many sessions have ended
    csv_path: str | Path | None = None
    monitor_interval_s: float = 0.05
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    evaluator_factory: EvaluatorFactory | None = None
    seed: int = 0


@dataclass
class _Session:
    device_id: str
    kind: str
    model_id: str
    writer: asyncio.StreamWriter
    sent_strategy: str | None = None
    tasks: int = 0


@dataclass
class _Item:
    session: _Session
    block: P.TaskBlock
    recv_ms: float


class EdgeServer:
    def __init__(self, config: SystemConfig, lut: SubtaskLatencyLUT, options: ServerOptions | None = None):
        self.config = config
        self.lut = lut
        self.opt = options or ServerOptions()
        if self.opt.time_scale <= 0:
            raise ValueError("time_scale must be positive")
        self.factory = self.opt.evaluator_factory or oracle_factory(max_tasks=60, seed=self.opt.seed)
        self.server_kind = config.server.kind
        bp = config.batch_policy
        self.queue = BatchQueue(bp.max_batch, bp.window_ms)
        self.sessions: dict[str, _Session] = {}
        self.scheme: Scheme | None = None
        self.version = 0
        self.ended = 0
        self.flushes: list[tuple[float, int, str]] = []   # (virtual ms, size, reason)
        self.reschedules: list[tuple[float, str, str]] = []  # (virtual ms, reason, scheme)
        self.rows: list[dict] = []
        self.errors: list[str] = []
        self.rng = np.random.default_rng(self.opt.seed)
        self._result_data: dict[str, bytes] = {}
        self._t0 = 0.0
        self._clock0: float | None = None
        self._server: asyncio.base_events.Server | None = None
        self._done = None
        self._ready: asyncio.Queue | None = None
        self._wake = None
        self._resched = None
        self._reasons: list[str] = []
        self._busy = 0
        self._worker_free = None
        self._tasks: list[asyncio.Task] = []

    # ------------------------------------------------------------------ clock
    def now(self) -> float:
        """Virtual milliseconds since start."""
        return (asyncio.get_running_loop().time() - self._t0) * 1000.0 / self.opt.time_scale

    def scenario_ms(self) -> float:
        """Virtual time on the network trace's clock, which starts at the first registration."""
        return 0.0 if self._clock0 is None else self.now() - self._clock0

    async def _sleep_virtual(self, ms: float) -> None:
        await asyncio.sleep(max(ms, 0.0) * self.opt.time_scale / 1000.0)

    # ------------------------------------------------------------------ lifecycle
    async def start(self) -> tuple[str, int]:
        loop = asyncio.get_running_loop()
        self._t0 = loop.time()
        self._done = asyncio.Event()
        self._ready = asyncio.Queue()
        self._wake = asyncio.Event()
        self._resched = asyncio.Event()
        self._worker_free = asyncio.Event()
        self._worker_free.set()
        self._server = await asyncio.start_server(self._handle, self.opt.host, self.opt.port)
        host, port = self._server.sockets[0].getsockname()[:2]
        self._tasks = [asyncio.create_task(self._flusher()), asyncio.create_task(self._scheduler_loop()),
                       asyncio.create_task(self._monitor())]
        self._tasks += [asyncio.create_task(self._worker(k)) for k in range(self.config.worker_count)]
        log.info("listening on %s:%d", host, port)
        return host, port

    async def wait_done(self) -> None:
        await self._done.wait()

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        for s in list(self.sessions.values()):
            s.writer.close()
        self.write_csv()

    async def serve(self, ready: Callable[[str, int], None] | None = None) -> None:
        host, port = await self.start()
        if ready:
            ready(host, port)
        try:
            await self.wait_done()
        finally:
            await self.stop()

    def write_csv(self) -> None:
        if not self.opt.csv_path:
            return
        cols = ["task_id", "device", "scheme", "recv_ms", "flush_ms", "done_ms", "batch", "layers"]
        with open(self.opt.csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(self.rows)

    # ------------------------------------------------------------------ connections
    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        session = None
        try:
            header, payload = await P.read_frame(reader)
            session = self._register(header, payload, writer)
            await P.write_frame(writer, P.MSG_SCHEDULING, 0,
                                P.encode_scheduling(P.SUB_REGISTER_ACK, {"device_id": session.device_id}))
            self.request_reschedule("register")
            while True:
                header, payload = await P.read_frame(reader)
                if header.msg_type != P.MSG_TASK:
                    raise P.ProtocolError(f"unexpected message type {header.msg_type} from device")
                block = P.TaskBlock.from_bytes(payload)
                if block.task_id != header.task_id:
                    raise P.ProtocolError("task id in header and block differ")
                self._enqueue(session, block)
        except EOFError:
            pass
        except (P.ProtocolError, ConnectionError, ValueError, KeyError) as exc:
            self.errors.append(f"{session.device_id if session else '?'}: {exc}")
            log.warning("closing connection: %s", exc)
        finally:
            writer.close()
            if session is not None and self.sessions.get(session.device_id) is session:
                del self.sessions[session.device_id]
                self.request_reschedule("leave")
            self.ended += 1
            if self.opt.max_sessions is not None and self.ended >= self.opt.max_sessions:
                self._done.set()

    def _register(self, header: P.MessageHeader, payload: bytes, writer) -> _Session:
        if header.msg_type != P.MSG_SCHEDULING or header.task_id != 0:
            raise P.ProtocolError("first frame must be a registration with task id 0")
        subtype, body = P.decode_scheduling(payload)
        if subtype != P.SUB_REGISTER or not isinstance(body, dict):
            raise P.ProtocolError("first frame must be a registration")
        dev_id = str(body["device_id"])
        dev = self.config.device(dev_id)
        if dev.role != "client":
            raise P.ProtocolError(f"{dev_id!r} is not a client in the server config")
        model = self.config.model_for(dev_id)
        if body.get("model", model.model_id) != model.model_id:
            raise P.ProtocolError(f"{dev_id!r} registered model {body.get('model')!r}, expected {model.model_id!r}")
        if dev_id in self.sessions:
            raise P.ProtocolError(f"{dev_id!r} is already connected")
        if self._clock0 is None:
            self._clock0 = self.now()
        session = _Session(dev_id, dev.kind, model.model_id, writer)
        self.sessions[dev_id] = session
        return session

    # ------------------------------------------------------------------ queue and workers
    def _enqueue(self, session: _Session, block: P.TaskBlock) -> None:
        i, j = block.layers
        key = (block.model_id, int(i), int(j))
        session.tasks += 1
        for batch in self.queue.push(key, _Item(session, block, self.now()), self.now()):
            self._dispatch(batch)
        self._wake.set()

    def _dispatch(self, batch: Batch) -> None:
        self.flushes.append((batch.flushed_at, len(batch), batch.reason))
        self._ready.put_nowait(batch)

    async def _flusher(self) -> None:
        while True:
            deadline = self.queue.next_deadline()
            self._wake.clear()
            if deadline is None:
                await self._wake.wait()
                continue
            delay = deadline - self.now()
            if delay > 0:
                try:
                    await asyncio.wait_for(self._wake.wait(), delay * self.opt.time_scale / 1000.0)
                    continue
                except asyncio.TimeoutError:
                    pass
            for batch in self.queue.due(max(self.now(), deadline)):
                self._dispatch(batch)

    async def _worker(self, k: int) -> None:
        while True:
            batch = await self._ready.get()
            self._busy += 1
            if self._busy >= self.config.worker_count:
                self._worker_free.clear()
            try:
                model_id, i, j = batch.key
                await self._sleep_virtual(lookup_latency(self.lut, self.server_kind, model_id, (i, j), len(batch)))
                done = self.now()
                for item in batch.items:
                    await self._send_result(item, batch, done)
            finally:
                self._busy -= 1
                self._worker_free.set()

    def _result_bytes(self, model_id: str) -> bytes:
        if model_id not in self._result_data:
            models = {m.model_id: m for m in self.config.models.values()}
            vol = models[model_id].result_volume if model_id in models else 64
            self._result_data[model_id] = P.synthetic_task_data(vol, self.rng)
        return self._result_data[model_id]

    async def _send_result(self, item: _Item, batch: Batch, done: float) -> None:
        b = item.block
        self.rows.append({"task_id": b.task_id, "device": item.session.device_id, "scheme": b.scheme,
                          "recv_ms": round(item.recv_ms, 3), "flush_ms": round(batch.flushed_at, 3),
                          "done_ms": round(done, 3), "batch": len(batch), "layers": f"{b.layers[0]}-{b.layers[1]}"})
        if self.sessions.get(item.session.device_id) is not item.session:
            return  # device left; nothing to route back to
        res = P.TaskBlock(b.task_id, self.server_kind, "server", "result", self._result_bytes(b.model_id),
                          b.arrival_ms, b.model_id, b.scheme, (0, 0), {"batch": len(batch)})
        try:
            await P.write_frame(item.session.writer, P.MSG_RESULT, b.task_id, res.to_bytes())
        except ConnectionError as exc:
            self.errors.append(f"{item.session.device_id}: result for {b.task_id} lost: {exc}")

    # ------------------------------------------------------------------ scheduling
    def request_reschedule(self, reason: str) -> None:
        """Ask the scheduler loop to re-optimize once a worker is free."""
        self._reasons.append(reason)
        self._resched.set()

    def active_config(self, t_ms: float) -> SystemConfig:
        """The configured system restricted to connected clients, at the network state of ``t_ms``."""
        keep = [d for d in self.config.devices if d.role == "server" or d.device_id in self.sessions]
        return self.config.with_devices(keep).with_network(self.config.network.at(t_ms))

    async def _monitor(self) -> None:
        last = None
        while True:
            await asyncio.sleep(self.opt.monitor_interval_s)
            if not self.sessions:
                continue
            state = SystemState(self.config.network.bandwidth_at(self.scenario_ms()))
            if last is not None and should_reschedule(last, state, self.opt.scheduler.thresholds):
                self.request_reschedule("bandwidth")
            last = state

    async def _scheduler_loop(self) -> None:
        loop = asyncio.get_running_loop()
        while True:
            await self._resched.wait()
            self._resched.clear()
            reason = ",".join(self._reasons)
            self._reasons.clear()
            if not self.sessions:
                continue
            await self._worker_free.wait()
            t = self.scenario_ms()
            cfg = self.active_config(t)
            ev = self.factory(cfg, self.lut)
            # the optimizer runs off the event loop so batch flushes keep their timing
            scheme = await loop.run_in_executor(None, optimize, cfg, self.lut, self.opt.scheduler, ev)
            await self.apply_scheme(scheme, reason, t)

    async def apply_scheme(self, scheme: Scheme, reason: str = "manual", t_ms: float | None = None) -> None:
        """Record ``scheme`` and notify every connected device whose strategy changed."""
        self.scheme = scheme
        self.version += 1
        self.reschedules.append((self.scenario_ms() if t_ms is None else t_ms, reason, str(scheme)))
        for dev_id, strategy in scheme:
            s = self.sessions.get(dev_id)
            if s is None or s.sent_strategy == str(strategy):
                continue
            s.sent_strategy = str(strategy)
            body = {"device_id": dev_id, "strategy": str(strategy), "version": self.version}
            try:
                await P.write_frame(s.writer, P.MSG_SCHEDULING, 0, P.encode_scheduling(P.SUB_SCHEME_UPDATE, body))
            except ConnectionError as exc:
                self.errors.append(f"{dev_id}: scheme update lost: {exc}")


def run_server(config: SystemConfig, lut: SubtaskLatencyLUT, options: ServerOptions | None = None,
               ready: Callable[[str, int], None] | None = None) -> EdgeServer:
    """Serve until ``options.max_sessions`` sessions have ended (forever if None)."""
    server = EdgeServer(config, lut, options)
    asyncio.run(server.serve(ready))
    return server
