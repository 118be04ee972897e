"""Asyncio device client: register, wait for a strategy, stream tasks.

The local stage of a task is a timed wait from the LUT. Each task records
the strategy it was issued under and keeps it to completion, so a scheme
update only affects tasks issued after it arrives.
"""
from __future__ import annotations

import asyncio
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import Strategy, SystemConfig
from ..profiles import SubtaskLatencyLUT, lookup_latency
from . import protocol as P

log = logging.getLogger(__name__)


class SessionError(RuntimeError):
    pass


@dataclass
class DeviceOptions:
    host: str = "127.0.0.1"
    port: int = 0
    device_id: str = ""
    tasks: int = 100
    window: int = 32
    retries: int = 3
    retry_delay_s: float = 0.2
    time_scale: float = 1.0
    csv_path: str | Path | None = None
    seed: int = 0
    timeout_s: float = 60.0


@dataclass
class TaskLog:
    task_id: int
    strategy: str
    version: int
    where: str
    issue_ms: float
    done_ms: float | None = None


@dataclass
class SessionStats:
    device_id: str
    records: list[TaskLog] = field(default_factory=list)
    results: dict[int, int] = field(default_factory=dict)  # task id -> result count
    errors: list[str] = field(default_factory=list)
    updates: list[tuple[int, str]] = field(default_factory=list)

    @property
    def sent(self) -> int:
        return len(self.records)

    @property
    def completed(self) -> int:
        return sum(r.done_ms is not None for r in self.records)

    @property
    def conserved(self) -> bool:
        """Every issued task completed exactly once and nothing unexpected arrived."""
        ids = [r.task_id for r in self.records]
        return (not self.errors and len(set(ids)) == len(ids)
                and all(r.done_ms is not None for r in self.records)
                and all(self.results.get(r.task_id, 1) == 1 for r in self.records)
                and set(self.results) <= set(ids))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task_id", "device", "strategy", "version", "where", "issue_ms", "done_ms"])
            for r in self.records:
                w.writerow([r.task_id, self.device_id, r.strategy, r.version, r.where,
                            round(r.issue_ms, 3), "" if r.done_ms is None else round(r.done_ms, 3)])


class DeviceClient:
    def __init__(self, config: SystemConfig, lut: SubtaskLatencyLUT, options: DeviceOptions):
        self.config = config
        self.lut = lut
        self.opt = options
        dev = config.device(options.device_id)
        if dev.role != "client":
            raise ValueError(f"{options.device_id!r} is not a client device")
        self.kind = dev.kind
        self.model = config.model_for(options.device_id)
        self.stats = SessionStats(options.device_id)
        self.rng = np.random.default_rng(options.seed)
        self._payloads: dict[float, bytes] = {}
        self._strategy: Strategy | None = None
        self._version = 0
        self._pending: dict[int, TaskLog] = {}
        self._t0 = 0.0

    def now(self) -> float:
        return (asyncio.get_running_loop().time() - self._t0) * 1000.0 / self.opt.time_scale

    async def _sleep_virtual(self, ms: float) -> None:
        await asyncio.sleep(max(ms, 0.0) * self.opt.time_scale / 1000.0)

    def _payload(self, volume: float) -> bytes:
        if volume not in self._payloads:
            self._payloads[volume] = P.synthetic_task_data(volume, self.rng)
        return self._payloads[volume]

    def _local_ms(self, i: int, j: int) -> float:
        return lookup_latency(self.lut, self.kind, self.model.model_id, (i, j), 1)

    async def _connect(self):
        last = None
        for attempt in range(self.opt.retries + 1):
            try:
                return await asyncio.open_connection(self.opt.host, self.opt.port)
            except OSError as exc:
                last = exc
                log.info("connect attempt %d failed: %s", attempt + 1, exc)
                if attempt < self.opt.retries:
                    await asyncio.sleep(self.opt.retry_delay_s)
        raise SessionError(f"server unreachable after {self.opt.retries} retries: {last}")

    async def run(self) -> SessionStats:
        if self.opt.tasks <= 0:
            return self.stats
        self._t0 = asyncio.get_running_loop().time()
        reader, writer = await self._connect()
        try:
            await asyncio.wait_for(self._session(reader, writer), self.opt.timeout_s)
        except asyncio.TimeoutError:
            self.stats.errors.append("session timed out")
        except (P.ProtocolError, SessionError, ConnectionError, EOFError) as exc:
            self.stats.errors.append(str(exc) or type(exc).__name__)
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except ConnectionError:
                pass
        if self.opt.csv_path:
            self.stats.write_csv(self.opt.csv_path)
        return self.stats

    async def _session(self, reader, writer) -> None:
        body = {"device_id": self.opt.device_id, "kind": self.kind, "model": self.model.model_id}
        await P.write_frame(writer, P.MSG_SCHEDULING, 0, P.encode_scheduling(P.SUB_REGISTER, body))
        header, payload = await P.read_frame(reader)
        if header.msg_type != P.MSG_SCHEDULING or P.decode_scheduling(payload)[0] != P.SUB_REGISTER_ACK:
            raise P.ProtocolError("expected a registration ack")
        got_scheme = asyncio.Event()
        all_done = asyncio.Event()
        window = asyncio.Semaphore(self.opt.window)
        reader_task = asyncio.create_task(self._reader(reader, got_scheme, all_done, window))
        try:
            waiter = asyncio.create_task(got_scheme.wait())
            await asyncio.wait({waiter, reader_task}, return_when=asyncio.FIRST_COMPLETED)
            if reader_task.done():
                waiter.cancel()
                reader_task.result()
                raise SessionError("connection closed before a scheme arrived")
            await self._produce(writer, window, all_done)
            done_waiter = asyncio.create_task(all_done.wait())
            await asyncio.wait({done_waiter, reader_task}, return_when=asyncio.FIRST_COMPLETED)
            if not all_done.is_set():
                done_waiter.cancel()
                reader_task.result()
                raise SessionError("connection closed with tasks outstanding")
        finally:
            reader_task.cancel()
            await asyncio.gather(reader_task, return_exceptions=True)

    async def _reader(self, reader, got_scheme, all_done, window) -> None:
        while True:
            header, payload = await P.read_frame(reader)
            if header.msg_type == P.MSG_SCHEDULING:
                subtype, body = P.decode_scheduling(payload)
                if subtype == P.SUB_SCHEME_UPDATE:
                    self._strategy = Strategy.parse(body["strategy"])
                    self._version = int(body.get("version", self._version + 1))
                    self.stats.updates.append((self._version, body["strategy"]))
                    got_scheme.set()
                continue
            if header.msg_type != P.MSG_RESULT:
                raise P.ProtocolError(f"unexpected message type {header.msg_type} from server")
            tid = header.task_id
            self.stats.results[tid] = self.stats.results.get(tid, 0) + 1
            rec = self._pending.pop(tid, None)
            if rec is None:
                raise P.ProtocolError(f"result for unknown or finished task {tid}")
            self._finish(rec, window, all_done)

    def _finish(self, rec: TaskLog, window: asyncio.Semaphore, all_done: asyncio.Event) -> None:
        rec.done_ms = self.now()
        window.release()
        if self.stats.completed == self.opt.tasks:
            all_done.set()

    async def _produce(self, writer, window: asyncio.Semaphore, all_done: asyncio.Event) -> None:
        n = self.model.n_layers
        vols = self.model.boundary_volumes
        cpu = asyncio.Lock()
        local_jobs = []
        for tid in range(1, self.opt.tasks + 1):
            await window.acquire()
            strategy, version = self._strategy, self._version  # fixed for the task's lifetime
            rec = TaskLog(tid, str(strategy), version, "server", self.now())
            self.stats.records.append(rec)
            if strategy.is_dp:
                if not cpu.locked():
                    rec.where = "device"
                    local_jobs.append(asyncio.create_task(self._run_local(rec, cpu, window, all_done)))
                    await asyncio.sleep(0)
                    continue
                start, volume = 0, vols[0]
            else:
                s = strategy.split
                if s > 0:
                    async with cpu:
                        await self._sleep_virtual(self._local_ms(0, s))
                if s == n:
                    rec.where = "device"
                    self._finish(rec, window, all_done)
                    continue
                start, volume = s, vols[s]
            block = P.TaskBlock(tid, self.kind, self.opt.device_id, self.model.task or "inference",
                                self._payload(volume), rec.issue_ms, self.model.model_id, str(strategy), (start, n))
            self._pending[tid] = rec
            await P.write_frame(writer, P.MSG_TASK, tid, block.to_bytes())
        await asyncio.gather(*local_jobs)

    async def _run_local(self, rec: TaskLog, cpu: asyncio.Lock, window, all_done) -> None:
        async with cpu:
            await self._sleep_virtual(self._local_ms(0, self.model.n_layers))
        self._finish(rec, window, all_done)


def run_device(config: SystemConfig, lut: SubtaskLatencyLUT, options: DeviceOptions) -> SessionStats:
    """Run one device session; connection failure raises :class:`SessionError`."""
    return asyncio.run(DeviceClient(config, lut, options).run())
