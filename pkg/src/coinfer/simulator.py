"""Deterministic discrete-event simulator of the device-edge system.

Used as the ground-truth oracle for the predictors and the scheduler.

Timing model, per client device:
  * a serial compute resource, a serial uplink and a serial downlink;
  * PP(s): device stage [0, s) -> uplink of boundary s -> server batch queue
    for [s, n) -> downlink of the result. PP(n) uploads only the result;
  * DP: each input goes whole to whichever node (device replica, server or
    idle helper) has the earliest projected completion.
The server holds a batch queue (cap + window, grouped by model and layer
range) drained by ``worker_count`` workers. Links integrate piecewise
bandwidth traces. Closed-loop devices keep at most ``depth`` tasks in flight
and, under PP, start a new input only when their own compute is free.
"""
from __future__ import annotations

import csv
import hashlib
import heapq
import io
import itertools
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Literal, Sequence

import numpy as np

from .batching import Batch, BatchQueue
from .core import (ConfigError, Scheme, Strategy, SystemConfig, validate_config,
                   validate_scheme)
from .profiles import (SubtaskLatencyLUT, all_strategies, lookup_latency,
                       synthetic_system)
from .samples import Sample
from .sysgraph import build_system_graph, raw_node_latencies


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Workload:
    mode: Literal["closed", "open"] = "closed"
    depth: int = 4          # closed loop: max in-flight tasks per device
    rate_hz: float = 10.0   # open loop: per-device arrival rate
    poisson: bool = False   # open loop: exponential inter-arrivals drawn from the seed


@dataclass(frozen=True)
class SimConfig:
    system: SystemConfig
    lut: SubtaskLatencyLUT
    workload: Workload = Workload()
    max_tasks: int | None = 200
    duration_ms: float | None = None
    seed: int = 0
    record_events: bool = False

    def __post_init__(self):
        if self.max_tasks is None and self.duration_ms is None:
            raise ValueError("a task-count or duration horizon is required")
        if (self.max_tasks is not None and self.max_tasks <= 0) or \
                (self.duration_ms is not None and self.duration_ms <= 0):
            raise ValueError("horizon must be positive")

    def with_system(self, system: SystemConfig) -> "SimConfig":
        return replace(self, system=system)


@dataclass
class TaskRecord:
    task_id: int
    device: str
    version: int
    strategy: str
    issue_ms: float
    complete_ms: float | None = None
    where: str = ""

    @property
    def latency_ms(self) -> float:
        return self.complete_ms - self.issue_ms


@dataclass
class SimResult:
    throughput: float
    completed: int
    issued: int
    in_flight: int
    elapsed_ms: float
    tasks: list[TaskRecord]
    latency: dict[str, dict[str, float]]
    utilization: dict[str, float]
    events: list[tuple] = field(default_factory=list)
    scheme_log: list[dict] = field(default_factory=list)

    def completed_tasks(self) -> list[TaskRecord]:
        return [t for t in self.tasks if t.complete_ms is not None]

    def mean_latency(self, issued_from: float = float("-inf"), issued_to: float = float("inf")) -> float:
        lats = [t.latency_ms for t in self.completed_tasks() if issued_from <= t.issue_ms < issued_to]
        return float(np.mean(lats)) if lats else float("nan")

    def summary(self) -> dict:
        return {
            "throughput": self.throughput,
            "completed": self.completed,
            "issued": self.issued,
            "in_flight": self.in_flight,
            "elapsed_ms": self.elapsed_ms,
            "latency": self.latency,
            "utilization": self.utilization,
            "scheme_log": self.scheme_log,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task_id", "device", "issue_ms", "complete_ms", "scheme", "where"])
        for t in self.completed_tasks():
            w.writerow([t.task_id, t.device, f"{t.issue_ms:.6f}", f"{t.complete_ms:.6f}",
                        f"v{t.version}:{t.strategy}", t.where])
        return buf.getvalue()


class _Resource:
    __slots__ = ("name", "free_at", "busy")

    def __init__(self, name: str):
        self.name = name
        self.free_at = 0.0
        self.busy = 0.0

    def reserve(self, t: float, duration: float) -> float:
        start = max(t, self.free_at)
        self.free_at = start + duration
        self.busy += duration
        return self.free_at


@dataclass
class _Task:
    rec: TaskRecord
    route: list
    stage: int = 0


class _Engine:
    def __init__(self, cfg: SimConfig, timeline: Sequence[tuple[float, Scheme]]):
        self.cfg = cfg
        self.sys = cfg.system
        self.lut = cfg.lut
        self.net = self.sys.network
        self.timeline = sorted(timeline, key=lambda p: p[0])
        self.rng = np.random.default_rng(cfg.seed)
        self.server_kind = self.sys.server.kind
        self.workers_free = self.sys.worker_count
        self.worker_spans: list[tuple[float, float]] = []
        self.ready: list[Batch] = []
        self.queue = BatchQueue(self.sys.batch_policy.max_batch, self.sys.batch_policy.window_ms)
        self.server_virtual_free = 0.0
        self.heap: list = []
        self.seq = itertools.count()
        self.task_ids = itertools.count(1)
        self.records: list[TaskRecord] = []
        self.events: list[tuple] = []
        self.completed = 0
        self.stopped = False
        self.elapsed = 0.0
        self.outstanding: dict[str, int] = {}
        self.issue_pending: set[str] = set()
        self.cpu: dict[str, _Resource] = {}
        self.up: dict[str, _Resource] = {}
        self.down: dict[str, _Resource] = {}
        for d in self.sys.devices:
            if d.role == "server":
                continue
            self.cpu[d.device_id] = _Resource(f"{d.device_id}/cpu")
            self.up[d.device_id] = _Resource(f"{d.device_id}/uplink")
            self.down[d.device_id] = _Resource(f"{d.device_id}/downlink")
            self.outstanding[d.device_id] = 0

    # ------------------------------------------------------------------ helpers
    def push(self, t: float, kind: str, payload=None) -> None:
        heapq.heappush(self.heap, (t, next(self.seq), kind, payload))

    def log(self, t: float, kind: str, *detail) -> None:
        if self.cfg.record_events:
            self.events.append((round(t, 9), kind) + detail)

    def scheme_at(self, t: float) -> tuple[int, Scheme]:
        version = 0
        for idx, (start, _) in enumerate(self.timeline):
            if start <= t:
                version = idx
        return version, self.timeline[version][1]

    def transfer(self, res: _Resource, t: float, volume: float) -> float:
        start = max(t, res.free_at)
        dur = self.net.transfer_ms(volume, start)
        return res.reserve(start, dur)

    # ------------------------------------------------------------------ routing
    def build_route(self, dev_id: str, strategy: Strategy, t: float) -> tuple[list, str]:
        model = self.sys.model_for(dev_id)
        kind = self.sys.device(dev_id).kind
        n = model.n_layers
        vols = model.boundary_volumes
        if not strategy.is_dp:
            s = strategy.split
            route = []
            if s > 0:
                route.append(("compute", self.cpu[dev_id], lookup_latency(self.lut, kind, model.model_id, (0, s), 1)))
            if s < n:
                route += [("link", self.up[dev_id], vols[s]),
                          ("server", (model.model_id, s, n)),
                          ("link", self.down[dev_id], vols[n])]
                return route, "server"
            route.append(("link", self.up[dev_id], vols[n]))
            return route, "device"
        return self.dispatch_dp(dev_id, model, kind, t)

    def dispatch_dp(self, dev_id, model, kind, t):
        n = model.n_layers
        vols = model.boundary_volumes
        mid = model.model_id
        local_ms = lookup_latency(self.lut, kind, mid, (0, n), 1)
        options = []
        cpu = self.cpu[dev_id]
        options.append((max(t, cpu.free_at) + local_ms, 0, "device",
                        [("compute", cpu, local_ms)]))
        up_start = max(t, self.up[dev_id].free_at)
        arrive = up_start + self.net.transfer_ms(vols[0], up_start)
        back = self.net.transfer_ms(vols[n], arrive)
        server_ms = lookup_latency(self.lut, self.server_kind, mid, (0, n), 1)
        window = self.queue.window_ms if self.queue.max_batch > 1 else 0.0
        server_start = max(arrive, self.server_virtual_free)
        options.append((server_start + window + server_ms + back, 1, "server",
                        [("link", self.up[dev_id], vols[0]), ("server", (mid, 0, n)),
                         ("link", self.down[dev_id], vols[n])]))
        _, scheme = self.scheme_at(t)
        for rank, h in enumerate(scheme.helpers, start=2):
            hkind = self.sys.device(h).kind
            if not self.lut.has(hkind, mid, 0, n):
                continue
            h_ms = lookup_latency(self.lut, hkind, mid, (0, n), 1)
            at_h = max(arrive, self.down[h].free_at)
            at_h += self.net.transfer_ms(vols[0], at_h)
            done = max(at_h, self.cpu[h].free_at) + h_ms
            done += 2 * self.net.transfer_ms(vols[n], done)
            options.append((done, rank, f"helper:{h}",
                            [("link", self.up[dev_id], vols[0]), ("link", self.down[h], vols[0]),
                             ("compute", self.cpu[h], h_ms), ("link", self.up[h], vols[n]),
                             ("link", self.down[dev_id], vols[n])]))
        _, _, where, route = min(options, key=lambda o: (o[0], o[1]))
        if where == "server":
            self.server_virtual_free = server_start + server_ms / self.sys.worker_count
        return route, where

    # ------------------------------------------------------------------ lifecycle
    def issue_one(self, dev_id: str, t: float) -> None:
        version, scheme = self.scheme_at(t)
        strategy = scheme[dev_id]
        rec = TaskRecord(next(self.task_ids), dev_id, version, str(strategy), t)
        route, where = self.build_route(dev_id, strategy, t)
        rec.where = where
        self.records.append(rec)
        self.outstanding[dev_id] += 1
        self.log(t, "issue", rec.task_id, dev_id, str(strategy), where)
        self.advance(_Task(rec, route), t)

    def try_issue(self, dev_id: str, t: float) -> None:
        depth = self.cfg.workload.depth
        while not self.stopped and self.outstanding[dev_id] < depth:
            _, scheme = self.scheme_at(t)
            strategy = scheme[dev_id]
            cpu = self.cpu[dev_id]
            if not strategy.is_dp and strategy.split > 0 and cpu.free_at > t:
                if dev_id not in self.issue_pending:
                    self.issue_pending.add(dev_id)
                    self.push(cpu.free_at, "issue", dev_id)
                return
            self.issue_one(dev_id, t)

    def advance(self, task: _Task, t: float) -> None:
        if task.stage >= len(task.route):
            self.complete(task, t)
            return
        step = task.route[task.stage]
        task.stage += 1
        if step[0] == "compute":
            end = step[1].reserve(t, step[2])
            self.push(end, "advance", task)
        elif step[0] == "link":
            end = self.transfer(step[1], t, step[2])
            self.push(end, "advance", task)
        else:
            key = step[1]
            if task.rec.where != "server" or task.rec.strategy != "dp":
                ms = lookup_latency(self.lut, self.server_kind, key[0], key[1:], 1)
                self.server_virtual_free = max(t, self.server_virtual_free) + ms / self.sys.worker_count
            self.log(t, "enqueue", task.rec.task_id, key)
            had = self.queue.pending_count(key)
            for batch in self.queue.push(key, task, t):
                self.ready.append(batch)
            if had == 0 and self.queue.pending_count(key) == 1:
                self.push(self.queue.deadline(key), "window", (key, task.rec.task_id))
            self.start_workers(t)

    def start_workers(self, t: float) -> None:
        while self.workers_free and self.ready:
            batch = self.ready.pop(0)
            model_id, i, j = batch.key
            cost = lookup_latency(self.lut, self.server_kind, model_id, (i, j), len(batch))
            self.workers_free -= 1
            self.worker_spans.append((t, t + cost))
            self.log(t, "batch", tuple(x.rec.task_id for x in batch.items), batch.reason, cost)
            self.push(t + cost, "batch_done", batch)

    def complete(self, task: _Task, t: float) -> None:
        rec = task.rec
        rec.complete_ms = t
        self.completed += 1
        self.outstanding[rec.device] -= 1
        self.log(t, "complete", rec.task_id, rec.device)
        horizon = self.cfg.max_tasks
        if horizon is not None and self.completed >= horizon:
            self.stopped = True
            self.elapsed = t
            return
        if self.cfg.workload.mode == "closed":
            self.try_issue(rec.device, t)

    # ------------------------------------------------------------------ main loop
    def run(self) -> None:
        clients = self.sys.client_ids
        wl = self.cfg.workload
        for d in clients:
            if wl.mode == "closed":
                self.push(0.0, "issue", d)
            else:
                self.push(0.0, "arrival", d)
        for start, _ in self.timeline[1:]:
            self.push(start, "reschedule", None)
        duration = self.cfg.duration_ms
        while self.heap and not self.stopped:
            t, _, kind, payload = heapq.heappop(self.heap)
            if duration is not None and t > duration:
                self.elapsed = duration
                break
            self.elapsed = t
            if kind == "issue":
                self.issue_pending.discard(payload)
                self.try_issue(payload, t)
            elif kind == "arrival":
                self.issue_one(payload, t)
                gap = 1000.0 / wl.rate_hz
                if wl.poisson:
                    gap = float(self.rng.exponential(gap))
                self.push(t + gap, "arrival", payload)
            elif kind == "advance":
                self.advance(payload, t)
            elif kind == "window":
                key, first_id = payload
                oldest = self.queue.oldest(key)
                if oldest is not None and oldest.rec.task_id == first_id:
                    self.ready.extend(self.queue.due(t))
                    self.start_workers(t)
            elif kind == "batch_done":
                self.workers_free += 1
                for item in payload.items:
                    self.advance(item, t)
                self.start_workers(t)
            elif kind == "reschedule":
                self.log(t, "reschedule", self.scheme_at(t)[0])
                if wl.mode == "closed":
                    for d in clients:
                        self.try_issue(d, t)
        if duration is not None and not self.stopped and not self.heap:
            self.elapsed = duration


def _stats(lats: list[float]) -> dict[str, float]:
    if not lats:
        return {"count": 0, "mean_ms": float("nan"), "p50_ms": float("nan"), "p95_ms": float("nan")}
    a = np.asarray(lats)
    return {"count": int(a.size), "mean_ms": float(a.mean()),
            "p50_ms": float(np.percentile(a, 50)), "p95_ms": float(np.percentile(a, 95))}


def _check_coverage(cfg: SimConfig, schemes: Iterable[Scheme]) -> None:
    lut, sys_ = cfg.lut, cfg.system
    server_kind = sys_.server.kind
    for scheme in schemes:
        validate_scheme(sys_, scheme)
        for dev_id, strat in scheme:
            model = sys_.model_for(dev_id)
            kind = sys_.device(dev_id).kind
            lookup_latency(lut, kind, model.model_id, strat.device_range(model), 1)
            lookup_latency(lut, server_kind, model.model_id, strat.server_range(model), 1)


def simulate(sim_config: SimConfig, scheme: Scheme | Sequence[tuple[float, Scheme]]) -> SimResult:
    """Run the system under ``scheme`` (or a timeline of ``(start_ms, scheme)``)."""
    validate_config(sim_config.system, sim_config.lut)
    timeline = [(0.0, scheme)] if isinstance(scheme, Scheme) else list(scheme)
    if not timeline or timeline[0][0] > 0:
        raise ConfigError(["scheme timeline must start at t=0"])
    _check_coverage(sim_config, [s for _, s in timeline])
    eng = _Engine(sim_config, timeline)
    eng.run()
    if eng.completed == 0:
        raise SimulationError("horizon exhausted with zero completions")
    elapsed = eng.elapsed
    per_dev = {}
    done = [r for r in eng.records if r.complete_ms is not None]
    for d in sim_config.system.client_ids:
        per_dev[d] = _stats([r.latency_ms for r in done if r.device == d])
    # work still running at the end of the run is not counted
    util = {res.name: (res.busy - max(0.0, res.free_at - elapsed)) / elapsed
            for group in (eng.cpu, eng.up, eng.down) for res in group.values()}
    worker_busy = sum(max(0.0, min(end, elapsed) - start) for start, end in eng.worker_spans)
    util["server/workers"] = worker_busy / (elapsed * sim_config.system.worker_count)
    issued = len(eng.records)
    return SimResult(
        throughput=eng.completed / (elapsed / 1000.0),
        completed=eng.completed,
        issued=issued,
        in_flight=issued - eng.completed,
        elapsed_ms=elapsed,
        tasks=eng.records,
        latency=per_dev,
        utilization=util,
        events=eng.events,
    )


def oracle_throughput(sim_config: SimConfig, scheme: Scheme) -> float:
    return simulate(sim_config, scheme).throughput


def brute_force_best(sim_config: SimConfig, scheme_space: Iterable[Scheme]) -> tuple[Scheme, SimResult]:
    """Simulate every scheme; highest throughput wins, earlier schemes win ties."""
    best = None
    for scheme in scheme_space:
        res = simulate(sim_config, scheme)
        if best is None or res.throughput > best[1].throughput:
            best = (scheme, res)
    if best is None:
        raise ValueError("empty scheme space")
    return best


def full_scheme_space(config: SystemConfig) -> list[Scheme]:
    """Every combination of DP and PP(0..n) across client devices."""
    per_dev = [all_strategies(config.model_for(d)) for d in config.client_ids]
    return [Scheme(tuple(zip(config.client_ids, combo))) for combo in itertools.product(*per_dev)]


# --------------------------------------------------------------------------- training data

def training_horizon(config: SystemConfig) -> int:
    return 40 + 20 * len(config.client_ids)


def measure_sample(config: SystemConfig, lut: SubtaskLatencyLUT, scheme: Scheme, *,
                   group=None, config_seed: int | None = None, seed: int = 0) -> Sample:
    graph = build_system_graph(config)
    cfg = SimConfig(config, lut, max_tasks=training_horizon(config), seed=seed)
    thr = simulate(cfg, scheme).throughput
    raw = raw_node_latencies(graph, scheme, config, lut)
    return Sample(graph, raw, thr, group, str(scheme), config_seed)


def random_schemes(config: SystemConfig, rng: np.random.Generator, k: int) -> list[Scheme]:
    """Up to ``k`` distinct schemes, each device drawing uniformly from DP and PP(0..n)."""
    per_dev = [all_strategies(config.model_for(d)) for d in config.client_ids]
    space = int(np.prod([len(p) for p in per_dev]))
    k = min(k, space)
    seen: dict[Scheme, None] = {}
    while len(seen) < k:
        combo = [p[int(rng.integers(len(p)))] for p in per_dev]
        seen.setdefault(Scheme(tuple(zip(config.client_ids, combo))), None)
    return list(seen)


def generate_training_set(n_samples: int, seed: int, schemes_per_config: int = 8,
                          n_devices: tuple[int, int] = (1, 5),
                          n_layers: tuple[int, int] = (2, 8)) -> list[Sample]:
    """Seeded random systems, several schemes each, measured by simulation."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    samples: list[Sample] = []
    group = 0
    while len(samples) < n_samples:
        config_seed = int(rng.integers(2**31 - 1))
        config, lut = synthetic_system(config_seed, n_devices, n_layers)
        for scheme in random_schemes(config, rng, schemes_per_config):
            if len(samples) >= n_samples:
                break
            samples.append(measure_sample(config, lut, scheme, group=group, config_seed=config_seed))
        group += 1
    return samples


def dataset_hash(samples: Sequence[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(repr((s.group, s.config_seed, s.scheme, float(s.throughput))).encode())
        h.update(np.asarray(s.raw, dtype="<f8").tobytes())
    return h.hexdigest()
