"""Design-space ranking and hierarchical scheme optimization.

Schemes are compared through a pluggable evaluator: the simulator oracle or
the learned relative predictor. Both expose the same pairwise ``compare``.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import Scheme, Strategy, SystemConfig
from .profiles import SubtaskLatencyLUT, candidate_strategies
from .simulator import SimConfig, SimResult, Workload, simulate, training_horizon
from .sysgraph import build_system_graph, raw_node_latencies


# --------------------------------------------------------------------------- evaluators

class Evaluator:
    """Pairwise scheme comparison. ``compare(a, b)`` is the probability that
    ``a`` outperforms ``b``; exactly 0.5 means a tie."""

    def __init__(self):
        self.calls = 0

    def compare(self, a: Scheme, b: Scheme) -> float:
        raise NotImplementedError

    def prepare(self, schemes: Sequence[Scheme]) -> None:
        """Optional hint that ``schemes`` are about to be compared."""


class ScoreEvaluator(Evaluator):
    """Compares cached per-scheme scores; higher is better."""

    def __init__(self, score_fn: Callable[[Scheme], float] | None = None):
        super().__init__()
        self._score_fn = score_fn
        self._cache: dict[Scheme, float] = {}

    def _score(self, scheme: Scheme) -> float:
        if self._score_fn is None:
            raise NotImplementedError
        return float(self._score_fn(scheme))

    def score(self, scheme: Scheme) -> float:
        if scheme not in self._cache:
            self._cache[scheme] = self._score(scheme)
        return self._cache[scheme]

    def compare(self, a: Scheme, b: Scheme) -> float:
        self.calls += 1
        sa, sb = self.score(a), self.score(b)
        if sa == sb:
            return 0.5
        return 1.0 if sa > sb else 0.0


class TableEvaluator(ScoreEvaluator):
    """Scores from a fixed mapping (scheme or its string form -> value)."""

    def __init__(self, values: Mapping):
        super().__init__()
        self.values = dict(values)

    def _score(self, scheme: Scheme) -> float:
        if scheme in self.values:
            return float(self.values[scheme])
        return float(self.values[str(scheme)])


class OracleEvaluator(ScoreEvaluator):
    """Simulated throughput as the score."""

    def __init__(self, sim_config: SimConfig):
        super().__init__()
        self.sim_config = sim_config

    @classmethod
    def for_config(cls, config: SystemConfig, lut: SubtaskLatencyLUT,
                   max_tasks: int | None = None, seed: int = 0) -> "OracleEvaluator":
        horizon = max_tasks if max_tasks is not None else training_horizon(config)
        return cls(SimConfig(config, lut, Workload(), max_tasks=horizon, seed=seed))

    def _score(self, scheme: Scheme) -> float:
        return simulate(self.sim_config, scheme).throughput


class PredictorEvaluator(ScoreEvaluator):
    """Learned relative predictor. ``sigmoid(s_a - s_b)`` exceeds 0.5 exactly
    when ``s_a > s_b``, so comparing cached scores reproduces its decisions."""

    def __init__(self, model, config: SystemConfig, lut: SubtaskLatencyLUT):
        super().__init__()
        from .predictor import aggregation_matrix
        self.model = model
        self.config = config
        self.lut = lut
        self.graph = build_system_graph(config)
        self._M = aggregation_matrix(self.graph)

    def _features(self, scheme: Scheme) -> np.ndarray:
        return self.model.features(self.graph, raw_node_latencies(self.graph, scheme, self.config, self.lut))

    def prepare(self, schemes: Sequence[Scheme]) -> None:
        todo = [s for s in dict.fromkeys(schemes) if s not in self._cache]
        if not todo:
            return
        X = np.stack([self._features(s) for s in todo])
        for s, v in zip(todo, self.model.scores_batch(self._M, X)):
            self._cache[s] = float(v)

    def _score(self, scheme: Scheme) -> float:
        return float(self.model.scores_batch(self._M, self._features(scheme)[None])[0])


EvaluatorFactory = Callable[[SystemConfig, SubtaskLatencyLUT], Evaluator]


def oracle_factory(max_tasks: int | None = None, seed: int = 0) -> EvaluatorFactory:
    return lambda config, lut: OracleEvaluator.for_config(config, lut, max_tasks, seed)


def predictor_factory(model) -> EvaluatorFactory:
    return lambda config, lut: PredictorEvaluator(model, config, lut)


# --------------------------------------------------------------------------- configuration

@dataclass(frozen=True)
class Thresholds:
    bandwidth_change: float = 0.2

    def __post_init__(self):
        if not 0 < self.bandwidth_change <= 1:
            raise ValueError("bandwidth threshold must lie in (0, 1]")


@dataclass(frozen=True)
class SchedulerConfig:
    """``iteration_limit`` is T; ``candidates`` maps (config, lut, device_id) to
    the coarse options C, defaulting to {DP, PP_comp, PP_comm}."""

    iteration_limit: int = 10
    thresholds: Thresholds = field(default_factory=Thresholds)
    share_similar: bool = False
    candidates: Callable[[SystemConfig, SubtaskLatencyLUT, str], list[Strategy]] | None = None

    def __post_init__(self):
        if self.iteration_limit < 0:
            raise ValueError("iteration limit must be >= 0")

    def options(self, config: SystemConfig, lut: SubtaskLatencyLUT, device_id: str) -> list[Strategy]:
        if self.candidates is not None:
            return list(self.candidates(config, lut, device_id))
        model = config.model_for(device_id)
        return candidate_strategies(model, config.device(device_id).kind, config.server.kind, lut)


# --------------------------------------------------------------------------- ranking

def enumerate_design_space(devices: Sequence[str],
                           candidates: Sequence[Sequence[Strategy]] | Mapping[str, Sequence[Strategy]]
                           ) -> list[Scheme]:
    """Cartesian product of per-device options, first device varying slowest."""
    if not devices:
        raise ValueError("no devices to schedule")
    if isinstance(candidates, Mapping):
        candidates = [candidates[d] for d in devices]
    if len(candidates) != len(devices):
        raise ValueError("one candidate list per device is required")
    for dev, opts in zip(devices, candidates):
        if not opts:
            raise ValueError(f"no candidate strategies for {dev!r}")
    return [Scheme(tuple(zip(devices, combo))) for combo in itertools.product(*candidates)]


def rank_best(schemes: Iterable[Scheme], evaluator: Evaluator) -> Scheme:
    """Left fold keeping the incumbent unless a challenger is strictly preferred."""
    schemes = list(schemes)
    if not schemes:
        raise ValueError("rank_best needs at least one scheme")
    evaluator.prepare(schemes)
    best = schemes[0]
    for challenger in schemes[1:]:
        if evaluator.compare(challenger, best) > 0.5:
            best = challenger
    return best


def coarse_space(config: SystemConfig, lut: SubtaskLatencyLUT,
                 scheduler_config: SchedulerConfig | None = None) -> list[Scheme]:
    sc = scheduler_config or SchedulerConfig()
    ids = config.client_ids
    return enumerate_design_space(ids, [sc.options(config, lut, d) for d in ids])


def _shifted(scheme: Scheme, devices: Sequence[str], split: int) -> Scheme:
    for d in devices:
        scheme = scheme.with_strategy(d, Strategy.pp(split))
    return scheme


def optimize(config: SystemConfig, lut: SubtaskLatencyLUT,
             scheduler_config: SchedulerConfig | None = None,
             evaluator: Evaluator | None = None) -> Scheme:
    """Two-stage search: rank the coarse space, then try one-layer shifts of
    each PP device's split for at most T device visits."""
    sc = scheduler_config or SchedulerConfig()
    if evaluator is None:
        evaluator = OracleEvaluator.for_config(config, lut)
    best = rank_best(coarse_space(config, lut, sc), evaluator)

    done: set[str] = set()
    visits = 0
    for dev in config.client_ids:
        if visits >= sc.iteration_limit:
            break
        if dev in done:
            continue
        visits += 1
        strat = best[dev]
        if strat.is_dp:
            continue
        group = [dev]
        if sc.share_similar:
            key = (config.device(dev).kind, config.model_for(dev).model_id)
            group = [d for d in config.client_ids
                     if (config.device(d).kind, config.model_for(d).model_id) == key and best[d] == strat]
        done.update(group)
        n = config.model_for(dev).n_layers
        variants = [best]
        for s in (max(strat.split - 1, 0), min(strat.split + 1, n)):
            cand = _shifted(best, group, s)
            if cand not in variants:
                variants.append(cand)
        best = rank_best(variants, evaluator)
    return best


# --------------------------------------------------------------------------- planning

@dataclass(frozen=True)
class PlanResult:
    scheme: Scheme
    predicted: float
    met: bool
    evaluated: int


def plan(config: SystemConfig, lut: SubtaskLatencyLUT, required_throughput: float,
         iteration_limit: int | None, throughput_predictor: Callable[[Scheme], float],
         scheduler_config: SchedulerConfig | None = None) -> PlanResult:
    """Walk the coarse space in order; return the first scheme predicted to meet
    the requirement, else the best one seen within ``iteration_limit``."""
    space = coarse_space(config, lut, scheduler_config)
    if iteration_limit is not None:
        space = space[:max(iteration_limit, 1)]
    best, best_val = None, -np.inf
    for count, scheme in enumerate(space, 1):
        val = float(throughput_predictor(scheme))
        if val >= required_throughput:
            return PlanResult(scheme, val, True, count)
        if val > best_val:
            best, best_val = scheme, val
    return PlanResult(best, best_val, False, len(space))


def model_throughput_fn(model, config: SystemConfig, lut: SubtaskLatencyLUT) -> Callable[[Scheme], float]:
    """Adapter from a trained throughput head to ``plan``'s predictor argument."""
    graph = build_system_graph(config)

    def fn(scheme: Scheme) -> float:
        feats = model.features(graph, raw_node_latencies(graph, scheme, config, lut))
        return model.predict_throughput(graph, feats)
    return fn


# --------------------------------------------------------------------------- runtime adaptation

@dataclass(frozen=True)
class SystemState:
    """What the monitor watches: link bandwidth and device membership."""

    bandwidth_mbps: float
    clients: frozenset = frozenset()
    idle: frozenset = frozenset()

    @classmethod
    def of(cls, config: SystemConfig, t_ms: float = 0.0) -> "SystemState":
        return cls(config.network.bandwidth_at(t_ms), frozenset(config.client_ids),
                   frozenset(d.device_id for d in config.idle))


def should_reschedule(old: SystemState, new: SystemState, thresholds: Thresholds | None = None) -> bool:
    th = thresholds or Thresholds()
    if old.clients != new.clients or old.idle != new.idle:
        return True
    change = abs(new.bandwidth_mbps - old.bandwidth_mbps) / old.bandwidth_mbps
    return change >= th.bandwidth_change


def assign_idle(scheme: Scheme, config: SystemConfig, lut: SubtaskLatencyLUT,
                evaluator: Evaluator) -> Scheme:
    """Add idle devices as extra DP replicas when the evaluator rates the
    extended scheme at least as good as the current one."""
    dp_models = {config.model_for(d) for d, s in scheme if s.is_dp}
    if not dp_models:
        return scheme
    current = scheme
    for helper in config.idle:
        if helper.device_id in current.helpers:
            continue
        missing = sorted(m.model_id for m in dp_models if not lut.has(helper.kind, m.model_id, 0, m.n_layers))
        if missing:
            warnings.warn(f"idle device {helper.device_id!r} has no LUT entry for {missing}; skipped")
            continue
        extended = current.with_helpers([*current.helpers, helper.device_id])
        if evaluator.compare(extended, current) >= 0.5:
            current = extended
    return current


@dataclass
class AdaptiveRun:
    result: SimResult
    timeline: list[tuple[float, Scheme]]
    triggers: list[float]


def run_adaptive(sim_config: SimConfig, scheduler_config: SchedulerConfig | None = None,
                 evaluator_factory: EvaluatorFactory | None = None,
                 reaction_ms: float = 0.0) -> AdaptiveRun:
    """Optimize at start, re-optimize at bandwidth breakpoints that pass the
    reschedule threshold, then simulate the resulting scheme timeline.

    Decisions see a constant-bandwidth snapshot of the network; a new scheme
    takes effect ``reaction_ms`` after its trigger.
    """
    sc = scheduler_config or SchedulerConfig()
    factory = evaluator_factory or oracle_factory()
    system, lut = sim_config.system, sim_config.lut

    def decide(t_ms: float) -> Scheme:
        snap = system.with_network(system.network.at(t_ms))
        ev = factory(snap, lut)
        return assign_idle(optimize(snap, lut, sc, ev), snap, lut, ev)

    state = SystemState.of(system, 0.0)
    timeline = [(0.0, decide(0.0))]
    triggers = []
    for bp in system.network.breakpoints_ms():
        new_state = SystemState.of(system, bp)
        if not should_reschedule(state, new_state, sc.thresholds):
            continue
        state = new_state
        triggers.append(bp)
        scheme = decide(bp)
        if scheme != timeline[-1][1]:
            timeline.append((bp + reaction_ms, scheme))
    return AdaptiveRun(simulate(sim_config, timeline), timeline, triggers)

