"""System-level graph abstraction and per-scheme node features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, Scheme, SystemConfig
from .profiles import SubtaskLatencyLUT, comm_volume, lookup_latency

CATEGORIES = ("EdgeDevice", "Middleware", "EdgeHandler", "EdgeServer", "Global")
N_CATEGORIES = len(CATEGORIES)
FEATURE_DIM = N_CATEGORIES + 1


@dataclass(frozen=True)
class SystemGraph:
    """Typed nodes plus a directed edge list (src, dst) including self-loops.

    Node order: client devices (config order), their middleware nodes, their
    handler nodes, the server, the global node.
    """

    nodes: tuple[tuple[str, str], ...]
    edges: tuple[tuple[int, int], ...]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def categories(self) -> tuple[str, ...]:
        return tuple(c for _, c in self.nodes)

    def signature(self) -> tuple:
        """Hashable topology key; graphs with equal signatures are interchangeable."""
        return (self.categories, self.edges)

    def adjacency(self) -> np.ndarray:
        """Dense in-neighbour matrix ``A[dst, src] = 1``."""
        a = np.zeros((self.n_nodes, self.n_nodes))
        for s, d in self.edges:
            a[d, s] = 1.0
        return a


def build_system_graph(config: SystemConfig) -> SystemGraph:
    clients = config.client_ids
    if not clients:
        raise ConfigError(["no client devices"])
    k = len(clients)
    nodes = [(d, "EdgeDevice") for d in clients]
    nodes += [(f"{d}/mw", "Middleware") for d in clients]
    nodes += [(f"{d}/handler", "EdgeHandler") for d in clients]
    server, glob = 3 * k, 3 * k + 1
    nodes += [(config.server.device_id, "EdgeServer"), ("global", "Global")]
    edges = []
    for i in range(k):
        edges += [(i, k + i), (k + i, 2 * k + i), (2 * k + i, server)]
    for v in range(glob):
        edges += [(glob, v), (v, glob)]
    edges += [(v, v) for v in range(len(nodes))]
    return SystemGraph(tuple(nodes), tuple(edges))


@dataclass(frozen=True)
class Normalizer:
    """Log-MinMax scaling: ``(ln(x + 1) - v_min) / (v_max - v_min)``; not clamped."""

    v_min: float
    v_max: float

    def __post_init__(self):
        if not self.v_max > self.v_min:
            raise ValueError("degenerate normalizer: v_max must exceed v_min")

    def __call__(self, x):
        return (np.log1p(x) - self.v_min) / (self.v_max - self.v_min)


def normalizer_fit(values) -> Normalizer:
    logs = np.log1p(np.asarray(list(values), dtype=float))
    if logs.size == 0:
        raise ValueError("cannot fit a normalizer on no values")
    lo, hi = float(logs.min()), float(logs.max())
    if not hi > lo:
        raise ValueError("degenerate normalizer: need at least two distinct values")
    return Normalizer(lo, hi)


def normalizer_apply(norm: Normalizer, x):
    return norm(x)


def dp_server_share(device_ms: float, transfer_ms: float, server_ms: float) -> float:
    """Fraction of inputs a DP device hands to the server when both replicas
    run at their b=1 rates; the server path is bounded by its slower stage."""
    path_ms = max(transfer_ms, server_ms)
    if path_ms <= 0:
        return 1.0
    if device_ms <= 0:
        return 0.0
    return (1.0 / path_ms) / (1.0 / device_ms + 1.0 / path_ms)


def raw_node_latencies(graph: SystemGraph, scheme: Scheme, config: SystemConfig,
                       lut: SubtaskLatencyLUT) -> np.ndarray:
    """Un-normalised latency (ms) for every node of ``graph`` under ``scheme``.

    PP nodes carry the subtask latency every input pays on that node. Under DP
    an input visits either the device replica or the server path, so each node
    carries its full-model latency weighted by the share of inputs it serves.
    """
    clients = config.client_ids
    k = len(clients)
    server_kind = config.server.kind
    net = config.network
    out = np.zeros(graph.n_nodes)
    for i, dev_id in enumerate(clients):
        model = config.model_for(dev_id)
        strat = scheme[dev_id]
        kind = config.device(dev_id).kind
        dev = lookup_latency(lut, kind, model.model_id, strat.device_range(model), 1)
        mid = net.transfer_ms(comm_volume(model, strat), 0.0)
        hnd = lookup_latency(lut, server_kind, model.model_id, strat.server_range(model), 1)
        if strat.is_dp:
            share = dp_server_share(dev, mid, hnd)
            dev, mid, hnd = (1.0 - share) * dev, share * mid, share * hnd
        out[i], out[k + i], out[2 * k + i] = dev, mid, hnd
    out[3 * k] = out[2 * k:3 * k].sum()
    return out


def one_hot(graph: SystemGraph) -> np.ndarray:
    oh = np.zeros((graph.n_nodes, N_CATEGORIES))
    for v, c in enumerate(graph.categories):
        oh[v, CATEGORIES.index(c)] = 1.0
    return oh


def features_from_raw(graph: SystemGraph, raw: np.ndarray, normalizer: Normalizer) -> np.ndarray:
    return np.concatenate([one_hot(graph), normalizer(np.asarray(raw))[:, None]], axis=1)


def build_features(graph: SystemGraph, scheme: Scheme, config: SystemConfig,
                   lut: SubtaskLatencyLUT, normalizer: Normalizer) -> np.ndarray:
    """Node feature matrix: one-hot category (5) followed by normalised latency (1)."""
    return features_from_raw(graph, raw_node_latencies(graph, scheme, config, lut), normalizer)
