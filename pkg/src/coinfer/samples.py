"""Training records for the performance predictors."""
from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .sysgraph import SystemGraph


@dataclass(frozen=True)
class Sample:
    """One simulated (system, scheme) measurement.

    ``raw`` holds un-normalised node latencies; features are produced later
    with the normalizer fitted on the training split. ``group`` identifies the
    system the sample was measured on.
    """

    graph: SystemGraph
    raw: np.ndarray
    throughput: float
    group: Hashable = None
    scheme: str = ""
    config_seed: int | None = None

    def __post_init__(self):
        if not self.throughput > 0:
            raise ValueError("sample throughput must be positive")

    def group_key(self) -> Hashable:
        return (self.graph.signature(), self.group)


@dataclass(frozen=True)
class PairSample:
    graph: SystemGraph
    raw_a: np.ndarray
    raw_b: np.ndarray
    label: int  # 1 if A's measured throughput exceeds B's


def make_pairs(samples: Sequence[Sample]) -> list[PairSample]:
    """All unordered pairs within each topology/system group; equal throughputs dropped.

    Orientation is fixed by input order: the earlier sample becomes A.
    """
    groups: dict = defaultdict(list)
    for s in samples:
        groups[s.group_key()].append(s)
    pairs = []
    for members in groups.values():
        for a, b in itertools.combinations(members, 2):
            if a.throughput == b.throughput:
                continue
            pairs.append(PairSample(a.graph, a.raw, b.raw, int(a.throughput > b.throughput)))
    return pairs


def split_groups(samples: Sequence[Sample], train_fraction: float = 0.7,
                 seed: int = 0) -> tuple[list[Sample], list[Sample]]:
    """Split by system group so validation systems are unseen during training."""
    keys = sorted({repr(s.group_key()) for s in samples})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(keys))
    n_train = int(round(train_fraction * len(keys)))
    if len(keys) >= 2:
        n_train = min(max(n_train, 1), len(keys) - 1)
    train_keys = {keys[i] for i in order[:n_train]}
    train = [s for s in samples if repr(s.group_key()) in train_keys]
    val = [s for s in samples if repr(s.group_key()) not in train_keys]
    return train, val
