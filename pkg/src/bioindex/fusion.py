"""Feature-level fusion of embedding vectors.

Six binary operators are provided.  Groups of ``2**k`` vectors are fused
hierarchically along their pairing tree, so every internal index node has
a well-defined template.
"""

from __future__ import annotations

import enum
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .core import DimensionMismatch, as_embedding


class FusionMethod(enum.IntEnum):
    AVERAGE1 = 1
    AVERAGE2 = 2
    DISTANCE1 = 3
    DISTANCE2 = 4
    INDEX1 = 5
    INDEX2 = 6

    @property
    def needs_stats(self) -> bool:
        return self in (FusionMethod.AVERAGE2, FusionMethod.DISTANCE1, FusionMethod.DISTANCE2)

    @property
    def short_name(self) -> str:
        return _SHORT[self]

    @classmethod
    def parse(cls, name: str | int | FusionMethod) -> FusionMethod:
        if isinstance(name, (FusionMethod, int)):
            return cls(name)
        key = name.strip().lower().replace("-", "").replace("_", "")
        for method, short in _SHORT.items():
            if key in (short, method.name.lower()):
                return method
        raise ValueError(f"unknown fusion method {name!r}")


_SHORT = {
    FusionMethod.AVERAGE1: "avg1",
    FusionMethod.AVERAGE2: "avg2",
    FusionMethod.DISTANCE1: "dist1",
    FusionMethod.DISTANCE2: "dist2",
    FusionMethod.INDEX1: "idx1",
    FusionMethod.INDEX2: "idx2",
}


class MissingStats(ValueError):
    pass


@dataclass(frozen=True)
class TrainingStats:
    mu: np.ndarray
    source_count: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "mu", as_embedding(self.mu))

    @property
    def dim(self) -> int:
        return int(self.mu.shape[0])


def compute_training_stats(train) -> TrainingStats:
    """Per-position mean over a training set disjoint from gallery and probes."""
    mat = np.asarray(train, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise ValueError("training set must be a non-empty (n, dim) collection")
    return TrainingStats(mu=mat.mean(axis=0), source_count=mat.shape[0])


def _rank_by_distance(x: np.ndarray, mu: np.ndarray) -> np.ndarray:
    # 1-based rank of each position when sorted ascending by |x - mu|; stable.
    order = np.argsort(np.abs(x - mu), kind="stable")
    ranks = np.empty(x.shape[0], dtype=np.int64)
    ranks[order] = np.arange(1, x.shape[0] + 1)
    return ranks


def fuse(a, b, method: FusionMethod | str, stats: TrainingStats | None = None) -> np.ndarray:
    method = FusionMethod.parse(method)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"cannot fuse dims {a.shape} and {b.shape}")
    if method.needs_stats:
        if stats is None:
            raise MissingStats(f"{method.name} requires training statistics")
        if stats.dim != a.shape[0]:
            raise DimensionMismatch(f"stats dim {stats.dim} != template dim {a.shape[0]}")
        mu = stats.mu

    if method is FusionMethod.AVERAGE1:
        out = (a + b) / 2
    elif method is FusionMethod.AVERAGE2:
        # Printed formula; deliberately not normalized by the weight sum.
        out = (a * np.abs(a - mu) + b * np.abs(b - mu)) / 2
    elif method is FusionMethod.DISTANCE1:
        out = np.where(np.abs(a - mu) >= np.abs(b - mu), a, b)
    elif method is FusionMethod.DISTANCE2:
        out = np.where(_rank_by_distance(a, mu) >= _rank_by_distance(b, mu), a, b)
    elif method is FusionMethod.INDEX1:
        half = (a.shape[0] + 1) // 2
        out = np.concatenate([a[:half], b[half:]])
    else:
        out = b.copy()
        out[::2] = a[::2]  # 1-based odd positions
    return as_embedding(out)


def fuse_tree(tree, vectors: np.ndarray, method, stats=None) -> np.ndarray:
    """Fuse a nested-pair ``tree`` of row indices into ``vectors`` bottom-up.

    ``tree`` is either an int (a leaf) or a 2-tuple of subtrees.
    """
    if isinstance(tree, (int, np.integer)):
        return as_embedding(vectors[int(tree)])
    left, right = tree
    return fuse(fuse_tree(left, vectors, method, stats), fuse_tree(right, vectors, method, stats),
                method, stats)


def fuse_group(members: Sequence, method, stats: TrainingStats | None = None) -> np.ndarray:
    """Fuse ``2**k`` vectors given in pairing-tree order (adjacent members are siblings)."""
    level = [np.asarray(m, dtype=np.float64) for m in members]
    n = len(level)
    if n == 0 or n & (n - 1):
        raise ValueError(f"group size must be a power of two, got {n}")
    while len(level) > 1:
        level = [fuse(level[i], level[i + 1], method, stats) for i in range(0, len(level), 2)]
    return as_embedding(level[0])
