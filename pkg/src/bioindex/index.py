"""Fusion-based search forest.

The forest is stored level by level: ``levels[0]`` holds the root templates
(one per tree) and ``levels[-1]`` the reference templates.  Node ``j`` at one
level has children ``2j`` and ``2j + 1`` on the next, so tree ``t`` owns
leaves ``t*n1 .. (t+1)*n1 - 1``.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .core import SubjectRecord, stack, validate_gallery
from .fusion import FusionMethod, TrainingStats
from .pairing import PairingMethod, SoftAttributes, pair_hierarchy


class IndexBuildError(ValueError):
    """Raised for malformed forests or build parameters."""


@dataclass(frozen=True)
class FusionNode:
    level: int
    fused: np.ndarray = field(repr=False)
    covered_subjects: frozenset[int]
    children: tuple[FusionNode, ...] = ()
    leaf_subject: int | None = None


@dataclass(frozen=True, eq=False)
class IndexForest:
    n1: int
    fusion: FusionMethod
    levels: tuple[np.ndarray, ...]
    leaf_subjects: np.ndarray
    stats: TrainingStats | None = None
    pairing: PairingMethod = PairingMethod.SIMILARITY_SCORE

    def __post_init__(self) -> None:
        if self.n1 < 2 or self.n1 & (self.n1 - 1):
            raise IndexBuildError(f"n1 must be a power of two >= 2, got {self.n1}")
        if len(self.levels) != self.n1.bit_length():
            raise IndexBuildError(f"expected {self.n1.bit_length()} levels, got {len(self.levels)}")
        roots = self.levels[0].shape[0]
        for depth, arr in enumerate(self.levels):
            if arr.ndim != 2 or arr.shape[0] != roots << depth:
                raise IndexBuildError(f"level {depth + 1} has shape {arr.shape}")
            arr.flags.writeable = False
        if len(self.leaf_subjects) != roots * self.n1:
            raise IndexBuildError("leaf subject count does not match forest size")
        if len(set(self.leaf_subjects.tolist())) != len(self.leaf_subjects):
            raise IndexBuildError("a subject appears in more than one leaf")

    @property
    def dim(self) -> int:
        return int(self.levels[0].shape[1])

    @property
    def gallery_size(self) -> int:
        return int(self.levels[-1].shape[0])

    @property
    def tree_count(self) -> int:
        return int(self.levels[0].shape[0])

    @property
    def level_count(self) -> int:
        return len(self.levels)

    def node_counts(self) -> tuple[int, ...]:
        return tuple(int(a.shape[0]) for a in self.levels)

    def covered(self, level: int, node: int) -> np.ndarray:
        """Subject ids under ``node`` at 1-based ``level``."""
        span = self.n1 >> (level - 1)
        return self.leaf_subjects[node * span:(node + 1) * span]

    def node(self, level: int, index: int) -> FusionNode:
        if level == self.level_count:
            sid = int(self.leaf_subjects[index])
            return FusionNode(level, self.levels[-1][index], frozenset((sid,)), (), sid)
        kids = (self.node(level + 1, 2 * index), self.node(level + 1, 2 * index + 1))
        return FusionNode(
            level,
            self.levels[level - 1][index],
            kids[0].covered_subjects | kids[1].covered_subjects,
            kids,
        )

    @cached_property
    def trees(self) -> tuple[FusionNode, ...]:
        return tuple(self.node(1, t) for t in range(self.tree_count))

    def __eq__(self, other) -> bool:
        if not isinstance(other, IndexForest):
            return NotImplemented
        same_stats = (self.stats is None and other.stats is None) or (
            self.stats is not None
            and other.stats is not None
            and np.array_equal(self.stats.mu, other.stats.mu)
        )
        return (
            self.n1 == other.n1
            and self.fusion == other.fusion
            and self.pairing == other.pairing
            and same_stats
            and np.array_equal(self.leaf_subjects, other.leaf_subjects)
            and len(self.levels) == len(other.levels)
            and all(np.array_equal(a, b) for a, b in zip(self.levels, other.levels))
        )

    __hash__ = None  # type: ignore[assignment]


def build_index(references: Sequence[SubjectRecord], method=FusionMethod.AVERAGE1,
                pairing=PairingMethod.SIMILARITY_SCORE, n1: int = 16,
                stats: TrainingStats | None = None, *, seed: int = 0,
                soft_weights=(1.0, 1.0, 1.0), renormalize: bool = False) -> IndexForest:
    """Pair, fuse and lay out a forest of ``N / n1`` trees over ``references``."""
    method = FusionMethod.parse(method)
    pairing = PairingMethod(pairing)
    report = validate_gallery(references)
    if not report.valid:
        raise IndexBuildError("invalid gallery: " + "; ".join(report.violations[:3]))
    n = len(references)
    if n1 < 2 or n1 & (n1 - 1):
        raise IndexBuildError(f"n1 must be a power of two >= 2, got {n1}")
    if n % n1:
        raise IndexBuildError(f"gallery size {n} is not divisible by n1={n1}")
    if method.needs_stats and stats is None:
        raise IndexBuildError(f"{method.name} fusion requires training statistics")

    vectors = stack(references)
    soft = SoftAttributes.of(references) if pairing is PairingMethod.SOFT_BIOMETRIC else None
    hierarchy = pair_hierarchy(vectors, pairing, n1, fusion=method, stats=stats, seed=seed,
                               soft=soft, soft_weights=soft_weights, renormalize=renormalize)

    # Walk the pairing iterations from the last (roots) back to the raw templates.
    iterations = len(hierarchy.levels)
    idx = np.arange(n // n1)
    levels = [hierarchy.fused[-1][idx]]
    for k in range(iterations - 1, -1, -1):
        pairs = np.asarray(hierarchy.levels[k].pairs, dtype=np.int64)
        idx = pairs[idx].reshape(-1)
        source = hierarchy.fused[k - 1] if k > 0 else vectors
        levels.append(source[idx])
    subjects = np.array([references[i].subject_id for i in idx], dtype=np.uint64)
    return IndexForest(n1, method, tuple(np.ascontiguousarray(a) for a in levels), subjects,
                       stats, pairing)
