"""Cascaded retrieval over the search forest, exhaustive baseline, and workload."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np

from .core import CascadeSchedule, DimensionMismatch, WorkloadReport, squared_distances


class ScheduleMismatch(ValueError):
    pass


class Comparator(Protocol):
    """Scores a probe against stored templates; lower is more similar.

    ``prepare`` runs once per transaction (a protected backend encrypts the
    probe there); ``scores`` compares the prepared probe with ``items[idx]``.
    """

    def prepare(self, probe: np.ndarray) -> Any: ...

    def scores(self, prepared: Any, items: Any, idx: np.ndarray) -> np.ndarray: ...


class PlaintextComparator:
    """Squared Euclidean distance on unprotected templates."""

    def prepare(self, probe: np.ndarray) -> np.ndarray:
        return np.asarray(probe, dtype=np.float64)

    def scores(self, prepared: np.ndarray, items: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return squared_distances(prepared, items[idx])


PLAINTEXT = PlaintextComparator()


@dataclass(frozen=True)
class CandidateList:
    subject_ids: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.subject_ids)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return [(int(s), float(d)) for s, d in zip(self.subject_ids, self.scores)]

    def rank_of(self, subject_id: int) -> int | None:
        """1-based rank of ``subject_id`` or None when it is absent."""
        hits = np.flatnonzero(self.subject_ids == subject_id)
        return int(hits[0]) + 1 if hits.size else None

    @property
    def top1(self) -> int | None:
        return int(self.subject_ids[0]) if len(self) else None


@dataclass(frozen=True)
class RetrievalTrace:
    compared: tuple[int, ...]
    selected: tuple[int, ...]
    candidates: CandidateList

    @property
    def comparisons(self) -> int:
        return sum(self.compared)


def _rank(scores: np.ndarray, keys: np.ndarray) -> np.ndarray:
    # ascending score, ties to the lower key
    return np.lexsort((keys, scores))


def default_schedule(gallery_size: int, n1: int, k1: float) -> CascadeSchedule:
    """Keep ``round(k1 * N / n1)`` roots, then halve the kept count per level."""
    if not 0 < k1 <= 1 or not math.isfinite(k1):
        raise ValueError(f"k1 must lie in (0, 1], got {k1}")
    if n1 < 2 or n1 & (n1 - 1):
        raise ValueError(f"n1 must be a power of two >= 2, got {n1}")
    if gallery_size % n1:
        raise ValueError(f"gallery size {gallery_size} not divisible by n1={n1}")
    first = max(1, math.floor(k1 * (gallery_size // n1) + 0.5))
    selections = [first]
    for _ in range(n1.bit_length() - 1):
        selections.append(max(1, selections[-1] // 2))
    return CascadeSchedule(n1, tuple(selections))


def keep_all_schedule(gallery_size: int, n1: int) -> CascadeSchedule:
    roots = gallery_size // n1
    return CascadeSchedule(n1, tuple(roots << level for level in range(n1.bit_length())))


def schedule_for_k1(gallery_size: int, n1: int, k1: float) -> CascadeSchedule:
    """``default_schedule``, except that ``k1 == 1`` means keep every node at every level."""
    if k1 == 1:
        return keep_all_schedule(gallery_size, n1)
    return default_schedule(gallery_size, n1, k1)


def lower_bound_schedule(n1: int) -> CascadeSchedule:
    return CascadeSchedule(n1, (1,) * n1.bit_length())


def retrieve(probe, forest, schedule: CascadeSchedule,
             comparator: Comparator = PLAINTEXT) -> RetrievalTrace:
    """Run one identification transaction through the cascade.

    ``forest`` is an :class:`~bioindex.index.IndexForest` or anything with the
    same ``n1`` / ``levels`` / ``leaf_subjects`` layout (e.g. a protected index).
    """
    probe = np.asarray(probe, dtype=np.float64)
    if probe.shape != (forest.dim,):
        raise DimensionMismatch(f"probe dim {probe.shape} != index dim {forest.dim}")
    if schedule.n1 != forest.n1 or schedule.levels != len(forest.levels):
        raise ScheduleMismatch(
            f"schedule (n1={schedule.n1}) does not fit index (n1={forest.n1})"
        )
    schedule.comparisons(len(forest.leaf_subjects))

    prepared = comparator.prepare(probe)
    last = len(forest.levels) - 1
    nodes = np.arange(len(forest.levels[0]))
    compared: list[int] = []
    selected: list[int] = []
    for depth, items in enumerate(forest.levels):
        scores = np.asarray(comparator.scores(prepared, items, nodes), dtype=np.float64)
        compared.append(len(nodes))
        if depth == last:
            subjects = np.asarray(forest.leaf_subjects)[nodes]
            order = _rank(scores, subjects)
            if schedule.truncate_final:
                order = order[:schedule.selections[depth]]
            selected.append(len(order))
            return RetrievalTrace(tuple(compared), tuple(selected),
                                  CandidateList(subjects[order], scores[order]))
        order = _rank(scores, nodes)
        keep = np.sort(nodes[order[:schedule.selections[depth]]])
        selected.append(len(keep))
        nodes = np.stack([2 * keep, 2 * keep + 1], axis=1).reshape(-1)
    raise AssertionError("unreachable")


def exhaustive_search(probe, references: np.ndarray, subject_ids: Sequence[int],
                      comparator: Comparator = PLAINTEXT) -> CandidateList:
    """Compare against every reference and rank all of them."""
    probe = np.asarray(probe, dtype=np.float64)
    ids = np.asarray(subject_ids, dtype=np.uint64)
    if len(ids) == 0:
        raise ValueError("empty gallery")
    if isinstance(references, np.ndarray) and (
        references.ndim != 2 or references.shape[1] != probe.shape[0]
    ):
        raise DimensionMismatch("probe and references differ in dimension")
    scores = np.asarray(
        comparator.scores(comparator.prepare(probe), references, np.arange(len(ids))),
        dtype=np.float64,
    )
    order = _rank(scores, ids)
    return CandidateList(ids[order], scores[order])


def workload(source: RetrievalTrace | CascadeSchedule | Sequence[int],
             gallery_size: int) -> WorkloadReport:
    """Comparison counts as a percentage of an exhaustive search over the gallery."""
    if isinstance(source, RetrievalTrace):
        counts = source.compared
    elif isinstance(source, CascadeSchedule):
        counts = source.comparisons(gallery_size)
    else:
        counts = tuple(int(c) for c in source)
    return WorkloadReport(tuple(counts), gallery_size)


def baseline_workload(gallery_size: int) -> WorkloadReport:
    return WorkloadReport((gallery_size,), gallery_size)


def lower_bound_workload(gallery_size: int, n1: int) -> WorkloadReport:
    return workload(lower_bound_schedule(n1), gallery_size)
