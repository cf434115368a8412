"""Domain types shared across the package.

Embeddings are plain 1-D ``float64`` numpy arrays; :func:`as_embedding`
is the single validation point for them.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

SEX_VOCAB = ("F", "M")
RACE_VOCAB = ("A", "B", "H", "O", "W")
MAX_AGE = 150


class Split(str, enum.Enum):
    REFERENCE = "reference"
    PROBE_ENROLLED = "probe_enrolled"
    PROBE_NONENROLLED = "probe_nonenrolled"
    TRAIN = "train"


class DimensionMismatch(ValueError):
    pass


def as_embedding(values) -> np.ndarray:
    """Coerce ``values`` to a read-only finite float64 vector (always a copy)."""
    arr = np.array(values, dtype=np.float64, ndmin=1)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"embedding must be a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding contains non-finite values")
    arr.flags.writeable = False
    return arr


def l2_normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return as_embedding(v)
    return as_embedding(np.asarray(v, dtype=np.float64) / norm)


def euclidean_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    return math.sqrt(float(np.sum((a - b) ** 2)))


def squared_distances(probe: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance from ``probe`` to each row of ``vectors``.

    Every ranking in the package goes through this function so that a
    given (probe, row) pair always yields the same bits.
    """
    if vectors.ndim != 2 or vectors.shape[1] != probe.shape[0]:
        raise DimensionMismatch(
            f"dimension mismatch: probe {probe.shape[0]} vs vectors {vectors.shape[-1]}"
        )
    diff = vectors - probe
    return np.einsum("ij,ij->i", diff, diff)


@dataclass(frozen=True)
class SoftBiometrics:
    sex: str
    race: str
    age: int

    def __post_init__(self) -> None:
        if self.sex not in SEX_VOCAB:
            raise ValueError(f"unknown sex category {self.sex!r}")
        if self.race not in RACE_VOCAB:
            raise ValueError(f"unknown race category {self.race!r}")
        if not 0 <= int(self.age) <= MAX_AGE:
            raise ValueError(f"age out of range: {self.age}")


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: int
    sample_id: int
    embedding: np.ndarray = field(repr=False)
    split: Split = Split.REFERENCE
    soft: SoftBiometrics | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "embedding", as_embedding(self.embedding))
        object.__setattr__(self, "split", Split(self.split))

    @property
    def dim(self) -> int:
        return int(self.embedding.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, SubjectRecord):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.sample_id == other.sample_id
            and self.split == other.split
            and self.soft == other.soft
            and np.array_equal(self.embedding, other.embedding)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...]

    @property
    def valid(self) -> bool:
        return not self.violations


def validate_gallery(records: Sequence[SubjectRecord]) -> ValidationReport:
    if not records:
        raise ValueError("gallery is empty")
    violations: list[str] = []
    dims = Counter(r.dim for r in records)
    if len(dims) > 1:
        violations.append(f"dimension mismatch: {sorted(dims)}")
    keys = Counter((r.subject_id, r.sample_id) for r in records)
    for key, count in sorted(keys.items()):
        if count > 1:
            violations.append(f"duplicate id (subject={key[0]}, sample={key[1]}) x{count}")
    refs = Counter(r.subject_id for r in records if r.split is Split.REFERENCE)
    for sid, count in sorted(refs.items()):
        if count != 1:
            violations.append(f"reference split has {count} samples for subject {sid}")
    return ValidationReport(tuple(violations))


def references_of(records: Sequence[SubjectRecord]) -> list[SubjectRecord]:
    return [r for r in records if r.split is Split.REFERENCE]


def stack(records: Sequence[SubjectRecord]) -> np.ndarray:
    """Embeddings of ``records`` as an (n, dim) float64 matrix."""
    if not records:
        raise ValueError("no records")
    dim = records[0].dim
    if any(r.dim != dim for r in records):
        raise DimensionMismatch("records have differing dimensions")
    return np.stack([r.embedding for r in records])


@dataclass(frozen=True)
class CascadeSchedule:
    """Per-level selection counts driving cascade retrieval.

    ``selections[l]`` is the number of nodes kept after comparing at level
    ``l + 1``.  The last entry only matters when ``truncate_final`` is set;
    otherwise every compared leaf is returned.
    """

    n1: int
    selections: tuple[int, ...]
    truncate_final: bool = False

    def __post_init__(self) -> None:
        if self.n1 < 2 or self.n1 & (self.n1 - 1):
            raise ValueError(f"n1 must be a power of two >= 2, got {self.n1}")
        object.__setattr__(self, "selections", tuple(int(s) for s in self.selections))
        if len(self.selections) != self.levels:
            raise ValueError(
                f"schedule for n1={self.n1} needs {self.levels} selections, "
                f"got {len(self.selections)}"
            )
        if any(s < 1 for s in self.selections):
            raise ValueError("selections must be >= 1")

    @property
    def levels(self) -> int:
        return self.n1.bit_length()  # log2(n1) + 1

    def comparisons(self, gallery_size: int) -> tuple[int, ...]:
        """Per-level comparison counts implied for a gallery of ``gallery_size``."""
        if gallery_size % self.n1:
            raise ValueError(f"gallery size {gallery_size} not divisible by n1={self.n1}")
        counts = [gallery_size // self.n1]
        for sel in self.selections[:-1]:
            counts.append(2 * sel)
        for level, (sel, cmp) in enumerate(zip(self.selections, counts), start=1):
            if sel > cmp:
                raise ValueError(
                    f"level {level} keeps {sel} nodes but only compares {cmp}"
                )
        return tuple(counts)

    def fractions(self, gallery_size: int) -> tuple[float, ...]:
        return tuple(s / c for s, c in zip(self.selections, self.comparisons(gallery_size)))


@dataclass(frozen=True)
class WorkloadReport:
    comparisons_per_level: tuple[int, ...]
    gallery_size: int

    @property
    def comparisons_total(self) -> int:
        return sum(self.comparisons_per_level)

    @property
    def workload_percent(self) -> float:
        return self.comparisons_total / self.gallery_size * 100.0
