"""Pair selection for index construction.

Subjects are paired by solving an assignment problem over a cost matrix
whose diagonal is forbidden; the resulting permutation is converted into
disjoint pairs.  Repeating this over fused groups yields the pairing tree
used by the index.
"""

from __future__ import annotations

import enum
import itertools
import sys
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .core import SubjectRecord, stack
from .fusion import FusionMethod, TrainingStats, fuse

SENTINEL = sys.float_info.max


class PairingMethod(str, enum.Enum):
    RANDOM = "random"
    SOFT_BIOMETRIC = "soft"
    SIMILARITY_SCORE = "score"


class PairingError(ValueError):
    pass


@dataclass(frozen=True)
class CostMatrix:
    costs: np.ndarray

    def __post_init__(self) -> None:
        c = np.array(self.costs, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise PairingError(f"cost matrix must be square, got {c.shape}")
        np.fill_diagonal(c, SENTINEL)
        off = ~np.eye(c.shape[0], dtype=bool)
        if not np.all(np.isfinite(c[off])) or np.any(c[off] < 0):
            raise PairingError("off-diagonal costs must be finite and non-negative")
        c.flags.writeable = False
        object.__setattr__(self, "costs", c)

    @property
    def size(self) -> int:
        return self.costs.shape[0]

    def dump(self, path) -> None:
        np.savetxt(path, self.costs, fmt="%.17g", delimiter=" ")


@dataclass(frozen=True)
class PairingResult:
    pairs: tuple[tuple[int, int], ...]
    total_cost: float
    method: PairingMethod = PairingMethod.SIMILARITY_SCORE


def cost_matrix_scores(vectors) -> CostMatrix:
    """Pairwise Euclidean distances; lower cost means more similar."""
    x = np.asarray(vectors, dtype=np.float64)
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    # the expansion cancels badly for near-duplicates; redo those directly
    close = np.argwhere(d2 <= 1e-8 * (sq[:, None] + sq[None, :]))
    for i, j in close:
        diff = x[i] - x[j]
        d2[i, j] = diff @ diff
    np.maximum(d2, 0.0, out=d2)
    d = np.sqrt(d2)
    return CostMatrix((d + d.T) / 2)


@dataclass(frozen=True)
class SoftAttributes:
    """Column view of soft biometrics for a set of subjects or groups."""

    sex: tuple[str, ...]
    race: tuple[str, ...]
    age: np.ndarray

    @classmethod
    def of(cls, records: Sequence[SubjectRecord]) -> SoftAttributes:
        missing = [r.subject_id for r in records if r.soft is None]
        if missing:
            raise PairingError(f"missing soft biometrics for subjects {missing[:5]}")
        return cls(
            sex=tuple(r.soft.sex for r in records),
            race=tuple(r.soft.race for r in records),
            age=np.array([r.soft.age for r in records], dtype=np.float64),
        )

    def merge(self, groups: Sequence[Sequence[int]]) -> SoftAttributes:
        """Aggregate member attributes per group: majority vote, mean age."""
        return SoftAttributes(
            sex=tuple(_majority([self.sex[i] for i in g]) for g in groups),
            race=tuple(_majority([self.race[i] for i in g]) for g in groups),
            age=np.array([self.age[list(g)].mean() for g in groups]),
        )


def _majority(values: list[str]) -> str:
    counts = Counter(values)
    best = max(counts.values())
    # ties go to the value of the lowest-index member
    return next(v for v in values if counts[v] == best)


def cost_matrix_soft(attrs: SoftAttributes, weights=(1.0, 1.0, 1.0),
                     age_range: float | None = None) -> CostMatrix:
    w_sex, w_race, w_age = weights
    sex = np.array(attrs.sex)
    race = np.array(attrs.race)
    age = attrs.age
    if age_range is None:
        age_range = float(age.max() - age.min())
    if age_range <= 0:
        age_range = 1.0
    costs = (
        w_sex * (sex[:, None] != sex[None, :])
        + w_race * (race[:, None] != race[None, :])
        + w_age * np.abs(age[:, None] - age[None, :]) / age_range
    )
    return CostMatrix(costs)


def solve_assignment(c: CostMatrix) -> np.ndarray:
    """Minimum-cost permutation ``f`` with ``f[i] != i`` (shortest augmenting path).

    Runs in O(N^3) worst case; the column scan of each augmentation step is
    vectorized.  Ties resolve to the lowest column index.
    """
    n = c.size
    if n < 2:
        raise PairingError("assignment needs at least two subjects")
    cost = np.array(c.costs, dtype=np.float64)
    cost[cost >= SENTINEL] = np.inf
    # 1-based bookkeeping; column 0 is the virtual root of each search.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    f = np.empty(n, dtype=np.int64)
    f[p[1:] - 1] = np.arange(n)
    return f


def assignment_cost(f: np.ndarray, c: CostMatrix) -> float:
    return float(c.costs[np.arange(len(f)), f].sum())


def _cycles(f: np.ndarray) -> list[list[int]]:
    seen = np.zeros(len(f), dtype=bool)
    cycles = []
    for start in range(len(f)):
        if seen[start]:
            continue
        cyc = []
        j = start
        while not seen[j]:
            seen[j] = True
            cyc.append(j)
            j = int(f[j])
        cycles.append(cyc)
    return cycles


def extract_pairs(f, c: CostMatrix, method=PairingMethod.SIMILARITY_SCORE) -> PairingResult:
    """Turn a fixed-point-free permutation into a perfect matching.

    Each cycle, walked from its lowest index, is cut into consecutive pairs;
    the odd element left by an odd cycle goes to a pool that is matched
    greedily by ascending cost.
    """
    f = np.asarray(f, dtype=np.int64)
    n = len(f)
    if n % 2:
        raise PairingError(f"cannot pair an odd number of subjects ({n})")
    if np.any(f == np.arange(n)) or sorted(f.tolist()) != list(range(n)):
        raise PairingError("f must be a permutation without fixed points")
    pairs: list[tuple[int, int]] = []
    pool: list[int] = []
    for cyc in _cycles(f):
        for k in range(0, len(cyc) - 1, 2):
            pairs.append((cyc[k], cyc[k + 1]))
        if len(cyc) % 2:
            pool.append(cyc[-1])
    pairs.extend(_greedy_pairs(sorted(pool), c.costs))
    pairs = sorted(tuple(sorted(p)) for p in pairs)
    total = float(sum(c.costs[i, j] for i, j in pairs))
    return PairingResult(tuple(pairs), total, PairingMethod(method))


def _greedy_pairs(pool: list[int], costs: np.ndarray) -> list[tuple[int, int]]:
    candidates = sorted(
        (costs[i, j], i, j) for i, j in itertools.combinations(pool, 2)
    )
    taken: set[int] = set()
    out = []
    for _, i, j in candidates:
        if i not in taken and j not in taken:
            taken.update((i, j))
            out.append((i, j))
    return out


def pair_subjects(c: CostMatrix, method=PairingMethod.SIMILARITY_SCORE) -> PairingResult:
    return extract_pairs(solve_assignment(c), c, method)


def brute_force_matching(c: CostMatrix) -> PairingResult:
    """Exact minimum-cost perfect matching by enumerating all (N-1)!! matchings."""
    n = c.size
    if n % 2 or n == 0:
        raise PairingError("brute force matching needs an even, non-zero N")
    if n > 12:
        raise PairingError(f"N={n} too large for exhaustive enumeration (max 12)")
    costs = c.costs
    best: tuple[float, tuple] = (np.inf, ())

    def rec(remaining: tuple[int, ...], acc: float, chosen: tuple) -> None:
        nonlocal best
        if acc >= best[0]:
            return
        if not remaining:
            best = (acc, chosen)
            return
        i = remaining[0]
        for k in range(1, len(remaining)):
            j = remaining[k]
            rec(remaining[1:k] + remaining[k + 1:], acc + costs[i, j], chosen + ((i, j),))

    rec(tuple(range(n)), 0.0, ())
    return PairingResult(tuple(sorted(best[1])), float(best[0]))


def random_pairs(n: int, rng: np.random.Generator) -> tuple[tuple[int, int], ...]:
    perm = rng.permutation(n)
    return tuple(sorted(tuple(sorted((int(perm[k]), int(perm[k + 1])))) for k in range(0, n, 2)))


@dataclass(frozen=True)
class Hierarchy:
    """Result of iterative pairing.

    ``levels[k]`` is the pairing performed at iteration ``k``; its indices
    refer to the groups that existed before that iteration.  ``groups`` are
    the final pairing trees (nested 2-tuples of gallery row indices), and
    ``fused[k]`` holds the representative template of every group after
    iteration ``k``.
    """

    levels: tuple[PairingResult, ...]
    groups: tuple
    fused: tuple[np.ndarray, ...]

    @property
    def total_cost(self) -> float:
        return float(sum(level.total_cost for level in self.levels))


def pair_hierarchy(references: Sequence[SubjectRecord] | np.ndarray, method, n1: int,
                   fusion=FusionMethod.AVERAGE1, stats: TrainingStats | None = None,
                   seed: int = 0, soft: SoftAttributes | None = None,
                   soft_weights=(1.0, 1.0, 1.0), renormalize: bool = False) -> Hierarchy:
    """Iteratively pair subjects, then fused pairs, until groups hold ``n1`` subjects."""
    method = PairingMethod(method)
    fusion = FusionMethod.parse(fusion)
    if isinstance(references, np.ndarray):
        vectors = np.asarray(references, dtype=np.float64)
    else:
        vectors = stack(references)
        if method is PairingMethod.SOFT_BIOMETRIC and soft is None:
            soft = SoftAttributes.of(references)
    n = vectors.shape[0]
    if n1 < 2 or n1 & (n1 - 1):
        raise PairingError(f"n1 must be a power of two >= 2, got {n1}")
    if n % n1:
        raise PairingError(f"gallery size {n} is not divisible by n1={n1}")
    if method is PairingMethod.SOFT_BIOMETRIC and soft is None:
        raise PairingError("soft-biometric pairing needs soft attributes")
    if fusion.needs_stats and stats is None:
        raise PairingError(f"{fusion.name} fusion requires training statistics")

    rng = np.random.default_rng(seed)
    trees: list = list(range(n))
    members: list[list[int]] = [[i] for i in range(n)]
    reps = vectors
    levels: list[PairingResult] = []
    fused: list[np.ndarray] = []
    age_range = None
    if soft is not None:
        age_range = float(soft.age.max() - soft.age.min()) or 1.0
    group_size = 1
    while group_size < n1:
        if method is PairingMethod.RANDOM:
            pairs = random_pairs(len(trees), rng)
            cost = sum(np.linalg.norm(reps[i] - reps[j]) for i, j in pairs)
            result = PairingResult(pairs, float(cost), method)
        else:
            if method is PairingMethod.SIMILARITY_SCORE:
                c = cost_matrix_scores(reps)
            else:
                c = cost_matrix_soft(soft.merge(members), soft_weights, age_range)
            result = pair_subjects(c, method)
        levels.append(result)
        trees = [(trees[i], trees[j]) for i, j in result.pairs]
        members = [members[i] + members[j] for i, j in result.pairs]
        reps = np.stack([fuse(reps[i], reps[j], fusion, stats) for i, j in result.pairs])
        if renormalize:
            reps = reps / np.linalg.norm(reps, axis=1, keepdims=True).clip(min=1e-300)
        reps.flags.writeable = False
        fused.append(reps)
        group_size *= 2
    return Hierarchy(tuple(levels), tuple(trees), tuple(fused))


def leaves(tree) -> list[int]:
    if isinstance(tree, (int, np.integer)):
        return [int(tree)]
    return leaves(tree[0]) + leaves(tree[1])
