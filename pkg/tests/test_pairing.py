import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from bioindex.core import SoftBiometrics, SubjectRecord
from bioindex.fusion import FusionMethod
from bioindex.pairing import (
    SENTINEL,
    CostMatrix,
    PairingError,
    PairingMethod,
    SoftAttributes,
    assignment_cost,
    brute_force_matching,
    cost_matrix_scores,
    cost_matrix_soft,
    extract_pairs,
    leaves,
    pair_hierarchy,
    pair_subjects,
    random_pairs,
    solve_assignment,
)


def sym(rng, n, integer=False):
    c = rng.integers(0, 10, (n, n)).astype(float) if integer else rng.random((n, n))
    return CostMatrix((c + c.T) / 2)


def is_perfect(pairs, n):
    flat = [i for p in pairs for i in p]
    return sorted(flat) == list(range(n)) and all(i != j for i, j in pairs)


def all_derangements(n):
    return [p for p in itertools.permutations(range(n)) if all(p[i] != i for i in range(n))]


def test_sentinel_diagonal():
    c = CostMatrix(np.zeros((3, 3)))
    assert np.all(np.diag(c.costs) == SENTINEL)
    assert SENTINEL == np.finfo(np.float64).max


@pytest.mark.parametrize("bad", [[[0, -1], [-1, 0]], [[0, np.inf], [1, 0]], [[0, 1, 2]]])
def test_cost_matrix_validation(bad):
    with pytest.raises(PairingError):
        CostMatrix(np.array(bad, dtype=float))


def test_identical_embeddings_cost_zero():
    c = cost_matrix_scores(np.array([[0.3, 0.4], [0.3, 0.4]]))
    assert c.costs[0, 1] == 0.0


def test_score_matrix_matches_distance_oracle(rng):
    x = rng.standard_normal((4, 6))
    c = cost_matrix_scores(x)
    for i, j in itertools.permutations(range(4), 2):
        assert c.costs[i, j] == pytest.approx(np.sqrt(((x[i] - x[j]) ** 2).sum()), rel=1e-12)


def _soft(sex, race, age):
    return SoftAttributes(tuple(sex), tuple(race), np.array(age, dtype=float))


def test_soft_cost_examples():
    same = cost_matrix_soft(_soft("FF", "WW", [30, 30]))
    assert same.costs[0, 1] == 0.0
    ends = cost_matrix_soft(_soft("FFF", "WWW", [16, 77, 40]))
    assert ends.costs[0, 1] == 1.0


def test_soft_cost_matches_direct_formula(rng):
    sex = rng.choice(["F", "M"], 5)
    race = rng.choice(list("ABHOW"), 5)
    age = rng.integers(16, 78, 5)
    w = (0.5, 2.0, 1.5)
    c = cost_matrix_soft(_soft(sex, race, age), w)
    span = age.max() - age.min()
    for i, j in itertools.permutations(range(5), 2):
        direct = (w[0] * (sex[i] != sex[j]) + w[1] * (race[i] != race[j])
                  + w[2] * abs(int(age[i]) - int(age[j])) / span)
        assert c.costs[i, j] == pytest.approx(direct, rel=1e-15)


def test_soft_merge_majority_and_mean():
    attrs = _soft("FMMF", "WBWB", [20, 30, 40, 50])
    merged = attrs.merge([[0, 1], [1, 2, 3]])
    assert merged.sex == ("F", "M")  # tie goes to the lowest-index member
    assert merged.race == ("W", "B")
    np.testing.assert_array_equal(merged.age, [25, 40])


def test_assignment_n2_swaps():
    np.testing.assert_array_equal(solve_assignment(CostMatrix(np.ones((2, 2)))), [1, 0])


def test_assignment_block_example():
    c = np.full((4, 4), 4.0)
    c[0, 1] = c[1, 0] = c[2, 3] = c[3, 2] = 1.0
    cm = CostMatrix(c)
    f = solve_assignment(cm)
    np.testing.assert_array_equal(f, [1, 0, 3, 2])
    assert assignment_cost(f, cm) == 4.0
    assert min(assignment_cost(np.array(p), cm) for p in all_derangements(4)) == 4.0


@pytest.mark.parametrize("n", [2, 4, 5, 8])
def test_assignment_uniform_costs(n):
    cm = CostMatrix(np.full((n, n), 3.0))
    f = solve_assignment(cm)
    assert np.all(f != np.arange(n))
    assert assignment_cost(f, cm) == 3.0 * n


def test_assignment_matches_exhaustive_derangements(rng):
    for n in (3, 4, 5, 6):
        for _ in range(20):
            cm = sym(rng, n, integer=True)
            best = min(assignment_cost(np.array(p), cm) for p in all_derangements(n))
            f = solve_assignment(cm)
            assert np.all(f != np.arange(n))
            assert assignment_cost(f, cm) == best


def test_assignment_matches_scipy(rng):
    for n in (10, 31, 64):
        cm = sym(rng, n)
        dense = np.array(cm.costs)
        np.fill_diagonal(dense, 1e12)
        rows, cols = linear_sum_assignment(dense)
        f = solve_assignment(cm)
        assert assignment_cost(f, cm) == pytest.approx(dense[rows, cols].sum(), rel=1e-12)


def test_assignment_ties_to_lowest_index():
    cm = CostMatrix(np.ones((4, 4)))
    assert solve_assignment(cm).tolist() == solve_assignment(cm).tolist()
    assert solve_assignment(cm)[0] == 1


@pytest.mark.parametrize("f,expected", [
    ([1, 0, 3, 2], ((0, 1), (2, 3))),
    ([1, 2, 3, 0], ((0, 1), (2, 3))),
    ([1, 2, 0, 4, 5, 3], ((0, 1), (2, 5), (3, 4))),
])
def test_extract_pairs_examples(f, expected):
    res = extract_pairs(f, CostMatrix(np.ones((len(f), len(f)))))
    assert res.pairs == expected


def test_extract_pairs_greedy_pool_cost():
    # four 3-cycles leave 2, 5, 8, 11 in the pool
    f = [1, 2, 0, 4, 5, 3, 7, 8, 6, 10, 11, 9]
    c = np.full((12, 12), 9.0)
    c[2, 8] = c[8, 2] = 1.0
    c[5, 11] = c[11, 5] = 2.0
    res = extract_pairs(f, CostMatrix(c))
    assert (2, 8) in res.pairs and (5, 11) in res.pairs
    assert is_perfect(res.pairs, 12)
    assert res.total_cost == sum(CostMatrix(c).costs[i, j] for i, j in res.pairs)


@pytest.mark.parametrize("f", [[0, 1], [1, 0, 2], [1, 1, 0, 0]])
def test_extract_pairs_rejects_bad_permutations(f):
    with pytest.raises(PairingError):
        extract_pairs(f, CostMatrix(np.ones((len(f), len(f)))))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6).flatmap(lambda h: st.permutations(range(2 * h))))
def test_extract_pairs_always_perfect(perm):
    f = np.array(perm)
    n = len(f)
    if np.any(f == np.arange(n)):
        # turn fixed points into a derangement by rotating them together
        fixed = np.flatnonzero(f == np.arange(n))
        if len(fixed) == 1:
            j = (fixed[0] + 1) % n
            f[fixed[0]], f[j] = f[j], f[fixed[0]]
        else:
            f[fixed] = np.roll(fixed, 1)
    res = extract_pairs(f, CostMatrix(np.ones((n, n))))
    assert is_perfect(res.pairs, n)


def test_brute_force_examples():
    assert brute_force_matching(CostMatrix(np.ones((2, 2)))).pairs == ((0, 1),)
    c = np.zeros((4, 4))
    for (i, j), v in {(0, 1): 1, (0, 2): 5, (0, 3): 4, (1, 2): 4, (1, 3): 5, (2, 3): 1}.items():
        c[i, j] = c[j, i] = v
    res = brute_force_matching(CostMatrix(c))
    assert res.pairs == ((0, 1), (2, 3)) and res.total_cost == 2.0
    assert brute_force_matching(CostMatrix(np.full((6, 6), 2.5))).total_cost == 7.5


def test_brute_force_limits():
    with pytest.raises(PairingError):
        brute_force_matching(CostMatrix(np.ones((3, 3))))
    with pytest.raises(PairingError):
        brute_force_matching(CostMatrix(np.ones((14, 14))))


def test_pipeline_vs_brute_force_ratio(rng):
    ratios = []
    for n in (6, 8):
        for _ in range(500):
            cm = sym(rng, n)
            opt = brute_force_matching(cm).total_cost
            got = pair_subjects(cm)
            assert is_perfect(got.pairs, n)
            assert got.total_cost >= opt - 1e-12
            ratios.append(got.total_cost / opt)
    assert np.median(ratios) <= 1.5


def test_random_pairs_perfect(rng):
    assert is_perfect(random_pairs(10, rng), 10)


def test_hierarchy_structure_n4():
    x = np.random.default_rng(0).standard_normal((4, 3))
    h = pair_hierarchy(x, PairingMethod.SIMILARITY_SCORE, 4)
    assert [len(level.pairs) for level in h.levels] == [2, 1]
    assert len(h.groups) == 1 and sorted(leaves(h.groups[0])) == [0, 1, 2, 3]


def test_hierarchy_structure_n8_n1_2():
    x = np.random.default_rng(0).standard_normal((8, 3))
    h = pair_hierarchy(x, PairingMethod.SIMILARITY_SCORE, 2)
    assert len(h.levels) == 1 and len(h.levels[0].pairs) == 4


def test_hierarchy_representatives_are_fused_groups():
    x = np.random.default_rng(1).standard_normal((8, 5))
    h = pair_hierarchy(x, "score", 8)
    np.testing.assert_allclose(h.fused[-1][0], x.mean(axis=0), rtol=1e-12)


def test_hierarchy_errors():
    x = np.zeros((6, 2)) + np.arange(6)[:, None]
    with pytest.raises(PairingError):
        pair_hierarchy(x, "score", 4)
    with pytest.raises(PairingError):
        pair_hierarchy(x, "score", 3)
    with pytest.raises(PairingError):
        pair_hierarchy(x, "soft", 2)
    with pytest.raises(PairingError):
        pair_hierarchy(x, "score", 2, fusion=FusionMethod.DISTANCE1)


def test_soft_hierarchy_from_records():
    rng = np.random.default_rng(2)
    recs = [SubjectRecord(i, i, rng.standard_normal(4),
                          soft=SoftBiometrics("FM"[i % 2], "W", 20 + i)) for i in range(8)]
    h = pair_hierarchy(recs, "soft", 4)
    for i, j in h.levels[0].pairs:
        assert recs[i].soft.sex == recs[j].soft.sex


def test_score_pairing_beats_random_on_synthetic():
    x = np.random.default_rng(3).standard_normal((8, 16))
    score = pair_hierarchy(x, "score", 8).total_cost
    rand = np.mean([pair_hierarchy(x, "random", 8, seed=s).total_cost for s in range(100)])
    assert score <= rand


def test_cost_matrix_dump(tmp_path):
    c = CostMatrix(np.array([[0, 1.5], [1.5, 0]]))
    c.dump(tmp_path / "c.txt")
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "c.txt"), c.costs)
