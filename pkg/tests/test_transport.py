import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from roda.alignment import AffineAdapter
from roda.errors import NumericError, ShapeError, SizeError
from roda.memory_bank import MemoryBank
from roda.transport import (CostMatrix, DiscreteAssignment, assignment_cost, cost_matrix, discretize,
                            exact_ot, hungarian_assignment, marginal_residual, plan_cost, sinkhorn)

TOL = 1e-6


def rand_cost(seed, max_side=8):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, max_side + 1, size=2)
    return rng.uniform(0, 10, size=(n, m))


# -- cost matrices ----------------------------------------------------------

def test_cost_matrix_examples():
    bank = MemoryBank(np.array([[3.0, 4.0], [0.0, 0.0]]), [0, 1])
    C = cost_matrix(np.array([[0.0, 0.0]]), bank)
    assert C.values.tolist() == [[5.0, 0.0]]
    same = cost_matrix(np.array([[0.0, 0.0]]), bank, AffineAdapter.identity(2))
    np.testing.assert_array_equal(C.values, same.values)
    with pytest.raises(ShapeError):
        cost_matrix(np.zeros((1, 3)), bank)


def test_cost_matrix_rejects_bad_entries():
    with pytest.raises(NumericError):
        CostMatrix([[1.0, np.nan]])
    with pytest.raises(NumericError):
        CostMatrix([[-1.0]])


# -- sinkhorn ---------------------------------------------------------------

def test_single_row_is_forced_uniform():
    plan = sinkhorn(np.array([[3.0, 0.1, 7.0, 2.0]]), 0.05)
    np.testing.assert_allclose(plan.gamma, [[0.25] * 4], atol=TOL)


def test_two_by_two_approaches_lp_plan():
    C = np.array([[0.0, 1.0], [1.0, 0.0]])
    plan = sinkhorn(C, 0.01 * C.mean())
    np.testing.assert_allclose(plan.gamma, [[0.5, 0.0], [0.0, 0.5]], atol=1e-3)
    assert plan.converged


def test_constant_cost_gives_uniform_plan():
    plan = sinkhorn(np.full((3, 5), 2.0), 0.1)
    np.testing.assert_allclose(plan.gamma, np.full((3, 5), 1 / 15), atol=TOL)


def test_epsilon_must_be_positive():
    with pytest.raises(ValueError):
        sinkhorn(np.ones((2, 2)), 0.0)


def test_non_convergence_is_flagged():
    C = np.random.default_rng(0).uniform(0, 1, (6, 6))
    plan = sinkhorn(C, 1e-3 * C.mean(), max_iter=1, tol=1e-12, anneal=False)
    assert not plan.converged and plan.marginal_residual > 1e-11


def test_tiny_epsilon_stays_finite():
    C = np.random.default_rng(1).uniform(0, 100, (5, 7))
    plan = sinkhorn(C, 1e-4)
    assert np.isfinite(plan.gamma).all()


@given(seed=st.integers(0, 100_000), rel=st.sampled_from([0.01, 0.05, 0.5]))
def test_marginals_hold_on_every_plan(seed, rel):
    C = rand_cost(seed)
    plan = sinkhorn(C, rel * C.mean(), max_iter=10_000, tol=TOL)
    assert (plan.gamma >= 0).all()
    assert marginal_residual(plan.gamma) <= TOL
    assert plan.marginal_residual <= TOL and plan.converged


@given(seed=st.integers(0, 100_000))
def test_sinkhorn_cost_close_to_exact(seed):
    C = rand_cost(seed)
    plan = sinkhorn(C, 0.01 * C.mean(), max_iter=10_000, tol=TOL)
    _, exact = exact_ot(C)
    cost = plan_cost(plan, C)
    # a plan off the feasible set by at most TOL per marginal can undercut the LP by O(n * TOL * max C)
    assert cost >= exact - C.shape[0] * TOL * C.max()
    assert cost - exact <= 0.02 * C.mean()


@given(seed=st.integers(0, 100_000), c=st.floats(0.1, 50.0))
def test_shift_invariance(seed, c):
    C = rand_cost(seed, 6)
    eps = 0.05 * C.mean()
    a = sinkhorn(C, eps, max_iter=10_000)
    b = sinkhorn(C + c, eps, max_iter=10_000)
    np.testing.assert_allclose(a.gamma, b.gamma, atol=1e-5)


@given(seed=st.integers(0, 100_000), lam=st.floats(0.1, 10.0))
def test_scaling_equivariance(seed, lam):
    C = rand_cost(seed, 6)
    eps = 0.05 * C.mean()
    a = sinkhorn(lam * C, eps, max_iter=10_000)
    b = sinkhorn(C, eps / lam, max_iter=10_000)
    np.testing.assert_allclose(a.gamma, b.gamma, atol=1e-6)


# -- exact OT ---------------------------------------------------------------

def test_exact_ot_examples():
    gamma, cost = exact_ot(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert cost == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(gamma, [[0.5, 0.0], [0.0, 0.5]], atol=1e-12)
    gamma, cost = exact_ot(np.array([[4.2]]))
    assert gamma.tolist() == [[1.0]] and cost == pytest.approx(4.2)
    _, cost = exact_ot(np.full((3, 4), 1.5))
    assert cost == pytest.approx(1.5)


def test_exact_ot_matches_permutation_enumeration():
    # square uniform OT has a permutation-matrix optimum (Birkhoff)
    for seed in range(10):
        C = np.random.default_rng(seed).uniform(0, 1, (5, 5))
        best = min(C[range(5), p].sum() for p in itertools.permutations(range(5))) / 5
        assert exact_ot(C)[1] == pytest.approx(best, abs=1e-9)


def test_exact_ot_size_cap():
    with pytest.raises(SizeError):
        exact_ot(np.ones((101, 100)))


# -- hungarian --------------------------------------------------------------

def test_hungarian_examples():
    pairs, cost = hungarian_assignment(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert pairs.as_set() == {(0, 0), (1, 1)} and cost == 2.0
    pairs, cost = hungarian_assignment(np.array([[0.0]]))
    assert pairs.as_set() == {(0, 0)} and cost == 0.0
    pairs, _ = hungarian_assignment(np.random.default_rng(0).uniform(size=(2, 3)))
    assert sorted(pairs.rows.tolist()) == [0, 1] and len(set(pairs.cols.tolist())) == 2


def _padded_brute_force(C):
    n, m = C.shape
    k = max(n, m)
    P = np.zeros((k, k))
    P[:n, :m] = C
    return min(P[range(k), p].sum() for p in itertools.permutations(range(k)))


@given(seed=st.integers(0, 100_000))
def test_hungarian_beats_every_permutation(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 7, size=2)
    C = rng.uniform(0, 10, (n, m))
    pairs, cost = hungarian_assignment(C)
    assert cost == pytest.approx(_padded_brute_force(C), abs=1e-9)
    assert len(pairs) == min(n, m)


# -- discretization ---------------------------------------------------------

def test_discretize_examples():
    assert discretize(np.array([[0.30, 0.20], [0.05, 0.45]])).as_set() == {(0, 0), (1, 1)}
    assert discretize(np.array([[0.40, 0.10], [0.35, 0.15]])).as_set() == {(0, 0), (1, 0), (1, 1)}
    # row 0 is tied; its row pair is (0, 0), and no column argmax lands on (0, 1)
    assert discretize(np.array([[0.5, 0.5], [0.2, 0.8]])).as_set() == {(0, 0), (1, 1)}


def _argmax_lowest(values):
    best = 0
    for k, v in enumerate(values):
        if v > values[best]:
            best = k
    return best


@given(seed=st.integers(0, 100_000), ties=st.booleans())
def test_discretize_is_union_of_argmaxes(seed, ties):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 9, size=2)
    gamma = rng.integers(0, 3, (n, m)).astype(float) if ties else rng.uniform(size=(n, m))
    expected = {(i, _argmax_lowest(gamma[i])) for i in range(n)}
    expected |= {(_argmax_lowest(gamma[:, j]), j) for j in range(m)}
    got = discretize(gamma)
    assert got.as_set() == expected
    assert max(n, m) <= len(got) <= n + m
    assert len(got.as_set()) == len(got)


def test_assignment_cost_examples():
    assert assignment_cost(DiscreteAssignment(np.array([[0, 0]]), (1, 1)), np.array([[2.5]])) == 2.5
    assert assignment_cost(np.zeros((0, 2), int), np.ones((2, 2))) == 0.0
    assert assignment_cost([[0, 0], [1, 1]], np.array([[1.0, 9.0], [9.0, 1.0]])) == 2.0
    with pytest.raises(IndexError):
        assignment_cost([[2, 0]], np.ones((2, 2)))


def test_plan_cost_examples():
    assert plan_cost(np.full((2, 3), 1 / 6), np.full((2, 3), 4.0)) == pytest.approx(4.0)
    assert plan_cost(np.diag([0.5, 0.5]), np.array([[0.0, 1.0], [1.0, 0.0]])) == 0.0
    g = np.random.default_rng(0).uniform(size=(3, 3))
    C = np.random.default_rng(1).uniform(size=(3, 3))
    assert plan_cost(g, 3.5 * C) == pytest.approx(3.5 * plan_cost(g, C))
    with pytest.raises(ShapeError):
        plan_cost(np.ones((2, 2)), np.ones((2, 3)))
