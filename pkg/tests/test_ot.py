import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ofm.gp import GridSpec, KernelConfig, build_gram, cholesky_sample
from ofm.ot import CouplingPlan, couple_minibatch, min_cost_assignment, sq_cost_matrix


def brute_force(cost):
    n = len(cost)
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def test_self_cost_zero_diagonal(rng):
    b = rng.normal(size=(5, 16))
    np.testing.assert_array_equal(np.diag(sq_cost_matrix(b, b)), 0)


def test_constant_offset_cost():
    b0 = np.zeros((2, 10))
    b1 = np.full((2, 10), 3.0)
    np.testing.assert_allclose(sq_cost_matrix(b0, b1), 9.0)


def test_cost_matches_double_loop(rng):
    a, b = rng.normal(size=(6, 1, 12)), rng.normal(size=(6, 1, 12))
    ref = np.array([[np.mean((a[i] - b[j]) ** 2) for j in range(6)] for i in range(6)])
    np.testing.assert_allclose(sq_cost_matrix(a, b), ref, atol=1e-12)


def test_cost_shape_errors():
    with pytest.raises(ValueError):
        sq_cost_matrix(np.zeros((3, 4)), np.zeros((3, 5)))
    with pytest.raises(ValueError):
        sq_cost_matrix(np.zeros((3, 4)), np.zeros((2, 4)))


def test_assignment_simple_cases():
    c = np.full((4, 4), 100.0)
    np.fill_diagonal(c, 0)
    plan = min_cost_assignment(c)
    np.testing.assert_array_equal(plan.perm, np.arange(4))
    assert plan.cost == 0
    plan = min_cost_assignment(np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(plan.perm, [0, 1])
    assert plan.cost == 0


def test_assignment_matches_enumeration_5x5():
    r = np.random.default_rng(5)
    for _ in range(100):
        c = r.uniform(size=(5, 5))
        assert min_cost_assignment(c).cost == brute_force(c)


@given(seed=st.integers(0, 10 ** 6), n=st.integers(1, 7))
def test_assignment_optimal_small(seed, n):
    c = np.random.default_rng(seed).exponential(size=(n, n))
    plan = min_cost_assignment(c)
    assert plan.cost == pytest.approx(brute_force(c), rel=0, abs=1e-12)
    assert sorted(plan.perm) == list(range(n))
    assert plan.cost == pytest.approx(c[np.arange(n), plan.perm].sum(), abs=0)


def test_assignment_errors():
    with pytest.raises(ValueError):
        min_cost_assignment(np.array([[0.0, np.inf], [1.0, 0.0]]))
    with pytest.raises(ValueError):
        min_cost_assignment(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        CouplingPlan(np.array([0, 0]), 0.0)


def test_recovers_shuffle(rng):
    b0 = rng.normal(size=(8, 1, 16))
    shuffle = rng.permutation(8)
    h0, h1, plan = couple_minibatch(b0, b0[shuffle])
    np.testing.assert_array_equal(h1, h0)
    assert plan.cost == 0


def test_singleton_batch(rng):
    a, b = rng.normal(size=(1, 5)), rng.normal(size=(1, 5))
    _, _, plan = couple_minibatch(a, b)
    assert plan.cost == pytest.approx(np.mean((a - b) ** 2))


@given(seed=st.integers(0, 10 ** 6))
def test_ot_not_worse_than_identity(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(6, 1, 8)), r.normal(size=(6, 1, 8))
    _, h1, plan = couple_minibatch(a, b, check=True)
    assert plan.cost <= np.trace(sq_cost_matrix(a, b)) + 1e-12
    # marginals preserved: each row of b used once
    assert sorted(map(tuple, h1.reshape(6, -1))) == sorted(map(tuple, b.reshape(6, -1)))


def test_larger_batches_give_cheaper_pairs():
    grid = GridSpec((32,))
    ref = build_gram(grid, KernelConfig("matern", 0.01, 0.5))
    data = build_gram(grid, KernelConfig("matern", 0.3, 1.5))
    r = np.random.default_rng(0)
    per_pair = {32: [], 128: []}
    for _ in range(50):
        for b in per_pair:
            _, _, plan = couple_minibatch(cholesky_sample(ref, b, r), cholesky_sample(data, b, r))
            per_pair[b].append(plan.cost / b)
    assert np.mean(per_pair[128]) <= np.mean(per_pair[32])
