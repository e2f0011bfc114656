import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tipsfuse import tensor as T
from tipsfuse.ot import OtConfig, OtError, cost_matrix, lp_oracle, ot_aggregate, round_to_marginals, sinkhorn, uniform
from tipsfuse.tensor import Tensor


def test_cost_matrix_basics():
    a = np.array([[0.0, 0.0], [3.0, 4.0]])
    C = cost_matrix(a, a)
    assert C[0, 1] == 5.0 and np.all(np.diag(C) == 0)
    with pytest.raises(OtError):
        cost_matrix(np.ones((2, 3)), np.ones((2, 2)))


def test_cost_matrix_triangle_inequality():
    rng = np.random.default_rng(0)
    A, B, c = rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), rng.normal(size=(1, 3))
    C = cost_matrix(A, B)
    assert (C >= 0).all()
    via = cost_matrix(A, c) + cost_matrix(c, B)
    assert (C <= via + 1e-12).all()


def test_single_cell_plan():
    p = sinkhorn(np.array([[7.0]]), cfg=OtConfig(0.01))
    assert p.plan.tolist() == [[1.0]]


def test_antidiagonal_cost_gives_diagonal_plan():
    p = sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), cfg=OtConfig(0.01))
    np.testing.assert_allclose(p.plan, [[0.5, 0.0], [0.0, 0.5]], atol=1e-3)
    assert p.marginal_error() < 1e-6
    ex = lp_oracle([[0.0, 1.0], [1.0, 0.0]])
    assert ex.cost == 0.0
    np.testing.assert_allclose(ex.plan, [[0.5, 0.0], [0.0, 0.5]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1), st.sampled_from([1.0, 0.1, 0.01]))
def test_marginals_hold(n, m, seed, eps):
    rng = np.random.default_rng(seed)
    C = rng.random((n, m)) * 3
    p = sinkhorn(C, cfg=OtConfig(eps, max_iters=200))
    assert p.marginal_error() < 1e-6
    assert (p.plan >= 0).all()


def test_custom_marginals():
    mu, nu = np.array([0.2, 0.8]), np.array([0.5, 0.3, 0.2])
    p = sinkhorn(np.random.default_rng(1).random((2, 3)), mu, nu, OtConfig(0.05))
    np.testing.assert_allclose(p.plan.sum(axis=1), mu, atol=1e-6)
    np.testing.assert_allclose(p.plan.sum(axis=0), nu, atol=1e-6)


def test_bad_inputs_rejected():
    with pytest.raises(ValueError):
        OtConfig(epsilon=0.0)
    with pytest.raises(OtError):
        sinkhorn(np.ones((2, 2)), mu=np.array([0.5, 0.6]))
    with pytest.raises(OtError):
        sinkhorn(np.array([[np.nan, 1.0]]))


def test_tiny_epsilon_handled_in_log_domain():
    C = np.random.default_rng(2).random((4, 4)) * 100
    p = sinkhorn(C, cfg=OtConfig(1e-3, max_iters=500))
    assert p.marginal_error() < 1e-6
    assert p.cost >= lp_oracle(C).cost - 1e-12


def test_gap_shrinks_with_epsilon():
    rng = np.random.default_rng(5)
    for _ in range(5):
        C = rng.random((3, 4))
        exact = lp_oracle(C).cost
        gaps = [sinkhorn(C, cfg=OtConfig(eps, max_iters=500)).cost - exact for eps in (0.1, 0.01, 0.001)]
        assert all(g >= -1e-12 for g in gaps)
        assert gaps[2] <= gaps[1] + 1e-9 <= gaps[0] + 2e-9


def test_rounding_restores_marginals():
    rng = np.random.default_rng(3)
    P = rng.random((3, 5))
    P /= P.sum()
    mu, nu = uniform(3), uniform(5)
    R = round_to_marginals(P, mu, nu)
    np.testing.assert_allclose(R.sum(axis=1), mu, atol=1e-15)
    np.testing.assert_allclose(R.sum(axis=0), nu, atol=1e-15)
    assert (R >= 0).all()


def test_lp_oracle_single_row_and_size_limit():
    nu = np.array([0.1, 0.6, 0.3])
    ex = lp_oracle(np.random.default_rng(0).random((1, 3)), np.array([1.0]), nu)
    np.testing.assert_allclose(ex.plan[0], nu)
    with pytest.raises(OtError):
        lp_oracle(np.ones((9, 9)))


def test_lp_oracle_matches_highs_on_larger_problem():
    from scipy.optimize import linprog
    C = np.random.default_rng(8).random((4, 4))
    n = m = 4
    A = np.vstack([np.kron(np.eye(n), np.ones(m)), np.kron(np.ones(n), np.eye(m))])
    res = linprog(C.ravel(), A_eq=A, b_eq=np.r_[uniform(n), uniform(m)], bounds=(0, None), method="highs")
    assert lp_oracle(C).cost == pytest.approx(res.fun, abs=1e-12)


def test_aggregate_uniform_plan_gives_column_means():
    F = np.random.default_rng(0).normal(size=(4, 3))
    P = np.full((4, 2), 1 / 8)
    out = ot_aggregate(P, Tensor(F)).data
    np.testing.assert_allclose(out, np.tile(F.mean(axis=0), (2, 1)))


def test_aggregate_identity_plan_returns_features():
    F = np.random.default_rng(0).normal(size=(3, 2))
    np.testing.assert_allclose(ot_aggregate(np.eye(3) / 3, Tensor(F)).data, F)


def test_aggregate_with_solved_plan_close_to_oracle():
    F = np.array([[1.0, 2.0], [-3.0, 0.5]])
    p = sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), cfg=OtConfig(0.01))
    assert np.abs(ot_aggregate(p, Tensor(F)).data - F).max() < 1e-2


def test_aggregate_gradient_treats_plan_as_constant():
    F = Tensor(np.random.default_rng(0).normal(size=(3, 2)), requires_grad=True)
    P = np.random.default_rng(1).random((3, 4))
    P /= P.sum()

    def f():
        return T.sum_all(T.elemwise_mul(ot_aggregate(P, F), ot_aggregate(P, F)))

    assert T.finite_difference_check(f, [F]) < 1e-8
    with pytest.raises(OtError):
        ot_aggregate(np.ones((2, 2)) / 4, F)
