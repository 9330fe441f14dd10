import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kernrank.chebkit import make_grid
from kernrank.model import logistic, logistic_kernel
from kernrank.mstep_cheb import (
    MonotoneParams,
    fit_kernel_cheb,
    maximize,
    monotone_values,
    objective,
    objective_and_gradient,
    params_from_log_odds,
    penalty,
    penalty_weights,
)


def random_params(L, seed, p=8, scale=1.0):
    rng = np.random.default_rng(seed)
    return MonotoneParams(scale * rng.normal(size=(L, L)), p)


def fd_gradient(fun, x, h=1e-6):
    out = np.empty_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (fun(x + e) - fun(x - e)) / (2 * h)
    return out


def test_zero_parameters_give_flat_kernel():
    f = monotone_values(MonotoneParams.zeros(10))
    assert np.array_equal(f, np.zeros((10, 10)))


def test_two_node_collapse():
    for c in (0.7, -1.3):
        g = np.zeros((2, 2))
        g[0, 1] = c
        f = monotone_values(MonotoneParams(g))
        assert abs(f[0, 1]) == pytest.approx(abs(c), rel=1e-14)
        assert f[1, 0] > 0 > f[0, 1]  # the higher node is the stronger player


def test_lower_triangle_ignored():
    g = np.random.default_rng(0).normal(size=(6, 6))
    a = monotone_values(MonotoneParams(g))
    b = monotone_values(MonotoneParams(np.triu(g, 1)))
    assert np.array_equal(a, b)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 4, 8]), st.floats(0.01, 5.0))
def test_antisymmetric_and_monotone(seed, p, scale):
    L = 12
    f = monotone_values(random_params(L, seed, p, scale))
    assert np.array_equal(f, -f.T)
    assert np.all(np.diag(f) == 0)
    assert np.all(np.diff(f, axis=0) >= -1e-12)  # non-decreasing in the first skill
    assert np.all(np.diff(f, axis=1) <= 1e-12)  # non-increasing in the second


def test_penalty_weights():
    lam = penalty_weights(32)
    assert lam[0, 0] == 0 and (lam >= 0).all()
    assert lam[3, 4] == pytest.approx((9 + 16) ** 2 / 64)


def test_penalty_examples(grid):
    L = grid.L
    assert penalty(np.zeros((L, L)), grid) == 0.0
    assert penalty(np.full((L, L), 4.2), grid) == pytest.approx(0.0, abs=1e-15)
    X, _ = np.meshgrid(grid.nodes, grid.nodes, indexing="ij")
    assert penalty(2 * X - 1, grid) == pytest.approx(-1 / 64, rel=1e-10)


def test_symmetric_evidence_prefers_flat_kernel(grid):
    rng = np.random.default_rng(1)
    Q = rng.random((grid.L, grid.L))
    Q = Q + Q.T
    base = objective(np.zeros((grid.L, grid.L)), Q, grid)
    for _ in range(20):
        f = 0.3 * rng.normal(size=(grid.L, grid.L))
        f = f - f.T
        assert objective(f, Q, grid) < base
    res = maximize(Q, MonotoneParams.zeros(grid.L), grid)
    assert np.abs(res.kernel.node_values - 0.5).max() < 0.02


def test_empty_evidence_returns_flat(grid):
    k = fit_kernel_cheb(np.zeros((grid.L, grid.L)), random_params(grid.L, 2), grid)
    np.testing.assert_array_equal(k.node_values, 0.5)


def test_size_mismatch(grid):
    with pytest.raises(ValueError):
        maximize(np.ones((grid.L, grid.L)), MonotoneParams.zeros(5), grid)


@pytest.mark.parametrize("seed", range(4))
def test_gradient_matches_finite_differences(seed):
    grid = make_grid(8)
    rng = np.random.default_rng(seed)
    Q = 50 * rng.random((8, 8))
    params = random_params(8, seed + 10, scale=0.8)
    L, p = 8, params.p

    def J(v):
        return objective_and_gradient(MonotoneParams.from_vector(v, L, p), Q, grid)[0]

    v = params.vector()
    _, grad = objective_and_gradient(params, Q, grid)
    fd = fd_gradient(J, v)
    np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-6 * np.abs(fd).max())


def test_objective_value_matches_direct_formula(grid):
    rng = np.random.default_rng(3)
    Q = rng.random((grid.L, grid.L))
    params = random_params(grid.L, 4, scale=0.2)
    value, _ = objective_and_gradient(params, Q, grid)
    assert value == pytest.approx(objective(monotone_values(params), Q, grid), rel=1e-12)


def test_warm_start_inverts_monotone_targets(grid):
    f = logistic_kernel(grid).log_odds
    back = monotone_values(params_from_log_odds(f))
    np.testing.assert_allclose(back, f, atol=1e-9)


def test_newton_ascent_and_recovery(grid):
    # Q from a smooth density times the logistic truth: the data favour that kernel
    X, Y = np.meshgrid(grid.nodes, grid.nodes, indexing="ij")
    Q = 4000 * logistic(X, Y)
    res = maximize(Q, MonotoneParams.zeros(grid.L), grid)
    assert res.converged
    assert np.all(np.diff(res.trace) >= 0)
    assert np.abs(res.kernel.node_values - logistic(X, Y)).mean() < 0.05
