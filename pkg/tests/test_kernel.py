import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _instances import grid, ot_1d, random_simplex
from scalingot.costs import ExplicitMatrix, SquaredEuclidean, WassersteinFisherRao
from scalingot.kernel import (ProblemSpec, SparseKernel, apply_kernel, apply_kernel_transposed,
                              discarded_mass_exact, get_kernel_dense, get_stabilized_kernel_dense,
                              get_truncated_kernel, primal_dual_gap, primal_value, stabilized_exponent,
                              truncated_support_bruteforce, truncation_bound, write_coupling)
from scalingot.measures import GridGeometry
from scalingot.solvers import ScalingState


def test_dense_kernel_formula():
    spec, g = ot_1d(8)
    p = spec.level(0)
    k = get_kernel_dense(p, 0.1)
    x = np.linspace(0, 1, 8)
    expect = np.exp(-(x[:, None] - x[None, :]) ** 2 / 0.1) * np.outer(spec.rho_x, spec.rho_y)
    np.testing.assert_allclose(k, expect, rtol=1e-14)


def test_stabilized_exponent_edge_cases():
    e = stabilized_exponent(np.array([1.0, np.inf, 1.0, np.inf]), np.array([0.5, np.inf, -np.inf, 1.0]),
                            np.array([0.25, 0.0, np.inf, 0.0]))
    assert e[0] == 0.25
    assert np.all(e[1:] == np.inf)


def test_stabilized_kernel_cancellation():
    spec, g = ot_1d(8)
    p = spec.level(0)
    eps = 1e-4
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=8), rng.normal(size=8)
    k = get_stabilized_kernel_dense(p, a, b, eps)
    c = p.dense_cost()
    with np.errstate(over="ignore"):
        expect = np.exp((a[:, None] + b[None, :] - c) / eps) * np.outer(p.rho_x, p.rho_y)
    finite = np.isfinite(expect)
    np.testing.assert_allclose(k[finite], expect[finite], rtol=1e-10)
    # huge duals that cancel in the exponent but not in the scalings
    big = 1e4
    k = get_stabilized_kernel_dense(p, np.full(8, big), np.full(8, -big), 1e-3)
    assert np.all(np.isfinite(k)) and k[3, 3] == pytest.approx(p.rho_x[3] * p.rho_y[3])


def test_sparse_kernel_ops():
    rows, cols = [1, 0, 1], [2, 1, 0]
    k = SparseKernel(rows, cols, [3.0, 1.0, 2.0], (2, 3), costs=[0.3, 0.1, 0.2])
    assert k.rows.tolist() == [0, 1, 1] and k.cols.tolist() == [1, 0, 2]
    assert k.costs.tolist() == [0.1, 0.2, 0.3]
    v, u = np.array([1.0, 2.0, 3.0]), np.array([1.0, 10.0])
    dense = k.todense()
    np.testing.assert_array_equal(apply_kernel(k, v), dense @ v)
    np.testing.assert_array_equal(apply_kernel_transposed(k, u), dense.T @ u)
    assert k.row_counts().tolist() == [1, 2] and k.col_counts().tolist() == [1, 1, 1]
    np.testing.assert_array_equal(k.coupling_values(u, v), [2.0, 20.0, 90.0])
    with pytest.raises(ValueError):
        SparseKernel([0], [0], [np.inf], (1, 1))
    with pytest.raises(ValueError):
        SparseKernel([0], [0], [0.0], (1, 1))


def _random_problem(rng, shape_x, shape_y, cost_cls=SquaredEuclidean):
    gx, gy = GridGeometry(shape_x, 0.1), GridGeometry(shape_y, 0.13)
    c = cost_cls(gx, gy)
    mu = random_simplex(rng, gx.size)
    nu = random_simplex(rng, gy.size)
    return ProblemSpec.optimal_transport(c, mu, nu)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([((16,), (11,)), ((5, 6), (4, 4)), ((3, 2, 4), (4, 3, 2))]),
       st.floats(1e-3, 1.0), st.sampled_from([1e-2, 1e-10, 1e-40]))
def test_truncated_kernel_matches_bruteforce(seed, shapes, eps, theta):
    rng = np.random.default_rng(seed)
    spec = _random_problem(rng, *shapes)
    for lvl in range(spec.depth + 1):
        p = spec.level(lvl)
        alpha = rng.normal(scale=0.3, size=p.nx)
        alpha[rng.random(p.nx) < 0.1] = -np.inf
        # c-transform plus a perturbation of order eps, as after an absorption
        beta = np.min(p.dense_cost() - alpha[:, None], axis=0) + eps * rng.normal(size=p.ny)
        beta[~np.isfinite(beta)] = 0.0
        k = get_truncated_kernel(p, alpha, beta, eps, theta)
        rows, cols = truncated_support_bruteforce(p, alpha, beta, eps, theta)
        assert set(zip(k.rows.tolist(), k.cols.tolist())) == set(zip(rows.tolist(), cols.tolist()))


def test_truncated_kernel_wfr_and_matrix():
    rng = np.random.default_rng(1)
    spec = _random_problem(rng, (20,), (20,), WassersteinFisherRao)
    for lvl in range(spec.depth + 1):
        p = spec.level(lvl)
        a, b = rng.normal(size=p.nx), rng.normal(size=p.ny)
        k = get_truncated_kernel(p, a, b, 0.3, 1e-5)
        rows, _ = truncated_support_bruteforce(p, a, b, 0.3, 1e-5)
        assert k.nnz == rows.size
    c = rng.random((9, 7))
    spec = ProblemSpec.optimal_transport(ExplicitMatrix(c), random_simplex(rng, 9), random_simplex(rng, 7))
    p = spec.level(0)
    k = get_truncated_kernel(p, np.zeros(9), np.zeros(7), 0.1, math.exp(-5.0))
    assert k.nnz == int(np.sum(c <= 0.5))


def test_truncated_kernel_values():
    spec, g = ot_1d(16)
    p = spec.level(0)
    k = get_truncated_kernel(p, np.zeros(16), np.zeros(16), 0.01, 1e-300)
    np.testing.assert_allclose(k.todense(), get_kernel_dense(p, 0.01), rtol=1e-14)
    with pytest.raises(ValueError):
        get_truncated_kernel(p, np.zeros(16), np.zeros(16), 0.01, 0.0)


def test_truncation_bound_and_discarded_mass():
    rng = np.random.default_rng(2)
    spec = _random_problem(rng, (12,), (12,))
    p = spec.level(0)
    theta = 1e-3
    a, b = rng.normal(scale=0.01, size=12), rng.normal(scale=0.01, size=12)
    k = get_truncated_kernel(p, a, b, 0.01, theta)
    state = ScalingState(rng.random(12) + 0.5, rng.random(12) + 0.5, a, b, 0.01)
    disc = discarded_mass_exact(p, state, k)
    full = get_stabilized_kernel_dense(p, a, b, 0.01)
    assert disc == pytest.approx(state.u_tilde @ full @ state.v_tilde
                                 - k.coupling_values(state.u_tilde, state.v_tilde).sum(), rel=1e-9)
    assert 0 < disc <= truncation_bound(p, state.u_tilde, state.v_tilde, theta)
    assert truncation_bound(p, np.ones(12), np.ones(12), theta) == theta * p.rho_total()


def test_gap_equals_primal_minus_dual():
    rng = np.random.default_rng(3)
    g = grid(10)
    mu, nu = random_simplex(rng, 10), random_simplex(rng, 10) * 1.5
    lam, eps = 0.4, 0.05
    spec = ProblemSpec.unbalanced(SquaredEuclidean(g, g), mu, nu, lam)
    p = spec.level(0)
    a, b = rng.normal(scale=0.05, size=10), rng.normal(scale=0.05, size=10)
    kern = get_truncated_kernel(p, np.zeros(10), np.zeros(10), eps, 1e-300)
    kd = kern.todense()
    pi = kd * np.exp(rng.normal(scale=0.3, size=kd.shape))
    # independent evaluation of E(pi) and J(alpha, beta)
    kl = lambda m, n: float(np.sum(m * np.log(m / n) - m + n))
    e = lam * kl(pi.sum(1), mu) + lam * kl(pi.sum(0), nu) + eps * kl(pi, kd)
    fstar = lambda t, m: lam * float(np.sum((np.exp(t / lam) - 1) * m))
    j = (-fstar(-a, mu) - fstar(-b, nu)
         - eps * float(np.sum((np.exp((a[:, None] + b[None, :]) / eps) - 1) * kd)))
    gap = primal_dual_gap(p, kern, pi[kern.rows, kern.cols], a, b, eps)
    assert gap == pytest.approx(e - j, rel=1e-10)
    assert gap > 0
    c = p.dense_cost()
    assert primal_value(p, kern, pi[kern.rows, kern.cols]) == pytest.approx(
        lam * kl(pi.sum(1), mu) + lam * kl(pi.sum(0), nu) + float(np.sum(c * pi)), rel=1e-12)


def test_dense_gate():
    g = GridGeometry((70, 70))
    spec = ProblemSpec.optimal_transport(SquaredEuclidean(g, g), np.ones(4900), np.ones(4900))
    with pytest.raises(MemoryError):
        spec.level(0).dense_cost()


def test_level_problem_coarsening():
    spec, g = ot_1d(16)
    p = spec.level(2)
    assert p.shape == (4, 4)
    assert p.fx.target.sum() == pytest.approx(1.0)
    assert p.rho_total() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        spec.level(5)


def test_write_coupling(tmp_path):
    k = SparseKernel([0, 1], [1, 0], [1.0, 1.0], (2, 2))
    path = tmp_path / "pi.txt"
    write_coupling(path, k, [0.25, 0.1])
    assert path.read_text() == "0 1 0.25\n1 0 0.1\n"
