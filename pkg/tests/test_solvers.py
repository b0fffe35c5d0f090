import json
import math

import numpy as np
import pytest

from _instances import bump_pair, grid, ot_1d, random_simplex
from scalingot.costs import ExplicitMatrix, SquaredEuclidean
from scalingot.kernel import ProblemSpec
from scalingot.measures import DiscreteMeasure
from scalingot.proxdiv import StarvationError
from scalingot.solvers import (DivergedError, FixedIterations, LInfMarginal, MassTarget, PrimalDualGap,
                               SolveReport, SolverConfig, barycenter_specs, default_eps_lists,
                               eps_scaling, gradient_flow, gradient_flow_step, parse_eps,
                               scaling_algorithm, scaling_algorithm_stabilized, solve_barycenter,
                               solve_full, solve_multi_marginal, solve_wfr_barycenter)

# <c, pi> of the entropic optimizer on ot_1d(16) at eps = 0.01, product
# reference measure; dense log-domain Sinkhorn, 20000 sweeps, frozen
OT16_EPS001 = 0.16350991916791985
# primal value of the KL-fidelity problem (lam = 0.5, nu scaled by 1.5,
# Lebesgue reference) on the same grid at eps = 0.01; dense scaling, frozen
UOT16_EPS001 = 0.20037361810757057


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(theta=0.0)
    with pytest.raises(ValueError):
        SolverConfig(tau=1.0)
    with pytest.raises(ValueError):
        SolverConfig(absorption_check_every=0)
    with pytest.raises(ValueError):
        SolverConfig(eps_lists=[[1.0, 1.0]])


def test_parse_eps():
    assert parse_eps("0.5h2", 0.1) == pytest.approx(0.005)
    assert parse_eps("0.25", 0.1) == 0.25
    with pytest.raises(ValueError):
        parse_eps("fast", 0.1)


def test_default_eps_lists():
    spec, g = ot_1d(64)
    h2 = g.spacing ** 2
    lists = default_eps_lists(spec, 0.1 * h2)
    assert len(lists) == spec.depth + 1
    assert lists[0][-1] == 0.1 * h2
    flat = [e for lvl in range(spec.depth, -1, -1) for e in lists[lvl]]
    assert all(b < a for a, b in zip(flat, flat[1:]))
    assert flat[0] == spec.cost.scale()
    for lvl in range(1, spec.depth + 1):
        assert all(e >= (g.spacing * 2 ** lvl) ** 2 for e in lists[lvl])
    finest = default_eps_lists(spec, 0.1 * h2, finest_only=True)
    assert all(not l for l in finest[1:]) and finest[0] == flat


def test_naive_matches_oracle():
    spec, g = ot_1d(16)
    p = spec.level(0)
    state, rep = scaling_algorithm(p, 0.01, config=SolverConfig(stop_rule=LInfMarginal(1e-13)))
    assert rep.converged
    assert rep.primal_value == pytest.approx(OT16_EPS001, rel=1e-10)


def test_stabilized_matches_oracle_and_gap():
    spec, g = ot_1d(16)
    state, rep = solve_full(spec, [[0.01]] + [[]] * spec.depth,
                            SolverConfig(theta=1e-30, stop_rule=LInfMarginal(1e-13)))
    assert rep.primal_value == pytest.approx(OT16_EPS001, rel=1e-10)
    assert rep.marginal_error_linf <= 1e-13
    assert 0 <= rep.truncation_bound <= 1e-29
    assert abs(rep.primal_dual_gap) <= 1e-10


def test_unbalanced_matches_oracle():
    g = grid(16)
    mu, nu = bump_pair(16)
    spec = ProblemSpec.unbalanced(SquaredEuclidean(g, g), mu, 1.5 * nu, 0.5)
    cfg = SolverConfig(theta=1e-30, stop_rule=PrimalDualGap(1e-12))
    state, rep = solve_full(spec, [[0.01]] + [[]] * spec.depth, cfg)
    assert rep.converged
    # the gap bounds the regularized objective; by Pinsker the unregularized
    # value is only pinned to about sqrt(2 gap / eps)
    assert rep.primal_value == pytest.approx(UOT16_EPS001, rel=1e-6)
    assert 0 <= rep.primal_dual_gap <= 1e-12 * max(1.0, rep.primal_value)


def test_coarse_to_fine_agrees_with_single_level():
    spec, g = ot_1d(64)
    eps = 0.5 * g.spacing ** 2
    cfg = SolverConfig(stop_rule=LInfMarginal(1e-10))
    s1, r1 = solve_full(spec, default_eps_lists(spec, eps), cfg)
    s2, r2 = solve_full(spec, default_eps_lists(spec, eps, finest_only=True), cfg)
    assert r1.primal_value == pytest.approx(r2.primal_value, rel=1e-6)
    a1, a2 = s1.duals()[0], s2.duals()[0]
    d = a1 - a2
    assert np.ptp(d) <= 1e-6
    levels = [e["level"] for e in r1.per_eps_iteration_counts]
    assert levels[0] > 0 and levels[-1] == 0
    assert all(b <= a for a, b in zip(levels, levels[1:]))


def test_naive_diverges_and_stabilized_does_not():
    spec, g = ot_1d(64)
    eps = 0.1 * g.spacing ** 2
    with pytest.raises(DivergedError, match="iteration"):
        scaling_algorithm(spec.level(0), eps)
    _, rep = solve_full(spec, eps_final=eps)
    assert rep.converged and rep.marginal_error_linf <= 1e-7


def test_stop_rules():
    spec, g = ot_1d(16)
    p = spec.level(0)
    _, rep = scaling_algorithm_stabilized(p, 0.01, config=SolverConfig(stop_rule=FixedIterations(7)))
    assert rep.iterations == 7 and rep.converged
    _, rep = scaling_algorithm_stabilized(p, 0.01, config=SolverConfig(stop_rule=MassTarget(0.5)))
    assert rep.converged and rep.iterations == 1
    _, rep = scaling_algorithm_stabilized(p, 0.01, config=SolverConfig(stop_rule=LInfMarginal(1e-15),
                                                                        max_iterations=5))
    assert rep.iterations == 5 and not rep.converged
    _, rep = scaling_algorithm_stabilized(p, 0.01, config=SolverConfig(stop_rule=PrimalDualGap(1e-8)))
    assert rep.converged and rep.primal_dual_gap <= 1e-8


def test_absorption_keeps_iterates_bounded():
    spec, g = ot_1d(32)
    tau = 10.0
    seen = []

    def watch(event, state, kern):
        if event == "iteration":
            seen.append(max(state.u_tilde.max(), state.v_tilde.max()))

    _, rep = eps_scaling(spec.level(0), [0.1, 0.01, 0.001],
                         config=SolverConfig(tau=tau, stop_rule=LInfMarginal(1e-9),
                                             absorption_check_every=1), callback=watch)
    assert rep.absorption_count > 3
    # one update past the bound at most before absorbing
    assert max(seen) < 1e8


def test_starvation_raises():
    spec, g = ot_1d(16)
    p = spec.level(0)
    # duals so low that no entry in a row is representable
    alpha0 = np.zeros(16)
    alpha0[3] = -10.0
    with pytest.raises(StarvationError, match="row 3"):
        scaling_algorithm_stabilized(p, 1e-3, alpha0=alpha0)


def test_explicit_matrix_with_forbidden_pairs():
    rng = np.random.default_rng(0)
    c = rng.random((6, 6))
    c[0, 3:] = np.inf
    mu, nu = np.full(6, 1 / 6), np.full(6, 1 / 6)
    spec = ProblemSpec.optimal_transport(ExplicitMatrix(c), mu, nu)
    state, rep = solve_full(spec, eps_final=1e-3)
    assert rep.converged
    k = rep.kernel
    assert not np.any((k.rows == 0) & (k.cols >= 3))


def test_zero_mass_points_are_inactive():
    g = grid(16)
    mu, nu = bump_pair(16)
    mu[:4] = 0.0
    mu /= mu.sum()
    spec = ProblemSpec.optimal_transport(SquaredEuclidean(g, g), mu, nu)
    state, rep = solve_full(spec, eps_final=g.spacing ** 2)
    assert rep.converged
    assert np.all(state.alpha_hat[:4] == -np.inf)
    assert not np.any(rep.kernel.rows < 4)


def test_report_json_roundtrip():
    spec, g = ot_1d(16)
    _, rep = solve_full(spec, eps_final=g.spacing ** 2)
    d = json.loads(rep.to_json())
    assert set(d) == {"iterations", "finalEps", "marginalErrorLInf", "primalDualGap", "truncationBound",
                      "primalValue", "absorptionCount", "perEpsIterationCounts"}
    back = SolveReport.from_dict(d)
    assert back.to_dict() == rep.to_dict()
    assert sum(e["iterations"] for e in d["perEpsIterationCounts"]) == d["iterations"]
    assert json.loads(SolveReport().to_json())["primalValue"] is None


def test_barycenter_mean_of_translates():
    g = grid(64)
    x = np.linspace(0, 1, 64)
    a = np.exp(-(x - 0.25) ** 2 / 0.004)
    b = np.exp(-(x - 0.65) ** 2 / 0.004)
    a, b = a / a.sum(), b / b.sum()
    specs = barycenter_specs([a, b], g)
    res = solve_barycenter(specs, [0.25, 0.75], default_eps_lists(specs[0], 0.5 * g.spacing ** 2))
    w = res.barycenter.weights
    assert res.report.converged
    assert w.sum() == pytest.approx(1.0, abs=1e-6)
    # in one dimension the barycenter mean is the weighted mean of the inputs
    assert float(w @ x) == pytest.approx(0.25 * float(a @ x) + 0.75 * float(b @ x), abs=1e-3)
    assert abs(x[np.argmax(w)] - 0.55) <= 2 * g.spacing


def test_wfr_barycenter_identical_inputs():
    g = grid(32)
    mu, _ = bump_pair(32)
    specs = barycenter_specs([mu, mu], g, cost="wfr", big_lambda=1.0)
    res = solve_wfr_barycenter(specs, [0.5, 0.5], 1.0, default_eps_lists(specs[0], g.spacing ** 2))
    assert res.report.converged
    assert res.report.primal_dual_gap <= 1e-6 * max(1.0, abs(res.report.primal_value))
    assert float(np.abs(res.barycenter.weights - mu).sum()) <= 0.05


def test_gradient_flow_conserves_mass_and_spreads():
    g = grid(32)
    x = np.linspace(0, 1, 32)
    mu0 = np.exp(-(x - 0.5) ** 2 / 0.003)
    mu0 /= mu0.sum()
    frames, reports = gradient_flow(g, DiscreteMeasure(mu0, g), g.spacing ** 2, 0.05, np.zeros(32), 5)
    leb = g.lebesgue()
    energy = [float(np.sum(f.weights ** 2 / leb)) for f in frames]
    assert all(abs(f.weights.sum() - 1.0) <= 1e-9 for f in frames)
    assert all(e2 < e1 for e1, e2 in zip(energy, energy[1:]))
    step = gradient_flow_step(g, frames[-1], g.spacing ** 2, 0.05, np.zeros(32), warm=reports and None)
    assert step.report.converged


def test_gradient_flow_step_eps_list_validation():
    g = grid(8)
    with pytest.raises(ValueError):
        gradient_flow_step(g, np.full(8, 1 / 8), 0.01, 0.1, np.zeros(8), eps_list=[0.1, 0.05])


def test_multi_marginal_two_way_matches_oracle():
    spec, g = ot_1d(16)
    x = np.linspace(0, 1, 16)
    c = (x[:, None] - x[None, :]) ** 2
    res = solve_multi_marginal(c, [spec.fx.target, spec.fy.target], 0.01,
                               SolverConfig(theta=1e-300, stop_rule=LInfMarginal(1e-13)))
    assert res.report.converged
    assert float(np.sum(c[tuple(res.indices.T)] * res.values)) == pytest.approx(OT16_EPS001, rel=1e-10)


def test_multi_marginal_three_way():
    rng = np.random.default_rng(4)
    x = np.linspace(0, 1, 8)
    c = ((x[:, None, None] - x[None, :, None]) ** 2 + (x[None, :, None] - x[None, None, :]) ** 2)
    ms = [random_simplex(rng, 8) for _ in range(3)]
    res = solve_multi_marginal(c, ms, [0.1, 0.01, 0.002])
    assert res.report.converged and res.marginal_error_linf <= 1e-9
    for i in range(3):
        marg = np.bincount(res.indices[:, i], weights=res.values, minlength=8)
        np.testing.assert_allclose(marg, ms[i], atol=1e-9)
    with pytest.raises(ValueError):
        solve_multi_marginal(np.zeros((101, 100, 100)), [np.ones(101), np.ones(100), np.ones(100)], 0.1)
    with pytest.raises(ValueError):
        solve_multi_marginal(c, ms[:2], 0.1)
