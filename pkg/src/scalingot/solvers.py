"""Scaling algorithms: naive, stabilized, eps-scaling and the multi-scale driver.

Also home of the application drivers built on the same iteration: Wasserstein
and KL-fidelity barycenters, porous-medium JKO steps and a small
multi-marginal solver.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .costs import CostFunction, SquaredEuclidean, make_cost
from .hierarchy import refine_dual
from .kernel import (LevelProblem, ProblemSpec, SparseKernel, get_kernel_dense,
                     get_truncated_kernel, primal_dual_gap, primal_value, stabilized_exponent,
                     truncation_bound)
from .measures import DiscreteMeasure, GridGeometry
from .proxdiv import (BarycenterConsensus, FixedMarginal, KLFidelity, PorousMediumProx,
                      StarvationError, WFRBarycenterConsensus)


class DivergedError(ArithmeticError):
    """The unstabilized iteration produced an overflow, underflow to 0/0 or NaN."""


# ----------------------------------------------------------------------------
# configuration and reporting

@dataclass(frozen=True)
class LInfMarginal:
    """Stop when the sup-norm marginal residual is at most ``tol`` (absolute)."""
    tol: float = 1e-7


@dataclass(frozen=True)
class PrimalDualGap:
    """Stop when ``E - J <= tol * max(1, |primal value|)``."""
    tol: float = 1e-6


@dataclass(frozen=True)
class FixedIterations:
    n: int


@dataclass(frozen=True)
class MassTarget:
    """Stop once the total coupling mass reaches ``q``."""
    q: float


@dataclass
class SolverConfig:
    theta: float = 1e-20
    tau: float = 1e2
    eps_lists: Optional[List[List[float]]] = None
    stop_rule: Optional[object] = None
    max_iterations: int = 100000
    absorption_check_every: int = 1

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        if not self.tau > 1:
            raise ValueError("tau must exceed 1")
        if self.absorption_check_every < 1:
            raise ValueError("absorption_check_every must be at least 1")
        for lst in self.eps_lists or []:
            _check_decreasing(lst)


def _check_decreasing(lst):
    if any(not e > 0 for e in lst):
        raise ValueError("eps values must be positive")
    if any(b >= a for a, b in zip(lst, lst[1:])):
        raise ValueError(f"eps list {lst} is not strictly decreasing")


@dataclass
class ScalingState:
    """Relative scalings ``(u~, v~)`` on top of absorbed duals ``(alpha^, beta^)``."""

    u_tilde: np.ndarray
    v_tilde: np.ndarray
    alpha_hat: np.ndarray
    beta_hat: np.ndarray
    eps: float

    def duals(self):
        """Effective duals ``alpha^ + eps log u~`` and ``beta^ + eps log v~``."""
        with np.errstate(divide="ignore", invalid="ignore"):
            a = self.alpha_hat + self.eps * np.log(self.u_tilde)
            b = self.beta_hat + self.eps * np.log(self.v_tilde)
        return np.where(np.isnan(a), -np.inf, a), np.where(np.isnan(b), -np.inf, b)

    def absorb(self):
        self.alpha_hat, self.beta_hat = self.duals()
        self.u_tilde = np.ones_like(self.u_tilde)
        self.v_tilde = np.ones_like(self.v_tilde)


_REPORT_FIELDS = [
    ("iterations", "iterations"),
    ("final_eps", "finalEps"),
    ("marginal_error_linf", "marginalErrorLInf"),
    ("primal_dual_gap", "primalDualGap"),
    ("truncation_bound", "truncationBound"),
    ("primal_value", "primalValue"),
    ("absorption_count", "absorptionCount"),
    ("per_eps_iteration_counts", "perEpsIterationCounts"),
]


@dataclass
class SolveReport:
    iterations: int = 0
    final_eps: float = math.nan
    marginal_error_linf: float = math.nan
    primal_dual_gap: float = math.nan
    truncation_bound: float = math.nan
    primal_value: float = math.nan
    absorption_count: int = 0
    per_eps_iteration_counts: List[dict] = field(default_factory=list)
    # not part of the JSON document; the CLI maps it to the exit status
    converged: bool = False

    def to_dict(self) -> dict:
        out = {}
        for attr, key in _REPORT_FIELDS:
            val = getattr(self, attr)
            if isinstance(val, float) and not math.isfinite(val):
                val = None
            out[key] = val
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "SolveReport":
        kw = {}
        for attr, key in _REPORT_FIELDS:
            val = d[key]
            kw[attr] = math.nan if val is None else val
        return cls(**kw)

    def absorb_stage(self, other: "SolveReport"):
        """Accumulate a later stage into this report."""
        self.iterations += other.iterations
        self.absorption_count += other.absorption_count
        self.per_eps_iteration_counts.extend(other.per_eps_iteration_counts)
        for attr in ("final_eps", "marginal_error_linf", "primal_dual_gap", "truncation_bound",
                     "primal_value"):
            setattr(self, attr, getattr(other, attr))
        self.converged = other.converged


def default_stop_rule(problem) -> object:
    fx, fy = problem.fx, problem.fy
    if isinstance(fx, FixedMarginal) and isinstance(fy, FixedMarginal):
        return LInfMarginal(1e-7)
    return PrimalDualGap(1e-6)


# ----------------------------------------------------------------------------
# eps ladders

def level_spacing(spec: ProblemSpec, level: int) -> float:
    gx, gy = spec.cost.geometry_x, spec.cost.geometry_y
    return max(gx.spacing, gy.spacing) * (1 << level)


def parse_eps(text, spacing: float) -> float:
    """Parse an eps value; the suffix ``h2`` means multiples of ``spacing**2``."""
    s = str(text).strip()
    if s.endswith("h2"):
        return float(s[:-2]) * spacing * spacing
    return float(s)


def default_eps_lists(spec: ProblemSpec, eps_final: float, factor: float = 2.0,
                      eps_start: Optional[float] = None, finest_only: bool = False) -> List[List[float]]:
    """Geometric eps ladder distributed over the levels.

    The ladder starts at the cost scale and shrinks by ``factor`` down to
    ``eps_final``. Each value goes to the coarsest level ``i`` whose squared
    cell size ``h_i^2`` does not exceed it, so that ``eps/h_i^2`` is about 1
    when a level hands over. ``eps_final`` always belongs to level 0. The
    result is indexed by level.
    """
    if not eps_final > 0:
        raise ValueError("eps_final must be positive")
    start = spec.cost.scale() if eps_start is None else eps_start
    ladder = []
    e = max(start, eps_final)
    while e > eps_final * (1 + 1e-12):
        ladder.append(e)
        e /= factor
    ladder.append(eps_final)
    lists: List[List[float]] = [[] for _ in range(spec.depth + 1)]
    for k, e in enumerate(ladder):
        lvl = 0
        if not finest_only and k < len(ladder) - 1:
            for i in range(spec.depth, -1, -1):
                if level_spacing(spec, i) ** 2 <= e:
                    lvl = i
                    break
        lists[lvl].append(e)
    return lists


# ----------------------------------------------------------------------------
# plain scaling iterations

def _y_residual(fy, sy, v_cur, v_next, active):
    m_cur = v_cur * sy
    m_next = v_next * sy
    diff = np.abs(m_cur - m_next)[active]
    return float(diff.max(initial=0.0))


def scaling_algorithm(problem: LevelProblem, eps: float, v0=None, config: Optional[SolverConfig] = None,
                      callback: Optional[Callable] = None):
    """Unstabilized scaling iterations on the dense kernel.

    Raises :class:`DivergedError` as soon as an iterate leaves the range of
    floating point numbers, which happens for small ``eps``.
    """
    config = config or SolverConfig()
    rule = config.stop_rule or default_stop_rule(problem)
    k = get_kernel_dense(problem, eps)
    kt = k.T.copy()
    ax, ay = problem.active_x, problem.active_y
    v = np.ones(problem.ny) if v0 is None else np.array(v0, dtype=float)
    if np.any(v[ay] <= 0):
        raise ValueError("v0 must be positive")
    u = np.ones(problem.nx)
    report = SolveReport(final_eps=eps)
    err = math.inf
    it = 0
    with np.errstate(all="ignore"):
        while True:
            sx = k @ v
            try:
                u = np.where(ax, problem.fx.proxdiv(sx, 0.0, eps), 1.0)
            except StarvationError as exc:
                raise DivergedError(f"iteration {it + 1}: kernel row sum underflowed to 0 ({exc})") from None
            _check_finite(u, ax, it + 1, "u")
            it += 1
            sy = kt @ u
            v_next = np.where(ay, _proxdiv_y(problem.fy, sy, 0.0, eps), 1.0)
            _check_finite(v_next, ay, it, "v")
            err = _y_residual(problem.fy, sy, v, v_next, ay)
            if _stop(rule, it, err, lambda: _dense_gap(problem, k, u, v, eps), lambda: float(u @ k @ v)):
                report.converged = True
                break
            if it >= config.max_iterations:
                break
            v = v_next
            if callback is not None:
                callback(it, eps * np.log(u), eps * np.log(v))
    state = ScalingState(u, v, np.zeros(problem.nx), np.zeros(problem.ny), eps)
    report.iterations = it
    report.marginal_error_linf = err
    report.per_eps_iteration_counts = [dict(level=problem.index, eps=eps, iterations=it)]
    report.truncation_bound = 0.0
    pi = u[:, None] * k * v[None, :]
    report.primal_value = _dense_primal(problem, pi)
    report.primal_dual_gap = _dense_gap(problem, k, u, v, eps)
    return state, report


def _proxdiv_y(fy, sy, gamma, eps):
    return fy.proxdiv(sy, gamma, eps)


def _check_finite(x, active, it, name):
    bad = ~np.isfinite(x[active]) | (x[active] <= 0)
    if np.any(bad):
        raise DivergedError(f"iteration {it}: {name} overflowed or vanished "
                            f"({int(bad.sum())} entries); use the stabilized solver")


def _dense_primal(problem, pi):
    c = problem.dense_cost()
    pos = pi > 0
    return (problem.fx.value(pi.sum(axis=1)) + problem.fy.value(pi.sum(axis=0))
            + math.fsum(c[pos] * pi[pos]))


def _dense_gap(problem, k, u, v, eps):
    rows, cols = np.nonzero(k)
    kern = SparseKernel(rows, cols, k[rows, cols], k.shape, costs=problem.dense_cost()[rows, cols])
    with np.errstate(divide="ignore"):
        a, b = eps * np.log(u), eps * np.log(v)
    a = np.where(problem.active_x, a, -np.inf)
    b = np.where(problem.active_y, b, -np.inf)
    return primal_dual_gap(problem, kern, kern.coupling_values(u, v), a, b, eps)


def _stop(rule, it, residual, gap_fn, mass_fn) -> bool:
    if isinstance(rule, LInfMarginal):
        return residual <= rule.tol
    if isinstance(rule, FixedIterations):
        return it >= rule.n
    if isinstance(rule, MassTarget):
        return mass_fn() >= rule.q
    if isinstance(rule, PrimalDualGap):
        gap, primal = gap_fn()
        if not (math.isfinite(gap) and math.isfinite(primal)):
            return False
        return gap <= rule.tol * max(1.0, abs(primal))
    raise TypeError(f"unknown stop rule {rule!r}")


# ----------------------------------------------------------------------------
# stabilized iterations with truncated kernels

def _build_kernel(problem: LevelProblem, state: ScalingState, theta: float) -> SparseKernel:
    """Truncated kernel at the absorbed duals of ``state``.

    After an absorption from an iterate that is still far from optimal, a
    row (column) that must carry mass can lose all its entries. Such a row
    keeps its single largest kernel entry. Adding entries only shrinks the
    discarded mass, so the truncation bound is unaffected.
    """
    kern = get_truncated_kernel(problem, state.alpha_hat, state.beta_hat, state.eps, theta)
    extra = []
    for f, active, counts, side in ((problem.fx, problem.active_x, kern.row_counts(), 0),
                                    (problem.fy, problem.active_y, kern.col_counts(), 1)):
        if f is None or not f.requires_mass:
            continue
        empty = np.flatnonzero(active & (counts == 0))
        if empty.size:
            extra.append(_largest_entries(problem, state, empty, side))
    if not extra:
        return kern
    rows = np.concatenate([kern.rows] + [e[0] for e in extra])
    cols = np.concatenate([kern.cols] + [e[1] for e in extra])
    pairs, first = np.unique(np.stack([rows, cols], axis=1), axis=0, return_index=True)
    vals = np.concatenate([kern.values] + [e[2] for e in extra])[first]
    costs = np.concatenate([kern.costs] + [e[3] for e in extra])[first]
    return SparseKernel(pairs[:, 0], pairs[:, 1], vals, problem.shape, costs=costs)


_RESCUE_GATE = 10 ** 7


def _largest_entries(problem, state, lines, side):
    """Largest stabilized kernel entry in each of the given rows (side 0) or columns (side 1)."""
    n_other = problem.ny if side == 0 else problem.nx
    if lines.size * n_other > _RESCUE_GATE:
        raise StarvationError(f"{lines.size} empty kernel lines at level {problem.index}, "
                              f"eps={state.eps:g}; decrease theta")
    fixed = np.repeat(lines, n_other)
    other = np.tile(np.arange(n_other), lines.size)
    a, b = (fixed, other) if side == 0 else (other, fixed)
    c = problem.costs(a, b)
    e = stabilized_exponent(c, state.alpha_hat[a], state.beta_hat[b])
    live = problem.active_y[b] if side == 0 else problem.active_x[a]
    e = np.where(live, e, np.inf).reshape(lines.size, n_other)
    best = np.argmin(e, axis=1)
    pick = np.arange(lines.size) * n_other + best
    a, b, c, e = a[pick], b[pick], c[pick], e[np.arange(lines.size), best]
    with np.errstate(over="ignore"):
        vals = np.exp(-e / state.eps) * problem.rho_x[a] * problem.rho_y[b]
    bad = ~(vals > 0) | ~np.isfinite(vals)
    if np.any(bad):
        name = "row" if side == 0 else "column"
        raise StarvationError(
            f"truncated kernel at level {problem.index}, eps={state.eps:g}: {name} "
            f"{int(lines[bad][0])} with required mass has no representable entry; "
            "decrease theta or use a finer eps ladder")
    return a, b, vals, c


def scaling_algorithm_stabilized(problem: LevelProblem, eps: float, alpha0=None, beta0=None,
                                 config: Optional[SolverConfig] = None,
                                 callback: Optional[Callable] = None):
    """Stabilized scaling iterations with absorption and adaptive truncation.

    ``callback(event, state, kernel)`` is invoked with ``event`` equal to
    ``"iteration"`` after every full iteration and ``"absorb"`` right before
    every absorption (the state then still holds the pre-absorption scalings).
    Returns the state after a closing absorption and a report.
    """
    config = config or SolverConfig()
    rule = config.stop_rule or default_stop_rule(problem)
    a0, b0 = problem.initial_duals()
    alpha = a0 if alpha0 is None else np.where(problem.active_x, np.asarray(alpha0, float), -np.inf)
    beta = b0 if beta0 is None else np.where(problem.active_y, np.asarray(beta0, float), -np.inf)
    state = ScalingState(np.ones(problem.nx), np.ones(problem.ny), alpha, beta, eps)
    kern = _build_kernel(problem, state, config.theta)
    ax, ay = problem.active_x, problem.active_y
    report = SolveReport(final_eps=eps)
    it = 0
    absorptions = 0
    err = math.inf

    def gap_fn():
        pi = kern.coupling_values(state.u_tilde, state.v_tilde)
        a, b = state.duals()
        return primal_dual_gap(problem, kern, pi, a, b, eps), primal_value(problem, kern, pi)

    all_x, all_y = bool(ax.all()), bool(ay.all())
    while True:
        sx = kern.apply(state.v_tilde)
        u = problem.fx.proxdiv(sx, state.alpha_hat, eps)
        state.u_tilde = u if all_x else np.where(ax, u, 1.0)
        it += 1
        sy = kern.apply_t(state.u_tilde)
        v_next = problem.fy.proxdiv(sy, state.beta_hat, eps)
        if not all_y:
            v_next = np.where(ay, v_next, 1.0)
        diff = np.abs(sy * (state.v_tilde - v_next))
        err = float(diff.max(initial=0.0) if all_y else diff[ay].max(initial=0.0))
        # a non-finite scaling always shows up as a non-finite residual
        if not math.isfinite(err) and not (np.isfinite(state.u_tilde).all() and np.isfinite(v_next).all()):
            raise DivergedError(f"iteration {it}: non-finite scaling despite stabilization")
        if _stop(rule, it, err, gap_fn, lambda: float(np.sum(state.v_tilde * sy))):
            report.converged = True
            break
        if it >= config.max_iterations:
            break
        state.v_tilde = v_next
        if callback is not None:
            callback("iteration", state, kern)
        if it % config.absorption_check_every == 0 and (
                state.u_tilde.max(initial=0.0) > config.tau or state.v_tilde.max(initial=0.0) > config.tau):
            if callback is not None:
                callback("absorb", state, kern)
            state.absorb()
            absorptions += 1
            kern = _build_kernel(problem, state, config.theta)

    pi = kern.coupling_values(state.u_tilde, state.v_tilde)
    a, b = state.duals()
    report.primal_dual_gap = primal_dual_gap(problem, kern, pi, a, b, eps)
    report.primal_value = primal_value(problem, kern, pi)
    report.marginal_error_linf = _fixed_marginal_error(problem, kern, pi, err)
    # closing absorption and re-truncation
    if callback is not None:
        callback("absorb", state, kern)
    state.absorb()
    absorptions += 1
    kern = _build_kernel(problem, state, config.theta)
    report.truncation_bound = truncation_bound(problem, state.u_tilde, state.v_tilde, config.theta)
    report.iterations = it
    report.absorption_count = absorptions
    report.per_eps_iteration_counts = [dict(level=problem.index, eps=eps, iterations=it)]
    report.kernel = kern
    return state, report


def _fixed_marginal_error(problem, kern, pi, residual):
    """Sup-norm violation of fixed marginals; the iteration residual otherwise."""
    errs = []
    m = np.bincount(kern.rows, weights=pi, minlength=problem.nx)
    n = np.bincount(kern.cols, weights=pi, minlength=problem.ny)
    fixed = False
    for f, marg in ((problem.fx, m), (problem.fy, n)):
        if isinstance(f, FixedMarginal):
            fixed = True
            errs.append(float(np.max(np.abs(marg - f.target), initial=0.0)))
    if not fixed:
        return residual
    return max(errs)


# ----------------------------------------------------------------------------
# eps-scaling and coarse-to-fine solves

def eps_scaling(problem: LevelProblem, eps_list: Sequence[float], alpha0=None, beta0=None,
                config: Optional[SolverConfig] = None, callback: Optional[Callable] = None):
    """Run the stabilized solver along a decreasing eps list, carrying duals."""
    _check_decreasing(list(eps_list))
    if len(eps_list) == 0:
        raise ValueError("empty eps list")
    config = config or SolverConfig()
    total = SolveReport()
    alpha, beta = alpha0, beta0
    state = None
    for eps in eps_list:
        state, rep = scaling_algorithm_stabilized(problem, eps, alpha, beta, config, callback)
        alpha, beta = state.alpha_hat, state.beta_hat
        total.absorb_stage(rep)
        total.kernel = rep.kernel
    return state, total


def _refine(partition, level, coarse, active_fine):
    fine = refine_dual(partition, level, coarse)
    ok = np.isfinite(fine)
    if np.any(active_fine & ~ok):
        floor = fine[ok].min() if np.any(ok) else 0.0
        fine = np.where(active_fine & ~ok, floor, fine)
    return np.where(active_fine, fine, -np.inf)


def solve_full(spec: ProblemSpec, eps_lists: Optional[Sequence[Sequence[float]]] = None,
               config: Optional[SolverConfig] = None, eps_final: Optional[float] = None,
               callback: Optional[Callable] = None):
    """Coarse-to-fine solve.

    ``eps_lists[i]`` is the (possibly empty) eps list of partition level
    ``i``; levels run from the coarsest ``spec.depth`` down to 0. Duals are
    prolongated piecewise constantly between levels. A starving coarse level
    is retried once with ``theta / 10``.
    """
    config = config or SolverConfig()
    if eps_lists is None:
        eps_lists = config.eps_lists
    if eps_lists is None:
        if eps_final is None:
            raise ValueError("need eps lists or eps_final")
        eps_lists = default_eps_lists(spec, eps_final)
    eps_lists = [list(e) for e in eps_lists]
    if len(eps_lists) != spec.depth + 1:
        raise ValueError(f"expected {spec.depth + 1} eps lists, got {len(eps_lists)}")
    if not eps_lists[0]:
        raise ValueError("the finest level needs at least one eps value")
    flat = [e for lvl in range(spec.depth, -1, -1) for e in eps_lists[lvl]]
    _check_decreasing(flat)

    total = SolveReport()
    alpha = beta = None
    cur_level = None
    state = None
    for lvl in range(spec.depth, -1, -1):
        if not eps_lists[lvl]:
            continue
        problem = spec.level(lvl)
        if cur_level is not None:
            for j in range(cur_level - 1, lvl - 1, -1):
                pj = spec.level(j)
                alpha = _refine(spec.partition_x, j, alpha, pj.active_x)
                beta = _refine(spec.partition_y, j, beta, pj.active_y)
        try:
            state, rep = eps_scaling(problem, eps_lists[lvl], alpha, beta, config, callback)
        except StarvationError:
            if lvl == 0:
                raise
            retry = SolverConfig(config.theta / 10, config.tau, None, config.stop_rule,
                                 config.max_iterations, config.absorption_check_every)
            state, rep = eps_scaling(problem, eps_lists[lvl], alpha, beta, retry, callback)
        alpha, beta = state.alpha_hat, state.beta_hat
        cur_level = lvl
        total.absorb_stage(rep)
        total.kernel = rep.kernel
    return state, total


# ----------------------------------------------------------------------------
# barycenters

class _Coupled:
    """Bookkeeping of ``n`` stabilized problems sharing their Y side."""

    def __init__(self, problems, alphas, betas, eps, theta):
        self.problems = problems
        self.eps = eps
        self.theta = theta
        self.states = []
        for p, a, b in zip(problems, alphas, betas):
            a0, b0 = p.initial_duals()
            a = a0 if a is None else np.where(p.active_x, a, -np.inf)
            b = b0 if b is None else np.where(p.active_y, b, -np.inf)
            self.states.append(ScalingState(np.ones(p.nx), np.ones(p.ny), a, b, eps))
        self.kernels = [_build_kernel(p, s, theta) for p, s in zip(problems, self.states)]

    def absorb(self, i):
        self.states[i].absorb()
        self.kernels[i] = _build_kernel(self.problems[i], self.states[i], self.theta)


def barycenter_specs(measures: Sequence, geometry_y: GridGeometry, cost: str = "sqeuclid",
                     big_lambda: Optional[float] = None) -> List[ProblemSpec]:
    """One problem per input measure, all transporting into ``geometry_y``.

    The reference measure is ``mu_i (x) L_Y`` for the balanced barycenter and
    ``L_X (x) L_Y`` for the KL-fidelity variant (``big_lambda`` given).
    """
    specs = []
    depth = 0
    pairs = []
    for m in measures:
        gx = m.geometry if isinstance(m, DiscreteMeasure) and m.geometry is not None else geometry_y
        w = m.weights if isinstance(m, DiscreteMeasure) else np.asarray(m, float)
        pairs.append((gx, w))
        depth = max(depth, math.ceil(math.log2(max(gx.shape))), math.ceil(math.log2(max(geometry_y.shape))))
    for gx, w in pairs:
        c = make_cost(cost, gx, geometry_y)
        if big_lambda is None:
            specs.append(ProblemSpec(c, FixedMarginal(w), None, w, geometry_y.lebesgue(), depth=depth))
        else:
            specs.append(ProblemSpec(c, KLFidelity(w, big_lambda), None, gx.lebesgue(),
                                     geometry_y.lebesgue(), depth=depth))
    return specs


@dataclass
class BarycenterResult:
    states: List[ScalingState]
    barycenter: DiscreteMeasure
    report: SolveReport
    consensus_residual: float


def _barycenter_level(problems, consensus, eps, alphas, betas, config, wfr):
    rule = config.stop_rule or (PrimalDualGap(1e-6) if wfr else LInfMarginal(1e-7))
    cp = _Coupled(problems, alphas, betas, eps, config.theta)
    n = len(problems)
    w = consensus.weights
    sx = [None] * n
    sy = [None] * n
    sigma = None
    it = 0
    absorptions = 0
    report = SolveReport(final_eps=eps)
    err = math.inf
    while True:
        for i in range(n):
            sx[i] = cp.kernels[i].apply(cp.states[i].v_tilde)
        if it > 0:
            err = max(float(np.max(np.abs(cp.states[i].u_tilde * sx[i] - _target(problems[i]))
                                   [problems[i].active_x], initial=0.0)) for i in range(n))
            if _stop(rule, it, err, lambda: _coupled_gap(cp, consensus, sx, sy, wfr),
                     lambda: float(np.sum(sigma))):
                report.converged = True
                break
            if it >= config.max_iterations:
                break
        for i in range(n):
            p, s = problems[i], cp.states[i]
            s.u_tilde = np.where(p.active_x, p.fx.proxdiv(sx[i], s.alpha_hat, eps), 1.0)
            sy[i] = cp.kernels[i].apply_t(s.u_tilde)
        outs, sigma = consensus.proxdiv(sy, [s.beta_hat for s in cp.states], eps, return_barycenter=True)
        for i in range(n):
            cp.states[i].v_tilde = np.where(problems[i].active_y, outs[i], 1.0)
        it += 1
        if it % config.absorption_check_every == 0:
            for i in range(n):
                s = cp.states[i]
                if s.u_tilde.max(initial=0.0) > config.tau or s.v_tilde.max(initial=0.0) > config.tau:
                    cp.absorb(i)
                    absorptions += 1
    gap, primal = _coupled_gap(cp, consensus, sx, sy, wfr)
    report.primal_dual_gap = gap
    report.primal_value = primal
    report.marginal_error_linf = err
    report.truncation_bound = max(truncation_bound(p, s.u_tilde, s.v_tilde, config.theta)
                                  for p, s in zip(problems, cp.states))
    betas_eff = [s.duals()[1] for s in cp.states]
    for i in range(n):
        cp.absorb(i)
        absorptions += 1
    report.iterations = it
    report.absorption_count = absorptions
    report.per_eps_iteration_counts = [dict(level=problems[0].index, eps=eps, iterations=it)]
    mix = sum(wi * b for wi, b in zip(w, betas_eff) if wi > 0)
    live = np.isfinite(mix)
    residual = float(np.max(np.abs(mix[live]), initial=0.0))
    return cp.states, sigma, report, residual


def _target(problem):
    return problem.fx.target


def _coupled_gap(cp, consensus, sx, sy, wfr):
    """Primal-dual gap and primal value of the coupled barycenter problem."""
    w = consensus.weights
    gap = 0.0
    primal = 0.0
    ns = []
    for i, (p, s, k) in enumerate(zip(cp.problems, cp.states, cp.kernels)):
        pi = k.coupling_values(s.u_tilde, s.v_tilde)
        a, b = s.duals()
        m = s.u_tilde * sx[i]
        n = s.v_tilde * sy[i]
        ns.append(n)
        if w[i] == 0:
            continue
        gx = p.fx.fenchel_gap(m, a)
        kl = _kl_term(p, k, pi, a, b, cp.eps)
        live = np.isfinite(b) & (n > 0)
        lin_y = math.fsum(b[live] * n[live])
        gap += w[i] * (gx + cp.eps * kl + lin_y)
        pos = pi > 0
        primal += w[i] * (p.fx.value(m) + math.fsum(k.costs[pos] * pi[pos]))
    if wfr:
        lam = consensus.big_lambda
        nbar = sum(wi * n for wi, n in zip(w, ns))
        f2 = lam * sum(wi * _kl(n, nbar) for wi, n in zip(w, ns) if wi > 0)
        gap += f2
        primal += f2
    else:
        # F_2 is the indicator of equal second marginals; after a v-update
        # they agree up to round-off
        spread = max(float(np.max(np.abs(n - ns[0]), initial=0.0)) for n in ns)
        if spread > 1e-6 * max(1.0, float(np.sum(ns[0]))):
            return math.inf, primal
    return gap, primal


def _kl(m, n):
    from .measures import kl_divergence
    return kl_divergence(m, n)


def _kl_term(problem, kern, pi, a, b, eps):
    from .kernel import _kl_to_stabilized
    return _kl_to_stabilized(problem, kern, pi, a, b, eps)


def _solve_coupled(specs, consensus, eps_lists, config, wfr):
    config = config or SolverConfig()
    depth = specs[0].depth
    if any(s.depth != depth for s in specs):
        raise ValueError("all problems must share the partition depth")
    if eps_lists is None:
        eps_lists = config.eps_lists
    if eps_lists is None:
        raise ValueError("eps lists required")
    eps_lists = [list(e) for e in eps_lists]
    if len(eps_lists) != depth + 1:
        raise ValueError(f"expected {depth + 1} eps lists, got {len(eps_lists)}")
    _check_decreasing([e for lvl in range(depth, -1, -1) for e in eps_lists[lvl]])
    n = len(specs)
    alphas = [None] * n
    betas = [None] * n
    cur = None
    total = SolveReport()
    states = sigma = None
    residual = math.nan
    for lvl in range(depth, -1, -1):
        if not eps_lists[lvl]:
            continue
        problems = [s.level(lvl) for s in specs]
        if cur is not None:
            for j in range(cur - 1, lvl - 1, -1):
                for i, s in enumerate(specs):
                    pj = s.level(j)
                    alphas[i] = _refine(s.partition_x, j, alphas[i], pj.active_x)
                    betas[i] = _refine(s.partition_y, j, betas[i], pj.active_y)
        for eps in eps_lists[lvl]:
            states, sigma, rep, residual = _barycenter_level(problems, consensus, eps, alphas, betas,
                                                             config, wfr)
            alphas = [s.alpha_hat for s in states]
            betas = [s.beta_hat for s in states]
            total.absorb_stage(rep)
        cur = lvl
    geom_y = specs[0].cost.geometry_y
    return BarycenterResult(states, DiscreteMeasure(np.maximum(sigma, 0.0), geom_y), total, residual)


def solve_barycenter(specs: Sequence[ProblemSpec], weights, eps_lists=None,
                     config: Optional[SolverConfig] = None) -> BarycenterResult:
    """Wasserstein barycenter by alternating Sinkhorn u-updates and consensus v-updates."""
    return _solve_coupled(list(specs), BarycenterConsensus(weights), eps_lists, config, wfr=False)


def solve_wfr_barycenter(specs: Sequence[ProblemSpec], weights, big_lambda: float, eps_lists=None,
                         config: Optional[SolverConfig] = None) -> BarycenterResult:
    """Barycenter for transport with KL marginal fidelity (weight ``big_lambda``)."""
    return _solve_coupled(list(specs), WFRBarycenterConsensus(weights, big_lambda), eps_lists,
                          config, wfr=True)


# ----------------------------------------------------------------------------
# gradient flows

@dataclass
class FlowStepResult:
    measure: DiscreteMeasure
    state: ScalingState
    report: SolveReport


def gradient_flow_step(geometry: GridGeometry, mu_current, eps: float, tau: float, potential,
                       config: Optional[SolverConfig] = None, eps_list: Optional[Sequence[float]] = None,
                       warm: Optional[ScalingState] = None) -> FlowStepResult:
    """One entropic JKO step of the porous-medium energy ``sum m^2/L + v m``.

    Solves ``min eps KL(pi|K) + iota(P_X pi = mu) + 2 tau F(P_Y pi)`` with the
    squared distance cost and Lebesgue reference measure, and returns the
    second marginal of the optimizer. ``eps_list`` (ending at ``eps``) enables
    eps-scaling on the finest level; ``warm`` supplies starting duals. A
    cold start without ``eps_list`` scales eps down from the cost scale.
    """
    mu = mu_current.weights if isinstance(mu_current, DiscreteMeasure) else np.asarray(mu_current, float)
    leb = geometry.lebesgue()
    cost = SquaredEuclidean(geometry, geometry)
    spec = ProblemSpec(cost, FixedMarginal(mu), PorousMediumProx(tau, potential, leb), leb, leb)
    problem = spec.level(0)
    if eps_list is None and warm is None:
        # a cold start directly at small eps starves the truncated kernel
        eps_list = default_eps_lists(spec, eps, finest_only=True)[0]
    eps_list = [eps] if eps_list is None else list(eps_list)
    if eps_list[-1] != eps:
        raise ValueError("eps list must end at eps")
    config = config or SolverConfig(stop_rule=PrimalDualGap(1e-9))
    a0 = b0 = None
    if warm is not None:
        a0, b0 = warm.alpha_hat, warm.beta_hat
    state, rep = eps_scaling(problem, eps_list, a0, b0, config)
    kern = rep.kernel
    n = np.bincount(kern.cols, weights=kern.coupling_values(state.u_tilde, state.v_tilde),
                    minlength=problem.ny)
    n = np.where(problem.active_y, n, 0.0)
    return FlowStepResult(DiscreteMeasure(n, geometry), state, rep)


def gradient_flow(geometry, mu0, eps, tau, potential, steps: int, config=None, eps_list=None):
    """``steps`` JKO steps from ``mu0``; returns the list of frames including ``mu0``."""
    frames = [mu0 if isinstance(mu0, DiscreteMeasure) else DiscreteMeasure(mu0, geometry)]
    warm = None
    reports = []
    for k in range(steps):
        res = gradient_flow_step(geometry, frames[-1], eps, tau, potential, config,
                                 eps_list if k == 0 else None, warm)
        warm = res.state
        frames.append(res.measure)
        reports.append(res.report)
    return frames, reports


# ----------------------------------------------------------------------------
# multi-marginal

MULTI_MARGINAL_GATE = 10 ** 6


@dataclass
class MultiMarginalResult:
    duals: List[np.ndarray]
    indices: np.ndarray
    values: np.ndarray
    marginal_error_linf: float
    report: SolveReport


def solve_multi_marginal(cost_tensor, marginals: Sequence, eps, config: Optional[SolverConfig] = None,
                         reference=None) -> MultiMarginalResult:
    """Cyclic Sinkhorn updates on an n-way truncated stabilized kernel tensor.

    ``eps`` may be a number or a decreasing list (eps-scaling). The
    reference measure defaults to the product of the marginals. After each
    update of marginal ``i`` the ``i``-th marginal of the coupling is exact.
    """
    c = np.asarray(cost_tensor, dtype=float)
    if c.size > MULTI_MARGINAL_GATE:
        raise ValueError(f"cost tensor has {c.size} entries; limit is {MULTI_MARGINAL_GATE}")
    mus = [np.asarray(m.weights if isinstance(m, DiscreteMeasure) else m, dtype=float) for m in marginals]
    if c.ndim != len(mus) or any(c.shape[i] != mus[i].size for i in range(c.ndim)):
        raise ValueError("cost tensor shape does not match the marginals")
    config = config or SolverConfig()
    rule = config.stop_rule or LInfMarginal(1e-9)
    eps_list = [float(eps)] if np.ndim(eps) == 0 else [float(e) for e in eps]
    _check_decreasing(eps_list)
    refs = mus if reference is None else [np.asarray(r, float) for r in reference]
    nd = c.ndim
    active = [m > 0 for m in mus]
    alphas = [np.where(a, 0.0, -np.inf) for a in active]
    log_rho = sum(np.log(np.where(r > 0, r, 1.0)).reshape([-1 if k == i else 1 for k in range(nd)])
                  for i, r in enumerate(refs))
    total = SolveReport()

    def build(eps):
        expo = c.copy()
        for i in range(nd):
            shape = [-1 if k == i else 1 for k in range(nd)]
            expo = stabilized_exponent(expo, alphas[i].reshape(shape), 0.0)
        with np.errstate(over="ignore"):
            k = np.exp(-expo / eps)
        keep = k >= config.theta
        idx = np.nonzero(keep)
        vals = np.exp(-expo[idx] / eps + log_rho[idx])
        return np.stack(idx, axis=1), vals

    err = math.inf
    for eps in eps_list:
        idx, vals = build(eps)
        u = [np.ones(m.size) for m in mus]
        it = 0
        absorptions = 0
        converged = False
        while True:
            for i in range(nd):
                prod = vals.copy()
                for j in range(nd):
                    if j != i:
                        prod *= u[j][idx[:, j]]
                s = np.bincount(idx[:, i], weights=prod, minlength=mus[i].size)
                starved = active[i] & (s <= 0)
                if np.any(starved):
                    raise StarvationError(f"marginal {i}: empty slice at index {int(np.flatnonzero(starved)[0])}")
                u[i] = np.where(active[i], mus[i] / np.where(s > 0, s, 1.0), 1.0)
            it += 1
            # all marginals but the last were exact right after their own update
            prod = vals * np.prod([u[j][idx[:, j]] for j in range(nd)], axis=0)
            err = max(float(np.max(np.abs(np.bincount(idx[:, i], weights=prod, minlength=mus[i].size)
                                          - mus[i]), initial=0.0)) for i in range(nd))
            if _stop(rule, it, err, lambda: (0.0, 0.0), lambda: float(prod.sum())):
                converged = True
                break
            if it >= config.max_iterations:
                break
            if any(x.max() > config.tau for x in u):
                for i in range(nd):
                    with np.errstate(divide="ignore"):
                        alphas[i] = np.where(active[i], alphas[i] + eps * np.log(u[i]), -np.inf)
                    u[i] = np.ones_like(u[i])
                absorptions += 1
                idx, vals = build(eps)
        for i in range(nd):
            with np.errstate(divide="ignore"):
                alphas[i] = np.where(active[i], alphas[i] + eps * np.log(u[i]), -np.inf)
        rep = SolveReport(iterations=it, final_eps=eps, marginal_error_linf=err,
                          absorption_count=absorptions + 1,
                          per_eps_iteration_counts=[dict(level=0, eps=eps, iterations=it)],
                          converged=converged)
        total.absorb_stage(rep)
        final_vals = prod
    pos = final_vals > 0
    return MultiMarginalResult(alphas, idx[pos], final_vals[pos], err, total)
