"""Reference algorithms and empirical checks of the convergence theory.

Auction algorithm, asynchronous Sinkhorn, an exact LP oracle, the dual
stability experiment and the iteration-count scaling study.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

from .costs import ExplicitMatrix
from .kernel import ProblemSpec
from .solvers import LInfMarginal, SolverConfig, scaling_algorithm_stabilized, eps_scaling


# ----------------------------------------------------------------------------
# auction

@dataclass
class AuctionResult:
    assignment: np.ndarray          # assignment[x] = y
    alpha: np.ndarray
    beta: np.ndarray
    iterations: int
    bids: int
    alpha_trace: List[np.ndarray] = field(default_factory=list, repr=False)
    beta_trace: List[np.ndarray] = field(default_factory=list, repr=False)

    def coupling(self) -> np.ndarray:
        n = self.assignment.size
        pi = np.zeros((n, n))
        pi[np.arange(n), self.assignment] = 1.0
        return pi


def auction_solve(cost, eps: float, beta0=None, record: bool = False) -> AuctionResult:
    """Auction algorithm for the assignment problem with counting marginals.

    Unassigned rows bid for the column minimizing ``c(x, y) - beta(y)`` and
    set ``alpha(x)`` to that value; each column accepts its best bidder and
    lowers ``beta(y)`` to ``c(x, y) - alpha(x) - eps``. Ties go to the lowest
    index.
    """
    c = np.asarray(cost, dtype=float)
    n = c.shape[0]
    if c.ndim != 2 or c.shape[1] != n:
        raise ValueError("assignment cost must be square")
    if not np.all(np.isfinite(c)) or np.any(c < 0):
        raise ValueError("assignment cost must be finite and non-negative")
    if not eps > 0:
        raise ValueError("eps must be positive")
    beta = np.zeros(n) if beta0 is None else np.array(beta0, dtype=float)
    alpha = np.full(n, -np.inf)
    owner = np.full(n, -1)      # owner[y] = x
    assigned = np.full(n, -1)   # assigned[x] = y
    it = bids = 0
    res = AuctionResult(assigned, alpha, beta, 0, 0)
    while np.any(assigned < 0):
        it += 1
        offers = {}
        for x in np.flatnonzero(assigned < 0):
            red = c[x] - beta
            y = int(np.argmin(red))     # first minimal index
            alpha[x] = red[y]
            offers.setdefault(y, []).append(int(x))
            bids += 1
        for y in sorted(offers):
            cand = offers[y]
            vals = [c[x, y] - alpha[x] for x in cand]
            x = cand[int(np.argmin(vals))]
            if owner[y] >= 0:
                assigned[owner[y]] = -1
            beta[y] = c[x, y] - alpha[x] - eps
            owner[y] = x
            assigned[x] = y
        if record:
            res.alpha_trace.append(alpha.copy())
            res.beta_trace.append(beta.copy())
    res.assignment = assigned.copy()
    res.alpha, res.beta = alpha, beta
    res.iterations, res.bids = it, bids
    return res


# ----------------------------------------------------------------------------
# asynchronous Sinkhorn

@dataclass
class AsyncSinkhornResult:
    coupling: np.ndarray
    u: np.ndarray
    v: np.ndarray
    iterations: int
    q_trace: List[float]
    v_trace: List[np.ndarray] = field(default_factory=list, repr=False)
    u_trace: List[np.ndarray] = field(default_factory=list, repr=False)


def async_sinkhorn(mu, nu, cost, eps: float, v0=None, q_target: float = 0.99,
                   max_iterations: int = 10 ** 7, record: bool = False) -> AsyncSinkhornResult:
    """Sinkhorn iteration with the monotone update ``v <- min(v, nu / K^T u)``.

    Dense, with reference measure ``mu (x) nu``; stops once the coupling mass
    ``q`` reaches ``q_target``.
    """
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    c = np.asarray(cost, dtype=float)
    k = np.exp(-c / eps) * np.outer(mu, nu)
    v = np.ones(nu.size) if v0 is None else np.array(v0, dtype=float)
    qs = []
    res = AsyncSinkhornResult(None, None, None, 0, qs)
    it = 0
    while True:
        it += 1
        u = mu / (k @ v)
        v_hat = nu / (k.T @ u)
        v = np.minimum(v, v_hat)
        pi = u[:, None] * k * v[None, :]
        q = float(pi.sum())
        qs.append(q)
        if record:
            res.u_trace.append(u.copy())
            res.v_trace.append(v.copy())
        if q >= q_target or it >= max_iterations:
            break
    res.coupling, res.u, res.v, res.iterations = pi, u, v, it
    return res


def async_iteration_bound(cost_max: float, eps: float, q_target: float) -> float:
    return 2.0 + cost_max / (eps * (1.0 - q_target))


# ----------------------------------------------------------------------------
# exact LP

@dataclass
class LPResult:
    value: float
    coupling: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray


def lp_oracle(mu, nu, cost) -> LPResult:
    """Exact discrete OT by the HiGHS LP solver; duals gauged to ``alpha[0] = 0``."""
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    c = np.asarray(cost, dtype=float)
    m, n = c.shape
    if mu.size != m or nu.size != n:
        raise ValueError("cost shape does not match the marginals")
    if max(m, n) > 64:
        raise ValueError("lp_oracle is limited to 64 points per side")
    if not np.all(np.isfinite(c)):
        raise ValueError("lp_oracle needs a finite cost")
    if abs(mu.sum() - nu.sum()) > 1e-12 * max(1.0, mu.sum()):
        raise ValueError(f"marginal masses differ: {mu.sum()} vs {nu.sum()}")
    rows = np.kron(np.eye(m), np.ones((1, n)))
    cols = np.kron(np.ones((1, m)), np.eye(n))
    a_eq = np.vstack([rows, cols])
    b_eq = np.concatenate([mu, nu])
    res = linprog(c.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"LP solver failed: {res.message}")
    duals = res.eqlin.marginals
    alpha, beta = duals[:m].copy(), duals[m:].copy()
    shift = alpha[0]
    alpha -= shift
    beta += shift
    return LPResult(float(res.fun), res.x.reshape(m, n), alpha, beta)


# ----------------------------------------------------------------------------
# dual stability under eps-scaling

def entropic_duals(mu, nu, cost, eps, tol: float = 1e-13, max_iterations: int = 10 ** 6,
                   alpha0=None, beta0=None):
    """Dual maximizers of entropic OT with product reference measure.

    Dense log-domain Sinkhorn in softmin form; suitable for high-precision
    desk-scale solves. Returns ``(alpha, beta, residual, iterations)``.
    """
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    c = np.asarray(cost, dtype=float)
    lmu, lnu = np.log(mu), np.log(nu)
    alpha = np.zeros(mu.size) if alpha0 is None else np.array(alpha0, float)
    beta = np.zeros(nu.size) if beta0 is None else np.array(beta0, float)
    res = math.inf
    for it in range(1, max_iterations + 1):
        # alpha = -eps log sum_y exp((beta - c)/eps) nu(y)
        alpha = -eps * logsumexp((beta[None, :] - c) / eps + lnu[None, :], axis=1)
        z = (alpha[:, None] + beta[None, :] - c) / eps + lmu[:, None] + lnu[None, :]
        colsum = np.exp(logsumexp(z, axis=0))
        res = float(np.max(np.abs(colsum - nu)))
        if res <= tol:
            break
        beta = -eps * logsumexp((alpha[:, None] - c) / eps + lmu[:, None], axis=0)
    return alpha, beta, res, it


def stability_bound(eps1: float, n: int, m: int) -> float:
    return eps1 * n * (4.0 * math.log(n) + 24.0 * math.log(m))


@dataclass
class StabilityReport:
    osc_alpha: float
    osc_beta: float
    bound: float
    residuals: tuple
    conclusive: bool

    @property
    def holds(self) -> bool:
        return self.osc_alpha <= self.bound and self.osc_beta <= self.bound


def stability_experiment(mu, nu, cost, eps1: float, eps2: float, atoms: int,
                         tol: float = 1e-12) -> StabilityReport:
    """Compare dual optimizers at ``eps1 >= eps2`` against the stability bound.

    ``atoms`` is ``M``: both marginals must be integer multiples of ``1/M``.
    """
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if eps2 > eps1:
        raise ValueError("need eps1 >= eps2")
    for m in (mu, nu):
        r = m * atoms
        if np.any(np.abs(r - np.round(r)) > 1e-9) or np.any(np.round(r) < 1):
            raise ValueError("marginals violate the atomic mass assumption")
    a1, b1, r1, _ = entropic_duals(mu, nu, cost, eps1, tol)
    a2, b2, r2, _ = entropic_duals(mu, nu, cost, eps2, tol, alpha0=a1, beta0=b1)
    da, db = a2 - a1, b2 - b1
    n = max(mu.size, nu.size)
    conclusive = r1 <= 1e3 * tol and r2 <= 1e3 * tol
    return StabilityReport(float(da.max() - da.min()), float(db.max() - db.min()),
                           stability_bound(eps1, n, atoms), (r1, r2), conclusive)


# ----------------------------------------------------------------------------
# iteration scaling

@dataclass
class ScalingStudy:
    eps: List[float]
    iterations: List[int]
    gaps: List[float]
    slope: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "iterations", "gap"])
            for row in zip(self.eps, self.iterations, self.gaps):
                w.writerow([repr(row[0]), row[1], repr(row[2])])


def loglog_slope(eps, iterations) -> float:
    """Least-squares slope of ``log(iterations)`` against ``log(1/eps)``."""
    x = np.log(1.0 / np.asarray(eps, dtype=float))
    y = np.log(np.asarray(iterations, dtype=float))
    if np.ptp(x) == 0:
        return 0.0
    return float(np.polyfit(x, y, 1)[0])


def iteration_scaling_study(mu, nu, cost, eps_grid: Sequence[float], stop_rule=None,
                            eps_scaling_factor: Optional[float] = None,
                            config: Optional[SolverConfig] = None) -> ScalingStudy:
    """Iterations needed per eps, from a cold start or with eps-scaling.

    Without ``eps_scaling_factor`` every eps is solved directly from zero
    duals with the stabilized solver. With it, a geometric ladder from the
    cost scale down to each eps is used and the total count is recorded.
    """
    c = np.asarray(cost, dtype=float)
    cfg = config or SolverConfig(stop_rule=stop_rule or LInfMarginal(1e-6))
    if stop_rule is not None:
        cfg.stop_rule = stop_rule
    spec = ProblemSpec.optimal_transport(ExplicitMatrix(c), mu, nu)
    prob = spec.level(0)
    its, gaps = [], []
    top = float(np.max(c[np.isfinite(c)])) if np.any(np.isfinite(c)) else 1.0
    for eps in eps_grid:
        if eps_scaling_factor is None:
            _, rep = scaling_algorithm_stabilized(prob, eps, config=cfg)
        else:
            ladder = []
            e = max(top, eps)
            while e > eps * (1 + 1e-12):
                ladder.append(e)
                e /= eps_scaling_factor
            ladder.append(eps)
            _, rep = eps_scaling(prob, ladder, config=cfg)
        its.append(rep.iterations)
        gaps.append(rep.primal_dual_gap)
    return ScalingStudy(list(eps_grid), its, gaps, loglog_slope(eps_grid, its))
