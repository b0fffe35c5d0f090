"""Dense, stabilized and truncated kernels; duality-gap accounting.

Kernels live on one level of a pair of hierarchical partitions. Level 0 is
the original problem; coarser levels use cell costs, coarsened marginal
functions and coarsened reference measures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .costs import CostFunction
from .hierarchy import HierarchicalPartition, extend_dual
from .proxdiv import MarginalFunction

DENSE_GATE = 4096


class ProblemSpec:
    """Two-marginal problem ``F_X(P_X pi) + F_Y(P_Y pi) + eps KL(pi|K)``.

    The reference measure is the product ``rho_x (x) rho_y``; the uniform
    variant with value ``w`` per pair is ``rho_x = w``, ``rho_y = 1``.
    Partitions of both grids are built with a common depth.
    """

    def __init__(self, cost: CostFunction, fx: MarginalFunction, fy: MarginalFunction,
                 rho_x, rho_y, depth: Optional[int] = None):
        self.cost = cost
        self.fx = fx
        self.fy = fy
        nx, ny = cost.shape
        self.rho_x = np.broadcast_to(np.asarray(rho_x, dtype=float), (nx,)).copy()
        self.rho_y = np.broadcast_to(np.asarray(rho_y, dtype=float), (ny,)).copy()
        if np.any(self.rho_x < 0) or np.any(self.rho_y < 0):
            raise ValueError("reference measure must be non-negative")
        gx, gy = cost.geometry_x, cost.geometry_y
        need = max(math.ceil(math.log2(max(gx.shape))), math.ceil(math.log2(max(gy.shape))), 0)
        depth = need if depth is None else depth
        self.partition_x = HierarchicalPartition(gx, depth=depth)
        self.partition_y = HierarchicalPartition(gy, depth=depth)
        self._levels = {}

    # convenience constructors -------------------------------------------------

    @classmethod
    def optimal_transport(cls, cost, mu, nu, **kw) -> "ProblemSpec":
        """Balanced OT with product reference measure ``mu (x) nu``."""
        from .proxdiv import FixedMarginal
        fx, fy = FixedMarginal(mu), FixedMarginal(nu)
        return cls(cost, fx, fy, fx.target, fy.target, **kw)

    @classmethod
    def unbalanced(cls, cost, mu, nu, lam, **kw) -> "ProblemSpec":
        """KL-fidelity transport with Lebesgue reference measure."""
        from .proxdiv import KLFidelity
        return cls(cost, KLFidelity(mu, lam), KLFidelity(nu, lam),
                   cost.geometry_x.lebesgue(), cost.geometry_y.lebesgue(), **kw)

    @property
    def depth(self) -> int:
        return self.partition_x.depth

    @property
    def shape(self):
        return self.cost.shape

    def level(self, i: int) -> "LevelProblem":
        if i not in self._levels:
            self._levels[i] = LevelProblem(self, i)
        return self._levels[i]


class LevelProblem:
    """View of a :class:`ProblemSpec` coarsened to partition level ``i``."""

    def __init__(self, spec: ProblemSpec, i: int):
        if not 0 <= i <= spec.depth:
            raise ValueError(f"level {i} outside 0..{spec.depth}")
        self.spec = spec
        self.index = i
        self.partition_x = spec.partition_x
        self.partition_y = spec.partition_y
        self.cost = spec.cost
        if i == 0:
            self.fx, self.fy = spec.fx, spec.fy
            self.rho_x, self.rho_y = spec.rho_x, spec.rho_y
        else:
            self.fx = spec.fx.coarsen(spec.partition_x, i)
            self.fy = None if spec.fy is None else spec.fy.coarsen(spec.partition_y, i)
            self.rho_x = spec.partition_x.coarsen(spec.rho_x)[i]
            self.rho_y = spec.partition_y.coarsen(spec.rho_y)[i]
        self.nx = spec.partition_x.levels[i].size
        self.ny = spec.partition_y.levels[i].size
        self.active_x = self.fx.support() & (self.rho_x > 0)
        # fy may be None for problems whose Y side is coupled externally
        self.active_y = (self.rho_y > 0) if self.fy is None else self.fy.support() & (self.rho_y > 0)

    @property
    def shape(self):
        return self.nx, self.ny

    def rho_total(self) -> float:
        return math.fsum(self.rho_x) * math.fsum(self.rho_y)

    def costs(self, a, b) -> np.ndarray:
        return self.cost.cell_costs(self.partition_x, self.partition_y, self.index, a, b)

    def dense_cost(self) -> np.ndarray:
        _gate(self.nx, self.ny)
        a, b = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        return self.costs(a.ravel(), b.ravel()).reshape(self.nx, self.ny)

    def initial_duals(self):
        """Zero duals on active points, ``-inf`` on inactive ones."""
        return (np.where(self.active_x, 0.0, -np.inf), np.where(self.active_y, 0.0, -np.inf))


def _gate(nx, ny):
    if nx > DENSE_GATE or ny > DENSE_GATE:
        raise MemoryError(f"dense kernel path limited to {DENSE_GATE} points per side")


# ----------------------------------------------------------------------------
# dense kernels

def get_kernel_dense(problem: LevelProblem, eps: float) -> np.ndarray:
    """``exp(-c/eps) * rho``; infinite costs give exact zeros."""
    c = problem.dense_cost()
    return np.exp(-c / eps) * np.outer(problem.rho_x, problem.rho_y)


def stabilized_exponent(c, alpha, beta):
    """``c - alpha - beta`` with ``+inf`` wherever a dual is ``-inf``."""
    with np.errstate(invalid="ignore"):
        e = c - alpha - beta
    return np.where(np.isnan(e), np.inf, e)


def get_stabilized_kernel_dense(problem: LevelProblem, alpha, beta, eps: float) -> np.ndarray:
    """``exp(-(c - alpha - beta)/eps) * rho`` with cancellation inside the exponent."""
    c = problem.dense_cost()
    e = stabilized_exponent(c, np.asarray(alpha, float)[:, None], np.asarray(beta, float)[None, :])
    with np.errstate(over="ignore"):
        return np.exp(-e / eps) * np.outer(problem.rho_x, problem.rho_y)


# ----------------------------------------------------------------------------
# sparse kernel

class SparseKernel:
    """Truncated stabilized kernel as sorted ``(row, col, value)`` triples.

    ``costs`` holds the cost of every stored pair so that duality gaps can
    be evaluated without touching the cost function again.
    """

    def __init__(self, rows, cols, values, shape, costs=None):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=float)
        order = np.lexsort((cols, rows))
        self.rows, self.cols, self.values = rows[order], cols[order], values[order]
        self.costs = None if costs is None else np.asarray(costs, dtype=float)[order]
        if np.any(~np.isfinite(self.values)) or np.any(self.values <= 0):
            raise ValueError("kernel values must be positive and finite")
        self.shape = (int(shape[0]), int(shape[1]))
        self.csr = sp.csr_matrix((self.values, (self.rows, self.cols)), shape=self.shape)
        self.csr_t = self.csr.T.tocsr()

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def row_counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.shape[0])

    def col_counts(self) -> np.ndarray:
        return np.bincount(self.cols, minlength=self.shape[1])

    def apply(self, v) -> np.ndarray:
        return self.csr @ np.asarray(v, dtype=float)

    def apply_t(self, u) -> np.ndarray:
        return self.csr_t @ np.asarray(u, dtype=float)

    def coupling_values(self, u, v) -> np.ndarray:
        """Entries of ``diag(u) K diag(v)`` on the support."""
        return np.asarray(u)[self.rows] * self.values * np.asarray(v)[self.cols]

    def todense(self) -> np.ndarray:
        _gate(*self.shape)
        return self.csr.toarray()


def apply_kernel(kernel: SparseKernel, v) -> np.ndarray:
    return kernel.apply(v)


def apply_kernel_transposed(kernel: SparseKernel, u) -> np.ndarray:
    return kernel.apply_t(u)


def _expand_children(lx, ly, a, b):
    """All child pairs of the cell pairs ``(a, b)``."""
    ptr_x, idx_x = lx.child_ptr, lx.child_idx
    ptr_y, idx_y = ly.child_ptr, ly.child_idx
    na = ptr_x[a + 1] - ptr_x[a]
    nb = ptr_y[b + 1] - ptr_y[b]
    tot = na * nb
    pid = np.repeat(np.arange(a.size), tot)
    k = np.arange(int(tot.sum())) - np.repeat(np.cumsum(tot) - tot, tot)
    nbp = nb[pid]
    return idx_x[ptr_x[a][pid] + k // nbp], idx_y[ptr_y[b][pid] + k % nbp]


def get_truncated_kernel(problem: LevelProblem, alpha, beta, eps: float, theta: float) -> SparseKernel:
    """Kernel restricted to ``exp(-(c - alpha - beta)/eps) >= theta``.

    The candidate pairs are found by a breadth-first scan down the two
    partitions, starting at the top cell pair. A cell pair is discarded when
    the lower bound of the cost minus the max-extended duals already exceeds
    ``-eps log theta``, since then no descendant pair can pass the test.
    """
    if not theta > 0:
        raise ValueError("theta must be positive")
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    i = problem.index
    px, py = problem.partition_x, problem.partition_y
    ax = extend_dual(px, alpha, base_level=i)
    by = extend_dual(py, beta, base_level=i)
    thresh = -eps * math.log(theta)
    a = np.zeros(1, dtype=np.int64)
    b = np.zeros(1, dtype=np.int64)
    for j in range(px.depth, i, -1):
        lb = problem.cost.cell_lower_bounds(px, py, j, a, b)
        da, db = ax[j - i][a], by[j - i][b]
        val = stabilized_exponent(lb, da, db)
        slack = 1e-9 * (1.0 + abs(thresh) + np.abs(np.where(np.isfinite(val), lb, 0.0))
                        + np.abs(np.where(np.isfinite(da), da, 0.0))
                        + np.abs(np.where(np.isfinite(db), db, 0.0)))
        keep = val <= thresh + slack
        a, b = _expand_children(px.levels[j], py.levels[j], a[keep], b[keep])
    c = problem.costs(a, b)
    e = stabilized_exponent(c, alpha[a], beta[b])
    with np.errstate(over="ignore"):
        k = np.exp(-e / eps)
    keep = k >= theta
    a, b, c, k = a[keep], b[keep], c[keep], k[keep]
    vals = k * problem.rho_x[a] * problem.rho_y[b]
    pos = vals > 0
    return SparseKernel(a[pos], b[pos], vals[pos], problem.shape, costs=c[pos])


def truncated_support_bruteforce(problem: LevelProblem, alpha, beta, eps, theta):
    """Exhaustive threshold scan; the oracle for :func:`get_truncated_kernel`."""
    c = problem.dense_cost()
    e = stabilized_exponent(c, np.asarray(alpha)[:, None], np.asarray(beta)[None, :])
    with np.errstate(over="ignore"):
        keep = np.exp(-e / eps) >= theta
    keep &= np.outer(problem.rho_x, problem.rho_y) > 0
    return np.nonzero(keep)


# ----------------------------------------------------------------------------
# gap accounting

@dataclass
class GapReport:
    restricted_gap: float
    truncation_bound: float
    discarded_mass_exact: Optional[float] = None


def truncation_bound(problem: LevelProblem, u_tilde, v_tilde, theta) -> float:
    """``|u~|_inf |v~|_inf theta rho(X x Y)``."""
    return float(np.max(u_tilde, initial=0.0) * np.max(v_tilde, initial=0.0) * theta
                 * problem.rho_total())


def discarded_mass_exact(problem: LevelProblem, state, kernel: SparseKernel) -> float:
    """Mass of ``diag(u) kappa diag(v)`` outside the kernel support (dense)."""
    full = get_stabilized_kernel_dense(problem, state.alpha_hat, state.beta_hat, state.eps)
    full[kernel.rows, kernel.cols] = 0.0
    ut = np.where(problem.active_x, state.u_tilde, 0.0)
    vt = np.where(problem.active_y, state.v_tilde, 0.0)
    return float(ut @ full @ vt)


def truncation_gap(problem: LevelProblem, state, kernel: SparseKernel, theta: float,
                   exact: bool = False) -> GapReport:
    bound = truncation_bound(problem, state.u_tilde, state.v_tilde, theta)
    alpha, beta = state.duals()
    pi = kernel.coupling_values(state.u_tilde, state.v_tilde)
    gap = primal_dual_gap(problem, kernel, pi, alpha, beta, state.eps)
    disc = None
    if exact:
        disc = discarded_mass_exact(problem, state, kernel)
        if disc > bound * (1 + 1e-9) + 1e-300:
            raise AssertionError(f"discarded mass {disc} exceeds bound {bound}")
    return GapReport(gap, bound, disc)


def _kl_to_stabilized(problem, kernel, pi, alpha, beta, eps):
    """``KL(pi | K(alpha, beta))`` over the support, ``K`` the stabilized kernel."""
    e = stabilized_exponent(kernel.costs, alpha[kernel.rows], beta[kernel.cols])
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        logk = -e / eps + np.log(problem.rho_x[kernel.rows] * problem.rho_y[kernel.cols])
        k = np.exp(logk)
        pos = pi > 0
        if np.any(pos & ~np.isfinite(logk)):
            return math.inf
        terms = np.where(pos, pi * (np.log(np.where(pos, pi, 1.0)) - logk) - pi, 0.0) + k
    return math.fsum(terms)


def primal_dual_gap(problem: LevelProblem, kernel: SparseKernel, pi, alpha, beta, eps) -> float:
    """``E(pi) - J(alpha, beta)`` of the problem restricted to the kernel support.

    Written as the sum of the two Fenchel-Young gaps of ``F_X``, ``F_Y`` at
    the marginals of ``pi`` and ``eps KL(pi | K(alpha, beta))``; every term is
    non-negative, and the last one vanishes for ``pi = diag(u) K diag(v)``.
    """
    pi = np.asarray(pi, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    m = np.bincount(kernel.rows, weights=pi, minlength=problem.nx)
    n = np.bincount(kernel.cols, weights=pi, minlength=problem.ny)
    gx = problem.fx.fenchel_gap(m, alpha)
    gy = problem.fy.fenchel_gap(n, beta)
    if not (math.isfinite(gx) and math.isfinite(gy)):
        return math.inf
    return gx + gy + eps * _kl_to_stabilized(problem, kernel, pi, alpha, beta, eps)


def primal_value(problem: LevelProblem, kernel: SparseKernel, pi) -> float:
    """Unregularized primal value ``F_X + F_Y + <c, pi>``."""
    pi = np.asarray(pi, dtype=float)
    m = np.bincount(kernel.rows, weights=pi, minlength=problem.nx)
    n = np.bincount(kernel.cols, weights=pi, minlength=problem.ny)
    pos = pi > 0
    return problem.fx.value(m) + problem.fy.value(n) + math.fsum(kernel.costs[pos] * pi[pos])


def write_coupling(path, kernel: SparseKernel, pi) -> None:
    """One ``row col value`` line per stored entry, row-major order."""
    with open(path, "w") as fh:
        for r, c, v in zip(kernel.rows.tolist(), kernel.cols.tolist(), np.asarray(pi).tolist()):
            fh.write(f"{r} {c} {v!r}\n")
