"""Marginal functions and their (stabilized) proxdiv operators.

A proxdiv operator maps ``(sigma, gamma)`` to
``ProxKL_F(exp(-gamma/eps) * sigma) / sigma``; with ``gamma = 0`` this is the
plain operator of the unstabilized scaling algorithm. All maps act pointwise.
"""

from __future__ import annotations

import math
from typing import List, Optional, Sequence

import numpy as np

from .measures import DiscreteMeasure, kl_divergence


class StarvationError(RuntimeError):
    """A row or column with positive required mass has an empty kernel."""


def _weights(m) -> np.ndarray:
    if isinstance(m, DiscreteMeasure):
        return m.weights
    return np.asarray(m, dtype=float)


# --------------------------------------------------------------------------
# Lambert W

def lambert_w_log(s, iterations: int = 6) -> np.ndarray:
    """Principal branch Lambert W evaluated at ``exp(s)``.

    Working with the logarithm of the argument keeps very large arguments
    representable. The start value is ``log(1 + z)`` for ``z <= e`` and the
    asymptotic expansion ``s - log s + log(s)/s`` above, refined by Halley
    steps on ``w + log(w) - s = 0``.
    """
    s = np.asarray(s, dtype=float)
    w = np.empty_like(s)
    small = s <= 1.0
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        w[small] = np.log1p(np.exp(s[small]))
        sl = s[~small]
        w[~small] = sl - np.log(sl) + np.log(sl) / sl
        pos = w > 0
        for _ in range(iterations):
            wp = w[pos]
            g = wp + np.log(wp) - s[pos]
            # Halley step 2 g g' / (2 g'^2 - g g'') with g' = (w+1)/w and
            # g'' = -1/w^2, multiplied through by w^2 to avoid overflow
            step = 2.0 * g * (wp + 1.0) * wp / (2.0 * (wp + 1.0) ** 2 + g)
            w_new = wp - step
            # Halley may overshoot below zero for tiny w; halve instead
            w_new = np.where(w_new > 0, w_new, 0.5 * wp)
            w[pos] = w_new
    w[s == -np.inf] = 0.0
    return w


def lambert_w(z) -> np.ndarray:
    """Principal branch Lambert W for ``z >= 0``."""
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("lambert_w is implemented for non-negative arguments only")
    with np.errstate(divide="ignore"):
        return lambert_w_log(np.log(z))


# --------------------------------------------------------------------------
# pointwise proxdiv operators

def proxdiv_fixed(sigma, gamma, eps, target) -> np.ndarray:
    """``target / sigma``; ``gamma`` and ``eps`` do not enter."""
    sigma = np.asarray(sigma, dtype=float)
    mu = _weights(target)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = mu / sigma
    if np.isfinite(out).all():
        return out
    starved = (sigma <= 0) & (mu > 0)
    if np.any(starved):
        raise StarvationError(
            f"{int(starved.sum())} entries with positive target mass have empty kernel "
            f"(first at index {int(np.flatnonzero(starved)[0])}); "
            "lower theta or absorb more often")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(mu > 0, mu / np.where(sigma > 0, sigma, 1.0), 0.0)


def proxdiv_kl(sigma, gamma, eps, target, lam) -> np.ndarray:
    """Proxdiv of ``lam * KL(.|target)``.

    ``exp(-gamma/(lam+eps)) * (target/sigma)**(lam/(lam+eps))``
    """
    sigma = np.asarray(sigma, dtype=float)
    mu = _weights(target)
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), sigma.shape)
    p = lam / (lam + eps)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = np.where(mu > 0, mu / np.where(sigma > 0, sigma, 1.0), 0.0)
        out = np.exp(-gamma / (lam + eps)) * ratio ** p
    return np.where(mu > 0, out, 0.0)


def proxdiv_barycenter(nus: Sequence[np.ndarray], betas: Sequence[np.ndarray], eps,
                       weights, return_barycenter: bool = False):
    """Proxdiv of the consensus constraint of the Wasserstein barycenter.

    The common marginal is ``sigma = exp(sum_i w_i (log nu_i - beta_i/eps))``,
    accumulated in the log domain, and the outputs are ``sigma / nu_i``.
    Entries where some positively weighted ``nu_i`` vanishes get ``sigma = 0``.
    """
    nus = [np.asarray(n, dtype=float) for n in nus]
    weights = np.asarray(weights, dtype=float)
    log_sigma = np.zeros_like(nus[0])
    dead = np.zeros(nus[0].shape, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for n, b, w in zip(nus, betas, weights):
            if w == 0:
                continue
            dead |= n <= 0
            log_sigma += w * (np.log(np.where(n > 0, n, 1.0)) - np.asarray(b, float) / eps)
        sigma = np.where(dead, 0.0, np.exp(log_sigma))
        outs = [np.where(dead | (n <= 0), 0.0, sigma / np.where(n > 0, n, 1.0)) for n in nus]
    if return_barycenter:
        return outs, sigma
    return outs


def proxdiv_wfr_barycenter(nus: Sequence[np.ndarray], betas: Sequence[np.ndarray], eps,
                           weights, big_lambda, return_barycenter: bool = False):
    """Proxdiv of ``inf_sigma Lambda * sum_i w_i KL(.|sigma)`` (KL-fidelity barycenter).

    Output ``i`` is ``nu_i^(-L/(eps+L)) exp(-beta_i/(eps+L)) T^(L/eps)`` with
    ``T = sum_j w_j nu_j^(eps/(eps+L)) exp(-beta_j/(eps+L))``. The minimizing
    ``sigma`` equals ``T^((eps+L)/eps)``.
    """
    lam = float(big_lambda)
    nus = [np.asarray(n, dtype=float) for n in nus]
    weights = np.asarray(weights, dtype=float)
    k = eps + lam
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        terms = []
        for n, b, w in zip(nus, betas, weights):
            if w == 0:
                continue
            terms.append(math.log(w) + (eps * np.log(n) - np.asarray(b, float)) / k)
        stack = np.stack(terms)
        top = np.max(stack, axis=0)
        top_safe = np.where(np.isfinite(top), top, 0.0)
        log_t = top_safe + np.log(np.sum(np.exp(stack - top_safe), axis=0))
        log_t = np.where(np.isfinite(top), log_t, -np.inf)
        outs = []
        for n, b in zip(nus, betas):
            lo = -lam / k * np.log(n) - np.asarray(b, float) / k + lam / eps * log_t
            outs.append(np.where(np.isfinite(lo), np.exp(lo), 0.0))
        sigma = np.exp(k / eps * log_t)
    if return_barycenter:
        return outs, sigma
    return outs


def proxdiv_porous_medium(sigma, gamma, eps, tau, potential, lebesgue) -> np.ndarray:
    """Proxdiv of ``2*tau*F`` with ``F(m) = sum m^2/L + sum v*m``.

    The KL prox of ``2 tau F`` at ``s = exp(-gamma/eps) sigma`` is
    ``(eps L / (4 tau)) W((4 tau / (eps L)) s exp(-2 tau v / eps))``, evaluated
    with the Lambert W in the log domain. ``v = +inf`` yields 0.
    """
    sigma = np.asarray(sigma, dtype=float)
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), sigma.shape)
    v = np.broadcast_to(np.asarray(potential, dtype=float), sigma.shape)
    leb = np.broadcast_to(np.asarray(lebesgue, dtype=float), sigma.shape)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        shift = -(gamma + 2.0 * tau * v) / eps
        log_z = math.log(4.0 * tau / eps) + np.log(sigma) - np.log(leb) + shift
        w = lambert_w_log(log_z)
        # W(z)/z -> 1 for z -> 0; use the exact ratio W(z)/z = exp(-W(z))
        out = np.exp(shift - w)
    barrier = ~np.isfinite(v) | (v == np.inf)
    return np.where(barrier, 0.0, out)


# --------------------------------------------------------------------------
# marginal functions

class MarginalFunction:
    """Separable convex marginal function ``F``.

    Subclasses provide the stabilized proxdiv, the value ``F(m)``, the
    conjugate at ``-alpha`` and their coarsening onto partition levels.
    ``requires_mass`` marks functions for which an active point with an
    empty kernel row makes the problem infeasible.
    """

    requires_mass = True

    def proxdiv(self, sigma, gamma, eps) -> np.ndarray:
        raise NotImplementedError

    def value(self, m) -> float:
        raise NotImplementedError

    def conjugate_neg(self, alpha) -> float:
        """``F^*(-alpha)``."""
        raise NotImplementedError

    def support(self) -> np.ndarray:
        """Points that can carry mass; the others are removed from the problem."""
        raise NotImplementedError

    def coarsen(self, partition, level: int) -> "MarginalFunction":
        raise ValueError(f"{type(self).__name__} has no coarse-level representation")

    def fenchel_gap(self, m, alpha) -> float:
        """``F(m) + F^*(-alpha) + <alpha, m>``, non-negative by Fenchel-Young."""
        m = np.asarray(m, dtype=float)
        alpha = np.asarray(alpha, dtype=float)
        act = self.support()
        lin = math.fsum(alpha[act] * m[act])
        if np.any(m[~act] > 0):
            return math.inf
        return self.value(m) + self.conjugate_neg(alpha) + lin

    def mass_scale(self) -> float:
        return 1.0


class FixedMarginal(MarginalFunction):
    """Indicator of ``{target}``.

    Marginals within ``feasibility_tol * max(1, mass)`` in the sup norm count
    as feasible, so that the primal-dual gap stays finite at round-off level.
    """

    def __init__(self, target, feasibility_tol: float = 1e-6):
        self.target = np.array(_weights(target), dtype=float)
        if np.any(self.target < 0) or not np.all(np.isfinite(self.target)):
            raise ValueError("target must be finite and non-negative")
        self.feasibility_tol = feasibility_tol

    def proxdiv(self, sigma, gamma, eps):
        return proxdiv_fixed(sigma, gamma, eps, self.target)

    def value(self, m):
        m = np.asarray(m, dtype=float)
        tol = self.feasibility_tol * max(1.0, self.target.sum())
        return 0.0 if np.max(np.abs(m - self.target), initial=0.0) <= tol else math.inf

    def conjugate_neg(self, alpha):
        act = self.support()
        return -math.fsum(np.asarray(alpha)[act] * self.target[act])

    def support(self):
        return self.target > 0

    def coarsen(self, partition, level):
        return FixedMarginal(partition.coarsen(self.target)[level], self.feasibility_tol)

    def mass_scale(self):
        return float(self.target.sum())


class KLFidelity(MarginalFunction):
    """``lam * KL(.|target)``."""

    def __init__(self, target, lam: float):
        if not lam > 0:
            raise ValueError("KL fidelity weight must be positive")
        self.target = np.array(_weights(target), dtype=float)
        self.lam = float(lam)

    def proxdiv(self, sigma, gamma, eps):
        return proxdiv_kl(sigma, gamma, eps, self.target, self.lam)

    def value(self, m):
        return self.lam * kl_divergence(np.asarray(m, float), self.target)

    def conjugate_neg(self, alpha):
        act = self.support()
        a = np.asarray(alpha, dtype=float)[act]
        return self.lam * math.fsum(np.expm1(-a / self.lam) * self.target[act])

    def support(self):
        return self.target > 0

    def coarsen(self, partition, level):
        return KLFidelity(partition.coarsen(self.target)[level], self.lam)

    def mass_scale(self):
        return float(self.target.sum())


class PorousMediumProx(MarginalFunction):
    """``2 tau F`` with ``F(m) = sum m^2/L + sum v m`` (porous medium energy)."""

    requires_mass = False

    def __init__(self, tau: float, potential, lebesgue):
        if not tau > 0:
            raise ValueError("time step must be positive")
        self.tau = float(tau)
        self.potential = np.array(potential, dtype=float)
        self.lebesgue = np.broadcast_to(np.asarray(lebesgue, dtype=float), self.potential.shape).copy()
        if np.any(np.isnan(self.potential)) or np.any(self.potential == -np.inf):
            raise ValueError("potential entries must be finite or +inf")

    def proxdiv(self, sigma, gamma, eps):
        return proxdiv_porous_medium(sigma, gamma, eps, self.tau, self.potential, self.lebesgue)

    def value(self, m):
        m = np.asarray(m, dtype=float)
        act = self.support()
        if np.any(m[~act] > 0) or np.any(m < 0):
            return math.inf
        ma = m[act]
        return 2.0 * self.tau * math.fsum(ma * ma / self.lebesgue[act] + self.potential[act] * ma)

    def conjugate_neg(self, alpha):
        act = self.support()
        a = np.asarray(alpha, dtype=float)[act]
        pos = np.maximum(0.0, -a - 2.0 * self.tau * self.potential[act])
        return math.fsum(self.lebesgue[act] * pos * pos) / (8.0 * self.tau)

    def support(self):
        return np.isfinite(self.potential)


class BarycenterConsensus:
    """Consensus constraint of the Wasserstein barycenter with weights ``lam_i``."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("barycenter weights must be non-negative and sum to 1")
        self.weights = w

    def proxdiv(self, nus, betas, eps, return_barycenter=False):
        return proxdiv_barycenter(nus, betas, eps, self.weights, return_barycenter)


class WFRBarycenterConsensus:
    """``inf_sigma Lambda sum_i lam_i KL(nu_i|sigma)``."""

    def __init__(self, weights, big_lambda: float):
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("barycenter weights must be non-negative and sum to 1")
        if not big_lambda > 0:
            raise ValueError("fidelity weight must be positive")
        self.weights = w
        self.big_lambda = float(big_lambda)

    def proxdiv(self, nus, betas, eps, return_barycenter=False):
        return proxdiv_wfr_barycenter(nus, betas, eps, self.weights, self.big_lambda,
                                      return_barycenter)
