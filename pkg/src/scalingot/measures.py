"""Finite measures on grids, Kullback-Leibler primitives and safe softmin/softmax."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class GridGeometry:
    """Equidistant Cartesian grid.

    Points are enumerated in row-major (C) order; point ``k`` has per-axis
    index ``np.unravel_index(k, shape)`` and coordinates
    ``origin + spacing * index``.
    """

    shape: tuple
    spacing: float = 1.0
    origin: Optional[tuple] = None

    def __post_init__(self):
        shape = tuple(int(n) for n in np.atleast_1d(self.shape))
        if len(shape) < 1 or any(n < 1 for n in shape):
            raise ValueError(f"invalid grid shape {self.shape!r}")
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise ValueError(f"grid spacing must be positive, got {self.spacing!r}")
        origin = (0.0,) * len(shape) if self.origin is None else tuple(float(o) for o in self.origin)
        if len(origin) != len(shape):
            raise ValueError("origin and shape have different dimension")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "origin", origin)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def indices(self) -> np.ndarray:
        """Per-axis integer indices of all points, shape ``(size, dim)``."""
        return np.stack(np.unravel_index(np.arange(self.size), self.shape), axis=1)

    def positions(self) -> np.ndarray:
        """Coordinates of all points, shape ``(size, dim)``."""
        return np.asarray(self.origin) + self.spacing * self.indices()

    def cell_volume(self) -> float:
        return self.spacing ** self.dim

    def lebesgue(self) -> np.ndarray:
        """Discretized Lebesgue measure (cell volume per point)."""
        return np.full(self.size, self.cell_volume())


@dataclass(frozen=True)
class DiscreteMeasure:
    """Non-negative weights over a finite point set, optionally on a grid."""

    weights: np.ndarray
    geometry: Optional[GridGeometry] = field(default=None, compare=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("measure weights must be finite and non-negative")
        if self.geometry is not None and self.geometry.size != w.size:
            raise ValueError(
                f"measure has {w.size} weights but grid has {self.geometry.size} points")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.size

    def total_mass(self) -> float:
        # math.fsum is order independent and exactly rounded
        return math.fsum(self.weights)

    def normalized(self) -> "DiscreteMeasure":
        return DiscreteMeasure(self.weights / self.total_mass(), self.geometry)

    def support(self) -> np.ndarray:
        return self.weights > 0


def _as_weights(m) -> np.ndarray:
    if isinstance(m, DiscreteMeasure):
        return m.weights
    return np.asarray(m, dtype=float).reshape(-1)


def kl_divergence(mu, nu) -> float:
    """Kullback-Leibler divergence ``KL(mu|nu)`` with mass correction.

    Returns ``sum_{mu>0} mu log(mu/nu) - mu(Z) + nu(Z)`` if both arguments are
    non-negative and ``mu`` is absolutely continuous w.r.t. ``nu``, and
    ``inf`` otherwise.
    """
    a, b = _as_weights(mu), _as_weights(nu)
    if a.shape != b.shape:
        raise ValueError(f"index sets differ: {a.shape} vs {b.shape}")
    if np.any(a < 0) or np.any(b < 0):
        return math.inf
    pos = a > 0
    if np.any(b[pos] == 0):
        return math.inf
    terms = a[pos] * np.log(a[pos] / b[pos])
    return math.fsum(terms) - math.fsum(a) + math.fsum(b)


def kl_conjugate(alpha, nu) -> float:
    """Convex conjugate of ``KL(.|nu)``: ``sum (exp(alpha) - 1) nu``."""
    a, b = np.asarray(alpha, dtype=float).reshape(-1), _as_weights(nu)
    if a.shape != b.shape:
        raise ValueError(f"index sets differ: {a.shape} vs {b.shape}")
    with np.errstate(invalid="ignore"):
        terms = np.where(b == 0, 0.0, np.expm1(a) * b)
    return math.fsum(terms)


def softmin(a: Sequence[float], eps: float) -> float:
    """``-eps log sum exp(-a/eps)``, evaluated with the min-shift."""
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.size == 0:
        raise ValueError("softmin of an empty vector")
    if not eps > 0:
        raise ValueError("eps must be positive")
    m = a.min()
    if not np.isfinite(m):
        return float(m)
    return float(m - eps * np.log(np.sum(np.exp(-(a - m) / eps))))


def softmax(a: Sequence[float], eps: float) -> float:
    """``eps log sum exp(a/eps)``; equals ``-softmin(-a, eps)``."""
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.size == 0:
        raise ValueError("softmax of an empty vector")
    return -softmin(-a, eps)
