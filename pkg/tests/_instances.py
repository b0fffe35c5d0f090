"""Deterministic test instances shared by several test modules."""

import numpy as np

from scalingot.costs import SquaredEuclidean
from scalingot.kernel import ProblemSpec
from scalingot.measures import GridGeometry


def grid(n):
    return GridGeometry((n,), 1.0 / (n - 1))


def bump_pair(n):
    """Two smooth positive densities on ``n`` points of [0, 1]."""
    x = np.linspace(0.0, 1.0, n)
    mu = np.exp(-(x - 0.3) ** 2 / 0.01) + 1e-3
    nu = np.exp(-(x - 0.7) ** 2 / 0.02) + 1e-3
    return mu / mu.sum(), nu / nu.sum()


def ot_1d(n):
    g = grid(n)
    mu, nu = bump_pair(n)
    return ProblemSpec.optimal_transport(SquaredEuclidean(g, g), mu, nu), g


def random_simplex(rng, n, floor=0.05):
    w = rng.random(n) + floor
    return w / w.sum()


def atomic_measure(rng, n, atoms):
    """``n`` positive masses that are integer multiples of ``1/atoms``."""
    cuts = np.sort(rng.choice(np.arange(1, atoms), size=n - 1, replace=False))
    counts = np.diff(np.concatenate([[0], cuts, [atoms]]))
    return counts / atoms
