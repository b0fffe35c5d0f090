import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scalingot.measures import (DiscreteMeasure, GridGeometry, kl_conjugate, kl_divergence,
                                softmax, softmin)


def test_grid_geometry_validation():
    g = GridGeometry((4, 3), 0.5, (1.0, 2.0))
    assert g.dim == 2 and g.size == 12
    assert np.allclose(g.positions()[5], [1.0 + 0.5 * 1, 2.0 + 0.5 * 2])
    with pytest.raises(ValueError):
        GridGeometry((0,))
    with pytest.raises(ValueError):
        GridGeometry((3,), spacing=0.0)
    with pytest.raises(ValueError):
        GridGeometry((3,), origin=(0.0, 1.0))


def test_measure_rejects_negative_and_nan():
    with pytest.raises(ValueError):
        DiscreteMeasure([1.0, -1e-300])
    with pytest.raises(ValueError):
        DiscreteMeasure([np.nan])
    with pytest.raises(ValueError):
        DiscreteMeasure([1.0, 2.0], GridGeometry((3,)))


def test_total_mass_reproducible():
    w = np.random.default_rng(3).random(1000)
    m = DiscreteMeasure(w)
    assert m.total_mass() == DiscreteMeasure(w.copy()).total_mass() == math.fsum(w)


def test_kl_examples():
    assert kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert kl_divergence([1, 0], [0, 1]) == math.inf
    # hand evaluation: 2 log 2 - 2 + 1
    assert kl_divergence([2.0], [1.0]) == pytest.approx(0.386294361119891, abs=1e-12)
    # zero against zero contributes nothing
    assert kl_divergence([0.0, 1.0], [0.0, 1.0]) == 0.0
    with pytest.raises(ValueError):
        kl_divergence([1.0], [1.0, 2.0])


def test_kl_conjugate_examples():
    assert kl_conjugate([0.0, 0.0], [1.0, 2.0]) == 0.0
    assert kl_conjugate([math.log(2.0)], [3.0]) == pytest.approx(3.0, rel=1e-15)
    assert kl_conjugate([-1e6], [1.0]) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        kl_conjugate([0.0], [1.0, 1.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=1, max_size=12), st.integers(0, 2 ** 31))
def test_gibbs_inequality(w, seed):
    a = np.array(w)
    b = np.random.default_rng(seed).random(a.size) + 0.01
    a, b = a / a.sum(), b / b.sum()
    assert kl_divergence(a, b) >= -1e-14
    assert kl_divergence(a, a) == 0.0


def test_softmin_examples():
    assert softmin([5.0], 0.3) == 5.0
    assert softmin([0.0, 0.0], 1.0) == pytest.approx(-0.6931471805599453, abs=1e-15)
    assert abs(softmin([0.0, 1000.0], 1e-3)) <= 1e-12
    assert softmax([5.0], 2.0) == 5.0
    assert softmax([0.0, 0.0], 1.0) == pytest.approx(math.log(2.0), abs=1e-15)
    with pytest.raises(ValueError):
        softmin([], 1.0)
    with pytest.raises(ValueError):
        softmax([], 1.0)


def test_softmin_bounds_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = rng.integers(1, 20)
        a = rng.normal(scale=10.0 ** rng.integers(-2, 6), size=n)
        eps = 10.0 ** rng.uniform(-6, 1)
        s, t = softmin(a, eps), softmax(a, eps)
        slack = 1e-12 * max(1.0, np.abs(a).max())
        assert a.min() - eps * math.log(n) - slack <= s <= a.min() + slack
        assert a.max() - slack <= t <= a.max() + eps * math.log(n) + slack
        assert t == -softmin(-a, eps)
        assert np.isfinite(s) and np.isfinite(t)


def test_softmin_monotone_in_eps():
    a = np.array([0.3, 1.0, 0.31, 2.0])
    vals = [softmin(a, e) for e in (1.0, 0.1, 0.01)]
    assert vals[0] < vals[1] < vals[2] <= a.min()


def test_softmin_extreme_range():
    a = np.array([-1e6, 0.0, 1e6])
    assert softmin(a, 1e-6) == -1e6
    assert softmax(a, 1e-6) == 1e6
