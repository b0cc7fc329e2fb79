import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from soslab.disorder import DisorderField, DisorderParams
from soslab import potential as P


def test_zero_disorder_value(zero_field):
    expected = -math.log(sum(math.exp(-0.5 * (5 * l) ** 2) for l in range(-8, 9)))
    assert P.potential_value(zero_field, (0,), 0.0) == pytest.approx(expected, rel=1e-12)
    assert P.potential_value(zero_field, (0,), 0.0) == pytest.approx(-7.4533e-6, rel=1e-4)


@given(st.floats(-30, 30))
def test_symmetry_and_periodicity(m):
    zero_field = DisorderField(DisorderParams.zero(mstar=5.0))
    v = P.potential_value(zero_field, (0,), m)
    assert P.potential_value(zero_field, (0,), -m) == pytest.approx(v, abs=1e-12)
    assert P.potential_value(zero_field, (0,), m + 5.0) == pytest.approx(v, abs=1e-10)


def test_window_rejected(zero_field):
    with pytest.raises(ValueError):
        P.potential_value(zero_field, (0,), 0.0, window=2)
    with pytest.raises(ValueError):
        P.kernel(zero_field, (0,), 0.0, window=1)


@given(st.floats(-20, 20), st.integers(0, 100))
def test_window_growth_within_bar(m, seed):
    f = DisorderField(DisorderParams(mstar=2.0, sigma_eta=0.1, seed=seed))
    a = P.potential_eval(f, (0,), m, 3)
    b = P.potential_eval(f, (0,), m, 5)
    assert abs(a.value - b.value) <= a.tail_bar + 1e-14


def test_kernel_examples(zero_field):
    k = P.kernel(zero_field, (0,), 0.0)
    assert k.prob(0) == pytest.approx(0.9999925, abs=1e-7)
    assert k.prob(1) == pytest.approx(3.7266e-6, rel=1e-4)
    assert k.prob(-1) == pytest.approx(k.prob(1), rel=1e-12)
    half = P.kernel(zero_field, (0,), 2.5)
    assert half.prob(0) == pytest.approx(half.prob(1), rel=1e-12)
    for h in range(-2, 3):
        assert P.kernel_prob(zero_field, (0,), h + 2, 0.7 + 10) == pytest.approx(P.kernel_prob(zero_field, (0,), h, 0.7), rel=1e-10)


@given(st.floats(-40, 40), st.integers(0, 1000))
def test_normalization_identity(m, seed):
    f = DisorderField(DisorderParams(mstar=4.0, seed=seed))
    k = P.kernel(f, (1,), m)
    pe = P.potential_eval(f, (1,), m)
    total = sum(k.probs.values())
    assert abs(total + k.tail_mass_bound - 1) <= 1e-12
    assert total <= 1 + 1e-15
    assert abs(k.norm * math.exp(pe.value) - 1) <= 1e-12 + pe.tail_bar + k.tail_mass_bound


def test_maximizer_zero_disorder(zero_field):
    assert abs(P.kernel_maximizer(zero_field, (0,), 0)) < 1e-10
    assert P.kernel_maximizer(zero_field, (0,), 2) == pytest.approx(10.0, abs=1e-9)


def test_pair_formula():
    mstar = 3.0
    d = {-1: 0.04, 0: -0.03, 1: 0.02}
    eta = {-1: 0.1, 0: -0.05, 1: 0.07}
    c = {k: mstar * (k + d[k]) for k in d}
    # independent route: minimise f_1 + f_{-1} on a grid, f_l = exp(-(m-c_l)^2/2 + eta_l) / exp(-(m-c_0)^2/2 + eta_0)
    grid = np.linspace(-1.5, 1.5, 300001)
    logf = lambda l: -0.5 * (grid - c[l]) ** 2 + eta[l] + 0.5 * (grid - c[0]) ** 2 - eta[0]
    obj = np.exp(logf(1)) + np.exp(logf(-1))
    m_grid = grid[np.argmin(obj)]
    assert P.pair_maximizer(mstar, d, eta) == pytest.approx(m_grid, abs=2e-5)


def test_pair_formula_matches_windowed_search():
    f = DisorderField(DisorderParams(mstar=3.0, seed=5))
    x = (0,)
    d = {h: f.dshift(x, h) for h in (-1, 0, 1)}
    eta = {h: f.eta(x, h) for h in (-1, 0, 1)}
    assert P.kernel_maximizer(f, x, 0, window=1) == pytest.approx(P.pair_maximizer(3.0, d, eta), abs=1e-9)


def test_radius_bound_random_fields():
    p = DisorderParams(sigma_eta=0.1, sigma_d=0.05, delta_eta=0.2, delta_d=0.1, mstar=4.0)
    R = P.radius_bound(4.0, 0.1, 0.2)
    rng = np.random.default_rng(0)
    for k in range(1000):
        f = DisorderField(DisorderParams(**{**p.__dict__, "seed": k}))
        h = int(rng.integers(-3, 4))
        assert abs(P.kernel_maximizer(f, (0,), h) - 4.0 * h) <= R + 1e-9


def test_unimodal_and_convex():
    rng = np.random.default_rng(1)
    for k in range(200):
        f = DisorderField(DisorderParams(mstar=2.0, sigma_eta=0.1, seed=k))
        h = int(rng.integers(-2, 3))
        grid = np.linspace(2 * h - 4, 2 * h + 4, 801)
        t = np.array([P.kernel_prob(f, (0,), h, m) for m in grid])
        inner = (t[1:-1] > t[:-2]) & (t[1:-1] >= t[2:])
        assert inner.sum() == 1
        # sum_{l != h} f_l: second difference of log(1/T - 1)-free form
        others = 1.0 / t - 1.0
        assert np.all(np.diff(others, 2) >= -1e-9 * others[1:-1])


def test_sandwich_zero_disorder(zero_field):
    grid = np.linspace(-15, 15, 301)
    lo, hi = P.sandwich_audit(zero_field, (0,), 0, grid)
    assert 0 < lo <= hi < math.inf
    near = np.linspace(-0.5, 0.5, 21)
    lo2, hi2 = P.sandwich_audit(zero_field, (0,), 0, np.concatenate([near, [-15, 15]]))
    assert lo2 <= hi2
    lo3, hi3 = P.sandwich_audit(zero_field, (0,), 2, grid + 10)
    assert lo3 == pytest.approx(lo, rel=1e-10) and hi3 == pytest.approx(hi, rel=1e-10)
    with pytest.raises(ValueError):
        P.sandwich_audit(zero_field, (0,), 0, np.linspace(-1, 1, 5))


def test_sandwich_uniform_over_draws():
    los, his = [], []
    for k in range(100):
        f = DisorderField(DisorderParams(mstar=5.0, seed=k))
        lo, hi = P.sandwich_audit(f, (0,), 1, np.linspace(-10, 20, 121))
        los.append(lo)
        his.append(hi)
    assert min(los) > 0 and max(his) < math.inf
    # the gap between neighbouring wells caps the upper constant
    assert min(los) > 0.5 and max(his) < 2 * math.exp(5.0**2 / 8)
