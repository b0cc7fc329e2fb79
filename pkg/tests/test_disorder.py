import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from soslab.disorder import (
    DisorderField,
    DisorderParams,
    audit_conditions,
    export_table,
    import_table,
    keyed_uniform,
    truncated_normal_second_moment,
)


def test_zero_scales_give_exact_zero():
    f = DisorderField(DisorderParams(sigma_eta=0.0, sigma_d=0.0))
    assert f.eta((1, 2), 3) == 0.0 and f.dshift((1, 2), 3) == 0.0


def test_repeat_queries_identical():
    p = DisorderParams(seed=7)
    a, b = DisorderField(p), DisorderField(p)
    for h in range(-3, 4):
        assert a.eta((0, 1), h) == b.eta((0, 1), h)
        assert a.dshift((0, 1), h) == a.dshift((0, 1), h)


def test_order_independence():
    p = DisorderParams(seed=3)
    a, b = DisorderField(p), DisorderField(p)
    keys = [((i, j), h) for i in range(3) for j in range(3) for h in range(-2, 3)]
    va = [a.eta(*k) for k in keys]
    vb = [b.eta(*k) for k in reversed(keys)][::-1]
    assert va == vb


@given(st.integers(-1000, 1000), st.integers(-50, 50), st.integers(0, 2**63 - 1))
def test_hard_bounds(site, h, seed):
    p = DisorderParams(sigma_eta=1.0, sigma_d=1.0, delta_eta=0.2, delta_d=0.25, seed=seed)
    f = DisorderField(p)
    assert abs(f.eta((site,), h)) <= 0.2
    assert abs(f.dshift((site,), h)) <= 0.25


def test_center_examples():
    f = DisorderField(DisorderParams.zero(mstar=5.0))
    assert f.center((0,), 3) == 15.0
    f = DisorderField(DisorderParams(mstar=10.0))
    f.cache[((0,), 0, 1)] = 0.1
    assert f.center((0,), 0) == pytest.approx(1.0)


@given(st.integers(-20, 20), st.integers(0, 1000))
def test_center_monotone(h, seed):
    p = DisorderParams(sigma_d=0.5, delta_d=0.25, mstar=3.0, seed=seed)
    f = DisorderField(p)
    assert f.center((0,), h + 1) - f.center((0,), h) >= 3.0 * (1 - 2 * 0.25) - 1e-12


def test_param_validation():
    with pytest.raises(ValueError):
        DisorderParams(delta_d=0.3)
    with pytest.raises(ValueError):
        DisorderParams(sigma_eta=-1.0)
    with pytest.raises(ValueError):
        DisorderParams(mstar=0.0)


def test_keyed_uniform_range_and_spread():
    us = np.array([keyed_uniform(1, (i,), 0, 0) for i in range(20000)])
    assert np.all((us > 0) & (us < 1))
    assert abs(us.mean() - 0.5) < 0.01


def test_second_moment_closed_form_vs_quadrature():
    from scipy import integrate, stats

    s, b = 0.3, 0.5
    dens = lambda x: stats.norm.pdf(x, scale=s) / (stats.norm.cdf(b / s) - stats.norm.cdf(-b / s))
    num, _ = integrate.quad(lambda x: x * x * dens(x), -b, b)
    assert truncated_normal_second_moment(s, b) == pytest.approx(num, rel=1e-10)


def test_audit_zero_disorder():
    rep = audit_conditions(DisorderParams.zero(), 10**4)
    assert rep.passed and rep.shift_second_moment == 0


def test_audit_default_passes():
    rep = audit_conditions(DisorderParams(), 10**5)
    assert rep.passed
    assert rep.eta_hard_violations == 0 and rep.shift_hard_violations == 0
    assert rep.shift_margin_at_edge >= 2.0 - 1e-12
    assert rep.shift_second_moment_empirical == pytest.approx(rep.shift_second_moment, rel=0.02)


def test_audit_flags_misscaled_generator():
    p = DisorderParams()
    rep = audit_conditions(p, 10**5, eta_scale=3 * p.sigma_eta)
    assert not rep.passed and rep.eta_tail_flagged
    assert rep.worst_eta["excess"] > 0


def test_audit_rejects_small_sample():
    with pytest.raises(ValueError):
        audit_conditions(DisorderParams(), 100)


def test_snapshot_round_trip(tmp_path):
    p = DisorderParams(seed=11)
    f = DisorderField(p)
    path = tmp_path / "snap.csv"
    sites = [(0, 0), (0, 1), (1, 0)]
    export_table(f, sites, range(-2, 3), path)
    g = import_table(path, DisorderParams(seed=999))
    for s in sites:
        for h in range(-2, 3):
            assert g.eta(s, h) == f.eta(s, h) and g.dshift(s, h) == f.dshift(s, h)
    assert path.read_text().splitlines()[0] == "x_1,x_2,h,eta,d"
