import math

import numpy as np
import pytest

from soslab.disorder import DisorderField, DisorderParams
from soslab.gibbs import (
    GaussianSpec,
    MCMCParams,
    energy,
    gauss_comparison_bound,
    gauss_exp_moment_bound,
    gaussian_center,
    joint_energy,
    quadrature_moments,
    quadrature_nu,
    sample_conditional,
    sample_gibbs,
    write_samples,
)
from soslab.heights import nu_exact
from soslab.lattice import RealConfig, covariance_matrix, make_box, precision_matrix
from soslab.potential import kernel, kernel_prob, potential_value


def test_energy_single_site(zero_field):
    v = make_box(1, 1)
    q = 0.2
    # two boundary links, both at zero
    expected = q * 0.3**2 + potential_value(zero_field, (0,), 0.3)
    assert energy(v, zero_field, q, 0.0, [0.3]) == pytest.approx(expected, rel=1e-12)


def test_energy_boundary_condition(zero_field):
    v = make_box(1, 2)
    got = energy(v, zero_field, 0.5, [1.0, 0.0], [0.0, 0.0])
    assert got == pytest.approx(0.25 + 2 * potential_value(zero_field, (0,), 0.0), rel=1e-12)


def test_joint_energy_hessian_is_precision(field10):
    v = make_box(2, 2)
    q = 0.3
    h = [0, 1, 0, -1]
    m0 = np.array([0.1, 9.0, -0.2, -10.5])
    eps = 1e-3
    n = len(v)
    H = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            e = np.zeros(n)
            e2 = np.zeros(n)
            e[i] += eps
            e2[j] += eps
            H[i, j] = (
                joint_energy(v, field10, q, 0.0, h, m0 + e + e2)
                - joint_energy(v, field10, q, 0.0, h, m0 + e - e2)
                - joint_energy(v, field10, q, 0.0, h, m0 - e + e2)
                + joint_energy(v, field10, q, 0.0, h, m0 - e - e2)
            ) / (4 * eps * eps)
    assert np.allclose(H, precision_matrix(v, q).toarray(), atol=1e-6)


def test_pointwise_factorization():
    f = DisorderField(DisorderParams(mstar=3.0, seed=2))
    v = make_box(2, 2)
    q = 0.25
    rng = np.random.default_rng(0)
    for _ in range(20):
        h = rng.integers(-2, 3, size=4)
        m = 3.0 * h + rng.normal(0, 1.0, size=4)
        lhs = -energy(v, f, q, 0.0, m) + sum(math.log(kernel_prob(f, s, int(hh), mm)) for s, hh, mm in zip(v.sites, h, m))
        rhs = -joint_energy(v, f, q, 0.0, h, m)
        assert lhs == pytest.approx(rhs, abs=1e-10)


def test_center_is_stationary(field10):
    v = make_box(2, 3)
    q = 0.2
    h = np.array([0, 1, 1, 0, 2, -1, 0, 0, 1])
    bc = np.linspace(-1, 1, len(v.boundary))
    c = gaussian_center(v, field10, q, bc, h).values
    eps = 1e-5
    for i in range(len(v)):
        e = np.zeros(len(v))
        e[i] = eps
        g = (joint_energy(v, field10, q, bc, h, c + e) - joint_energy(v, field10, q, bc, h, c - e)) / (2 * eps)
        assert abs(g) < 1e-5


def test_center_zero_coupling(field10):
    v = make_box(1, 3)
    h = [1, 0, -1]
    c = gaussian_center(v, field10, 0.0, 0.0, h).values
    assert np.allclose(c, field10.centers(v.sites, np.array(h)))


@pytest.mark.parametrize("threshold", [10**6, 0])
def test_conditional_covariance(threshold):
    v = make_box(2, 2)
    q = 0.4
    spec = GaussianSpec(v, RealConfig(v, np.array([1.0, -2.0, 0.5, 0.0])), q)
    rng = np.random.default_rng(7)
    draws = np.array([sample_conditional(spec, rng, threshold).values for _ in range(10**5)])
    cov = covariance_matrix(v, q)
    se = np.sqrt(np.outer(np.diag(cov), np.diag(cov)) / len(draws))
    assert np.all(np.abs(np.cov(draws.T) - cov) < 4 * se)
    assert np.all(np.abs(draws.mean(axis=0) - spec.center.values) < 5 * np.sqrt(np.diag(cov) / len(draws)))


def test_zero_coupling_draws_are_standard():
    v = make_box(1, 3)
    spec = GaussianSpec(v, RealConfig(v, np.zeros(3)), 0.0)
    rng = np.random.default_rng(1)
    draws = np.array([sample_conditional(spec, rng).values for _ in range(20000)])
    assert np.allclose(np.cov(draws.T), np.eye(3), atol=0.05)


def test_sample_gibbs_deterministic(field10):
    v = make_box(2, 2)
    a = sample_gibbs(v, field10, 0.1, 0.0, np.random.default_rng(3), hmax=1)
    b = sample_gibbs(v, field10, 0.1, 0.0, np.random.default_rng(3), hmax=1)
    assert np.array_equal(a.h.values, b.h.values) and np.array_equal(a.m.values, b.m.values)
    c = sample_gibbs(v, field10, 0.1, 0.0, np.random.default_rng(3), MCMCParams(sweeps=5, burn_in=0))
    assert c.h.volume == v
    with pytest.raises(ValueError):
        sample_gibbs(v, field10, 0.1, 1.0, np.random.default_rng(3), hmax=1)


def test_write_samples(tmp_path, field10):
    v = make_box(1, 2)
    st = sample_gibbs(v, field10, 0.1, 0.0, np.random.default_rng(0), hmax=1)
    path = tmp_path / "s.csv"
    write_samples(path, [st, st], ["run 1"])
    lines = path.read_text().splitlines()
    assert lines[0] == "# run 1" and lines[1] == "sample,x_1,h,m"
    assert len(lines) == 2 + 4


def test_exp_moment_bound_dominates_monte_carlo():
    rng = np.random.default_rng(4)
    a = np.array([0.5, -0.3])
    sigma = np.array([[0.6, 0.2], [0.2, 0.4]])
    lam = 0.7
    x = rng.multivariate_normal(a, sigma, size=200000)
    r = np.linalg.norm(x, axis=1)
    tr = float(np.trace(sigma))
    S = float(np.linalg.norm(a)) + lam * tr + 1.0
    moment, tail = gauss_exp_moment_bound(a, tr, lam, S)
    assert np.mean(np.exp(lam * r)) <= moment
    assert np.mean(np.exp(lam * r) * (r >= S)) <= tail
    with pytest.raises(ValueError):
        gauss_exp_moment_bound(a, tr, lam, 0.1)


def test_comparison_bound_dominates_difference():
    rng = np.random.default_rng(5)
    a, a2 = np.array([0.2]), np.array([0.25])
    s1, s2 = np.array([[1.0]]), np.array([[1.05]])
    lam = 0.5
    S = 3.0
    fval = lambda m: np.exp(lam * np.abs(m)) * np.cos(m)
    n = 400000
    x1 = rng.normal(a[0], 1.0, n)
    x2 = rng.normal(a2[0], math.sqrt(1.05), n)
    diff = abs(fval(x1).mean() - fval(x2).mean())
    assert diff <= gauss_comparison_bound(a, a2, s1, s2, lam, S)
    # identical Gaussians still pay the tails
    same = gauss_comparison_bound(a, a, s1, s1, lam, S)
    _, t = gauss_exp_moment_bound(a, 1.0, lam, S)
    assert same == pytest.approx(2 * t)
    with pytest.raises(ValueError):
        gauss_comparison_bound(a, a2, -s1, s2, lam, S)
    with pytest.raises(ValueError):
        gauss_comparison_bound(a, a2, s1, s2, lam, 0.5)


def test_quadrature_matches_enumeration():
    f = DisorderField(DisorderParams(mstar=3.0, seed=1))
    v = make_box(1, 2)
    q = 0.3
    quad = quadrature_nu(v, f, q, 2)
    exact = nu_exact(v, f, q, 3.0, 2)
    assert 0.5 * np.abs(quad.probs - exact.probs).sum() < 1e-10


def test_quadrature_moments_match_gaussian():
    f = DisorderField(DisorderParams(mstar=4.0, seed=9))
    v = make_box(1, 3)
    q = 0.2
    h = [0, 1, -1]
    mean, cov = quadrature_moments(v, f, q, h)
    assert np.allclose(mean, gaussian_center(v, f, q, 0.0, h).values, atol=1e-10)
    assert np.allclose(cov, covariance_matrix(v, q), atol=1e-10)


def test_exp_moment_bounds_meet_at_threshold():
    a = np.array([0.3, 0.1, -0.2])
    tr, lam = 1.7, 0.6
    moment, tail = gauss_exp_moment_bound(a, tr, lam, float(np.linalg.norm(a)) + lam * tr)
    assert abs(moment - tail) <= 1e-12 * moment


def test_rekernelization_reproduces_law():
    f = DisorderField(DisorderParams(mstar=2.0, seed=6))
    v = make_box(1, 2)
    q = 0.2
    table = nu_exact(v, f, q, 2.0, 3)
    rng = np.random.default_rng(11)
    counts = {}
    n = 4000
    for _ in range(n):
        h = table.configs[rng.choice(len(table.probs), p=table.probs)]
        spec = GaussianSpec(v, gaussian_center(v, f, q, 0.0, h), q)
        m = sample_conditional(spec, rng).values
        k = kernel(f, (0,), m[0])
        hs = list(k.probs)
        p = np.array([k.probs[x] for x in hs])
        new = hs[rng.choice(len(hs), p=p / p.sum())]
        counts[new] = counts.get(new, 0) + 1
    marg = table.marginal((0,))
    for val, prob in marg.items():
        se = np.sqrt(prob * (1 - prob) / n) + 1e-12
        assert abs(counts.get(val, 0) / n - prob) < 4 * se + 1e-3
