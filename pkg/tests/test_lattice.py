import numpy as np
import pytest
from hypothesis import given, strategies as st

from soslab import lattice as L


def test_make_box_examples():
    v = L.make_box(2, 1)
    assert len(v) == 1 and len(v.boundary) == 4
    v = L.make_box(1, 3)
    assert len(v) == 3 and set(v.boundary) == {(-1,), (3,)}
    v = L.make_box(3, 4)
    assert len(v) == 64 and len(v.boundary) == 96


@pytest.mark.parametrize("d,side", [(0, 2), (2, 0)])
def test_make_box_rejects(d, side):
    with pytest.raises(ValueError):
        L.make_box(d, side)


def test_boundary_definition_by_brute_force():
    v = L.make_box(2, 3)
    inside = set(v.sites)
    brute = set()
    for x in range(-2, 5):
        for y in range(-2, 5):
            s = (x, y)
            if s not in inside and any(abs(x - a) + abs(y - b) == 1 for a, b in inside):
                brute.add(s)
    assert brute == set(v.boundary)


def test_sites_lexicographic():
    v = L.make_box(2, 3)
    assert list(v.sites) == sorted(v.sites)


def test_laplacian_examples():
    v = L.make_box(2, 1)
    assert L.laplacian_apply(v, 0.1, [1.0]).values[0] == pytest.approx(1.4)
    v = L.make_box(2, 3)
    u = np.arange(9.0)
    assert np.allclose(L.laplacian_apply(v, 0.0, u).values, u)
    big = L.make_box(2, 5)
    out = L.laplacian_apply(big, 0.2, np.ones(25)).values
    assert out[big.index[(2, 2)]] == pytest.approx(1.0)


def test_resolvent_solve_examples():
    v = L.make_box(2, 1)
    assert L.resolvent_solve(v, 0.1, [1.0]).values[0] == pytest.approx(1 / 1.4)
    v = L.make_box(2, 3)
    assert np.all(L.resolvent_solve(v, 0.1, np.zeros(9)).values == 0)


@given(st.integers(1, 3), st.integers(1, 4), st.floats(0.0, 2.0), st.integers(0, 2**31))
def test_resolvent_round_trip(d, side, q, seed):
    v = L.make_box(d, side)
    rhs = np.random.default_rng(seed).normal(size=len(v))
    u = L.resolvent_solve(v, q, rhs)
    back = L.laplacian_apply(v, q, u).values
    assert np.max(np.abs(back - rhs)) <= 1e-10 * max(1.0, np.max(np.abs(rhs)))


def test_iterative_path_matches_dense():
    v = L.make_box(2, 6)
    rhs = np.random.default_rng(0).normal(size=len(v))
    dense = L.resolvent_solve(v, 0.1, rhs).values
    it = L.resolvent_solve(v, 0.1, rhs, dense_threshold=1).values
    assert np.allclose(dense, it, atol=1e-9)


def test_resolvent_entry_examples():
    v = L.make_box(2, 1)
    assert L.resolvent_entry(v, 0.1, (0, 0), (0, 0)) == pytest.approx(1 / 14)
    v = L.make_box(2, 3)
    R = L.resolvent_matrix(v, 0.1)
    assert np.allclose(R, R.T) and np.all(R > 0)
    with pytest.raises((KeyError, ValueError)):
        L.resolvent_entry(v, 0.1, (5, 5), (0, 0))


def test_scaling_identity():
    for d, side in [(1, 5), (2, 3), (3, 3)]:
        v = L.make_box(d, side)
        R = L.resolvent_matrix(v, 0.15)
        assert np.allclose(R, 0.15 * L.covariance_matrix(v, 0.15), rtol=1e-10, atol=0)


def test_monotone_domination():
    small, big = L.make_box(2, 3), L.make_box(2, 5)
    for x in small.sites:
        for y in small.sites:
            assert L.resolvent_entry(small, 0.1, x, y) <= L.resolvent_entry(big, 0.1, x, y)


@pytest.mark.parametrize("d,side", [(1, 4), (2, 3), (3, 2), (4, 2)])
def test_inverse_positive(d, side):
    v = L.Volume(d, (0,) * d, (side - 1,) * d) if d == 4 else L.make_box(d, side)
    assert np.all(L.covariance_matrix(v, 0.3) > 0)


def test_walk_examples():
    q = 0.1
    t = L.walk_resolvent((0, 0), (0, 1), {(0, 0), (0, 1)}, q)
    assert t.value == pytest.approx(1 / 195, rel=1e-12)
    t = L.walk_resolvent((0, 0), (0, 0), {(0, 0)}, q)
    assert t.value == pytest.approx(1 / 14)


def test_walk_bound_and_errors():
    q = 0.1
    C = {(0, 0), (0, 1), (1, 1)}
    t = L.walk_resolvent((0, 0), (1, 1), C, q)
    rho = 4 / (1 / q + 4)
    assert 0 < t.value <= q * rho ** (len(C) - 1)
    with pytest.raises(ValueError):
        L.walk_resolvent((0, 0), (2, 2), {(0, 0), (2, 2)}, q)
    with pytest.raises(ValueError):
        L.walk_resolvent((0, 0), (5, 5), C, q)


@pytest.mark.parametrize("d,side", [(1, 2), (1, 3), (1, 4), (2, 2)])
def test_walk_sum_completeness(d, side):
    q = 0.1
    v = L.make_box(d, side)
    R = L.resolvent_matrix(v, q)
    sites = list(v.sites)
    masks = L.connected_masks(sites)
    for i, x in enumerate(sites):
        for j, y in enumerate(sites):
            total = tail = 0.0
            for m in masks:
                C = {sites[k] for k in range(len(sites)) if m >> k & 1}
                if x in C and y in C:
                    t = L.walk_resolvent(x, y, C, q, max_len=30)
                    total += t.value
                    tail += t.tail_bound
            assert abs(total - R[i, j]) <= tail + 1e-15


def test_quadratic_form_rewriting():
    q = 0.1
    v = L.make_box(2, 3)
    R = L.resolvent_matrix(v, q)
    m = np.random.default_rng(3).normal(size=9) * 4
    left = -m @ R @ m + q * np.sum(m * m)
    pair = 0.5 * np.sum(R * (m[:, None] - m[None, :]) ** 2)
    deficit = q - R.sum(axis=1)
    right = pair + np.sum(deficit * m * m)
    assert abs(left - right) <= 1e-9 * abs(left)
    assert np.all(deficit > 0)


def test_boundary_field_examples():
    v = L.make_box(1, 3)
    bc = np.array([1.0 if s in [(-1,), (3,)] else 0.0 for s in v.boundary])
    assert np.allclose(L.boundary_field(v, 0.1, bc).values, [0.1, 0, 0.1])
    assert np.all(L.boundary_field(v, 0.1, None).values == 0)
    v = L.make_box(2, 3)
    out = L.boundary_field(v, 0.2, 2.0).values
    assert out[v.index[(0, 0)]] == pytest.approx(0.8)
    assert out[v.index[(1, 1)]] == 0
