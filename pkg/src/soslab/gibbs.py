"""Continuous-height Hamiltonians, the joint measure and exact two-stage sampling.

At fixed integer heights the continuous field is Gaussian with precision
``1 - q Laplacian`` and mean ``gaussian_center``.  Sampling ``h`` from the
integer-height law and then ``m`` from that Gaussian therefore gives an exact
draw from the joint measure.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import cg

from .disorder import DisorderField
from .heights import HeightConfig, MCMCParams, all_configs, nu_exact, nu_mcmc, _heights
from .lattice import (
    DENSE_THRESHOLD,
    RealConfig,
    SolverError,
    Volume,
    _as_boundary_values,
    _as_site_values,
    boundary_field,
    precision_matrix,
    resolvent_solve,
)
from .potential import DEFAULT_WINDOW, kernel, potential_value

__all__ = [
    "GaussianSpec",
    "JointState",
    "MCMCParams",
    "energy",
    "joint_energy",
    "gaussian_center",
    "sample_conditional",
    "sample_gibbs",
    "gauss_exp_moment_bound",
    "gauss_comparison_bound",
    "quadrature_nu",
    "quadrature_moments",
    "write_samples",
]


@dataclass(frozen=True)
class GaussianSpec:
    volume: Volume
    center: RealConfig
    q: float

    @property
    def precision(self) -> sparse.csr_matrix:
        return precision_matrix(self.volume, self.q)


@dataclass(frozen=True)
class JointState:
    h: HeightConfig
    m: RealConfig

    def __post_init__(self):
        if self.h.volume != self.m.volume:
            raise ValueError("h and m live on different volumes")


def _quadratic_part(v: Volume, q: float, bcv: np.ndarray, m: np.ndarray) -> float:
    pairs = v.neighbor_pairs
    links = v.boundary_links
    inner = float(np.sum((m[pairs[:, 0]] - m[pairs[:, 1]]) ** 2))
    outer = float(np.sum((m[links[:, 0]] - bcv[links[:, 1]]) ** 2))
    return 0.5 * q * (inner + outer)


def energy(v: Volume, f: DisorderField, q: float, bc, m, window: int = DEFAULT_WINDOW) -> float:
    """Gradient-squared interaction plus the multi-well potential at every site."""
    mv = _as_site_values(v, m)
    bcv = _as_boundary_values(v, bc)
    pot = sum(potential_value(f, s, float(val), window) for s, val in zip(v.sites, mv))
    return _quadratic_part(v, q, bcv, mv) + pot


def joint_energy(v: Volume, f: DisorderField, q: float, bc, h, m) -> float:
    """Energy with every site pinned to the well selected by ``h``."""
    mv = _as_site_values(v, m)
    hv = _heights(v, h)
    bcv = _as_boundary_values(v, bc)
    c = f.centers(v.sites, hv)
    return _quadratic_part(v, q, bcv, mv) + 0.5 * float(np.sum((mv - c) ** 2)) - float(f.etas(v.sites, hv).sum())


def gaussian_center(v: Volume, f: DisorderField, q: float, bc, h) -> RealConfig:
    hv = _heights(v, h)
    rhs = f.centers(v.sites, hv) + boundary_field(v, q, bc).values
    return resolvent_solve(v, q, rhs)


def sample_conditional(spec: GaussianSpec, rng: np.random.Generator, dense_threshold: int = DENSE_THRESHOLD) -> RealConfig:
    """One exact draw from the Gaussian with precision ``1 - q Laplacian``.

    Small volumes solve ``L^T x = z`` with the Cholesky factor ``L`` of the
    precision.  Larger volumes use perturbation-optimisation: the right-hand
    side ``z0 + sqrt(q) (B^T z1 + sqrt(n_b) z2)`` has covariance equal to the
    precision, so solving against it gives the right covariance.
    """
    v = spec.volume
    n = len(v)
    mean = spec.center.values
    if spec.q == 0:
        return RealConfig(v, mean + rng.standard_normal(n))
    A = spec.precision
    if n <= dense_threshold:
        L = linalg.cholesky(A.toarray(), lower=True)
        x = linalg.solve_triangular(L.T, rng.standard_normal(n), lower=False)
        return RealConfig(v, mean + x)
    pairs = v.neighbor_pairs
    z0 = rng.standard_normal(n)
    z1 = rng.standard_normal(len(pairs))
    z2 = rng.standard_normal(n)
    xi = z0.copy()
    sq = math.sqrt(spec.q)
    np.add.at(xi, pairs[:, 0], sq * z1)
    np.add.at(xi, pairs[:, 1], -sq * z1)
    xi += sq * np.sqrt(v.boundary_counts) * z2
    x, info = cg(A, xi, rtol=1e-12, atol=0.0, maxiter=10 * n)
    res = float(np.max(np.abs(A @ x - xi)))
    if info != 0 and res > 1e-8 * float(np.max(np.abs(xi))):
        raise SolverError("conjugate gradients did not converge", res)
    return RealConfig(v, mean + x)


def sample_gibbs(
    v: Volume,
    f: DisorderField,
    q: float,
    bc,
    rng: np.random.Generator,
    mcmc: MCMCParams = MCMCParams(),
    hmax: int | None = None,
) -> JointState:
    """Draw ``h`` from the integer-height law, then ``m`` from its Gaussian.

    With ``hmax`` the heights come from the enumerated table, otherwise from the
    last state of a Markov chain.  Only the zero boundary condition is supported
    for the height stage.
    """
    bcv = _as_boundary_values(v, bc)
    if np.any(bcv != 0):
        raise ValueError("the integer-height stage assumes zero boundary condition")
    mstar = f.mstar
    if hmax is not None:
        table = nu_exact(v, f, q, mstar, hmax)
        idx = int(rng.choice(len(table.probs), p=table.probs))
        h = HeightConfig(v, table.configs[idx])
    else:
        res = nu_mcmc(v, f, q, mstar, rng, mcmc)
        h = HeightConfig(v, res.samples[-1])
    spec = GaussianSpec(v, gaussian_center(v, f, q, bcv, h), q)
    return JointState(h, sample_conditional(spec, rng))


# ---------------------------------------------------------------------------
# Gaussian bound evaluators


def gauss_exp_moment_bound(a, trace_sigma: float, lam: float, S: float) -> tuple[float, float]:
    """Bounds on ``E exp(lam |m|)`` and on the same expectation restricted to ``|m| >= S``."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if lam < 0 or trace_sigma <= 0:
        raise ValueError("need lam >= 0 and a positive trace")
    norm_a = float(np.linalg.norm(a))
    if S < norm_a + lam * trace_sigma - 1e-12 * max(1.0, S):
        raise ValueError("S below the range where the tail bound holds")
    dim = a.size
    moment = 2.0**dim * math.exp(lam * norm_a + 0.5 * lam * lam * trace_sigma)
    tail = 2.0**dim * math.exp(lam * S - (S - norm_a) ** 2 / (2.0 * trace_sigma))
    return moment, tail


def gauss_comparison_bound(a, a2, sigma, sigma2, lam: float, S: float) -> float:
    """Upper bound on ``|E_1 f - E_2 f|`` for ``|f(m)| <= exp(lam |m|)``.

    ``g(x) = x e^x`` is applied to the full quadratic-form estimate, without a
    factor one half, so the value is never smaller than the sharper variant.
    """
    a = np.asarray(a, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=float))
    for s in (sigma, sigma2):
        if not np.allclose(s, s.T) or np.linalg.eigvalsh(s).min() <= 0:
            raise ValueError("covariances must be symmetric positive definite")
    tr1, tr2 = float(np.trace(sigma)), float(np.trace(sigma2))
    na, na2 = float(np.linalg.norm(a)), float(np.linalg.norm(a2))
    if S < max(na + lam * tr1, na2 + lam * tr2):
        raise ValueError("S outside the admissible range")
    dim = a.size
    inv1 = np.linalg.inv(sigma)
    inv2 = np.linalg.inv(sigma2)
    _, logdet1 = np.linalg.slogdet(sigma)
    _, logdet2 = np.linalg.slogdet(sigma2)
    det_ratio = math.exp(0.5 * (logdet1 - logdet2))
    x = (2 * S + na + na2) * np.linalg.norm(inv1, 2) * float(np.linalg.norm(a - a2)) + 2 * (S * S + na2 * na2) * np.linalg.norm(
        inv1 - inv2, 2
    )
    g = x * math.exp(x)
    moment, tail1 = gauss_exp_moment_bound(a, tr1, lam, S)
    _, tail2 = gauss_exp_moment_bound(a2, tr2, lam, S)
    return float(moment * (abs(1 - det_ratio) + det_ratio * g) + tail1 + tail2)


# ---------------------------------------------------------------------------
# quadrature of the joint measure


@dataclass
class _SiteGrid:
    nodes: np.ndarray  # (heights, nodes)
    log_weight: np.ndarray  # (heights, nodes)


def _site_grids(v: Volume, f: DisorderField, q: float, bcv: np.ndarray, heights, n_nodes: int, window: int):
    t, w = np.polynomial.hermite.hermgauss(n_nodes)
    log_gh = np.log(w * math.sqrt(2.0)) + t * t
    links = v.boundary_links
    grids = []
    for j, s in enumerate(v.sites):
        bvals = bcv[links[links[:, 0] == j, 1]]
        nodes = np.empty((len(heights), n_nodes))
        lw = np.empty((len(heights), n_nodes))
        for a, h in enumerate(heights):
            m = f.center(s, h) + math.sqrt(2.0) * t
            nodes[a] = m
            for k, mk in enumerate(m):
                ker = kernel(f, s, float(mk), window)
                lt = math.log(ker.prob(h)) if ker.prob(h) > 0 else -math.inf
                edge = 0.5 * q * float(np.sum((mk - bvals) ** 2))
                lw[a, k] = log_gh[k] - potential_value(f, s, float(mk), window) + lt - edge
        grids.append(_SiteGrid(nodes, lw))
    return grids


def _contract(v: Volume, q: float, grids, hv_idx, extra=None) -> tuple[float, float]:
    """Sum over node tuples of site factors times nearest-neighbour factors.

    Returns ``(mantissa, log_scale)``.  ``extra`` maps site index to a node
    multiplier (used for moments).
    """
    n = len(v)
    letters = [chr(ord("a") + i) for i in range(n)] if n <= 26 else None
    if letters is None:
        raise ValueError("quadrature is limited to 26 sites")
    operands, subs = [], []
    scale = 0.0
    for j in range(n):
        g = grids[j]
        lw = g.log_weight[hv_idx[j]]
        top = lw.max()
        scale += top
        vec = np.exp(lw - top)
        if extra and j in extra:
            vec = vec * extra[j](g.nodes[hv_idx[j]])
        operands.append(vec)
        subs.append(letters[j])
    for i, j in v.neighbor_pairs:
        mi = grids[i].nodes[hv_idx[i]]
        mj = grids[j].nodes[hv_idx[j]]
        operands.append(np.exp(-0.5 * q * (mi[:, None] - mj[None, :]) ** 2))
        subs.append(letters[i] + letters[j])
    expr = ",".join(subs) + "->"
    return float(np.einsum(expr, *operands, optimize=True)), scale


@dataclass
class QuadratureTable:
    configs: np.ndarray
    probs: np.ndarray
    log_weights: np.ndarray


def quadrature_nu(
    v: Volume,
    f: DisorderField,
    q: float,
    hmax: int,
    bc=None,
    n_nodes: int = 40,
    window: int = DEFAULT_WINDOW,
) -> QuadratureTable:
    """Integer-height law obtained by integrating ``mu(dm) prod T(h|m)`` over ``m``.

    Each site uses Gauss-Hermite nodes centred on the well selected by ``h``;
    the integrand is built only from the potential and the kernel.
    """
    bcv = _as_boundary_values(v, bc)
    heights = list(range(-hmax, hmax + 1))
    grids = _site_grids(v, f, q, bcv, heights, n_nodes, window)
    configs = all_configs(len(v), hmax)
    logs = np.empty(len(configs))
    for k, h in enumerate(configs):
        val, scale = _contract(v, q, grids, h + hmax)
        logs[k] = math.log(val) + scale
    top = logs.max()
    w = np.exp(logs - top)
    return QuadratureTable(configs, w / w.sum(), logs)


def quadrature_moments(
    v: Volume,
    f: DisorderField,
    q: float,
    h,
    bc=None,
    n_nodes: int = 40,
    window: int = DEFAULT_WINDOW,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of ``m`` given ``h`` under ``mu(dm) prod T(h|m)``."""
    bcv = _as_boundary_values(v, bc)
    hv = _heights(v, h)
    lo = int(hv.min())
    heights = list(range(lo, int(hv.max()) + 1))
    grids = _site_grids(v, f, q, bcv, heights, n_nodes, window)
    idx = hv - lo
    z, _ = _contract(v, q, grids, idx)
    n = len(v)
    mean = np.empty(n)
    second = np.empty((n, n))
    ident = lambda m: m
    for i in range(n):
        mean[i] = _contract(v, q, grids, idx, {i: ident})[0] / z
    for i in range(n):
        second[i, i] = _contract(v, q, grids, idx, {i: lambda m: m * m})[0] / z
        for j in range(i + 1, n):
            second[i, j] = second[j, i] = _contract(v, q, grids, idx, {i: ident, j: ident})[0] / z
    return mean, second - np.outer(mean, mean)


def write_samples(path, states: list[JointState], header_lines: list[str] = ()) -> None:
    """CSV with one row per (sample, site): ``sample, x_1 .. x_d, h, m``."""
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        dim = states[0].h.volume.dimension if states else 0
        w.writerow(["sample"] + [f"x_{i + 1}" for i in range(dim)] + ["h", "m"])
        for k, st in enumerate(states):
            for s, hv, mv in zip(st.h.volume.sites, st.h.values, st.m.values):
                w.writerow([k, *s, int(hv), repr(float(mv))])
