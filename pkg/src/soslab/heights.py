"""The induced integer-height model.

Minimising the joint energy over the continuous heights leaves an energy for
the integer heights alone.  With ``u_x = h_x + d_x(h_x)`` and zero boundary
condition it reads

    E(h) = (mstar^2 / 2q) * (q * |u|^2 - <u, R u>) - sum_x eta_x(h_x)
         = sum_{x<y} J_xy (u_x - u_y)^2 + sum_x K_x u_x^2 - sum_x eta_x(h_x)

with ``J_xy = (mstar^2 / 2q) R_xy`` and ``K_x = (mstar^2 / 2q) (q - sum_y R_xy)``.
Both coupling families are nonnegative; ``couplings`` builds them from the
walk decomposition of ``R``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .disorder import DisorderField
from .lattice import (
    Volume,
    boundary_field,
    covariance_matrix,
    l1_distance,
    resolvent_matrix,
    resolvent_solve,
    walk_table,
    walk_tail_bound,
    _as_boundary_values,
)

log = logging.getLogger(__name__)

MAX_ENUMERATION = 10**7
WALK_SITE_LIMIT = 12


class CutoffError(ValueError):
    def __init__(self, message: str, required: int):
        super().__init__(f"{message}; need support_cutoff >= {required}")
        self.required = required


@dataclass(frozen=True)
class HeightConfig:
    volume: Volume
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values).reshape(-1)
        if vals.shape[0] != len(self.volume):
            raise ValueError(f"expected {len(self.volume)} heights, got {vals.shape[0]}")
        if not np.all(np.equal(np.mod(vals, 1), 0)):
            raise ValueError("heights must be integers")
        object.__setattr__(self, "values", vals.astype(np.int64))

    def __getitem__(self, site) -> int:
        return int(self.values[self.volume.index[tuple(site)]])

    def extended(self, site) -> int:
        """Height with zero continuation outside the volume."""
        site = tuple(site)
        return self[site] if site in self.volume else 0

    def level_set(self, h: int) -> set:
        return {s for s, val in zip(self.volume.sites, self.values) if val == h}

    @classmethod
    def constant(cls, v: Volume, h: int = 0) -> "HeightConfig":
        return cls(v, np.full(len(v), h, dtype=np.int64))


def _heights(v: Volume, h) -> np.ndarray:
    if isinstance(h, HeightConfig):
        return h.values
    arr = np.asarray(h).reshape(-1)
    if arr.shape[0] != len(v):
        raise ValueError(f"expected {len(v)} heights, got {arr.shape[0]}")
    return arr.astype(np.int64)


@dataclass(frozen=True)
class CouplingSet:
    """Pair couplings ``J`` (dense, symmetric, zero diagonal) and boundary weights ``K``."""

    volume: Volume
    q: float
    mstar: float
    pair_couplings: np.ndarray
    boundary_weights: np.ndarray
    support_cutoff: int
    pair_bar: float
    boundary_bar: float
    method: str
    walk_tables: dict = field(default=None, repr=False, compare=False)
    walk_cutoff: int = 0

    def J(self, x, y) -> float:
        v = self.volume
        return float(self.pair_couplings[v.index[tuple(x)], v.index[tuple(y)]])

    def K(self, x) -> float:
        return float(self.boundary_weights[self.volume.index[tuple(x)]])

    @property
    def prefactor(self) -> float:
        return self.mstar**2 / (2.0 * self.q)


def nn_coupling_lower_bound(dimension: int, q: float, mstar: float) -> float:
    return q * mstar**2 / (4.0 * ((1 + 2 * dimension * q) ** 2 - q**2))


def coupling_decay_bound(dimension: int, q: float, mstar: float, dist) -> np.ndarray | float:
    return mstar**2 * (1 + 2 * dimension * q) / 4.0 * (1.0 / (2 * dimension * q) + 1.0) ** (-np.asarray(dist, dtype=float))


def couplings(
    v: Volume,
    q: float,
    mstar: float,
    support_cutoff: int | None = None,
    method: str = "auto",
    bar_tol: float = 1e-8,
    max_len: int | None = None,
) -> CouplingSet:
    """Effective couplings from the walk decomposition of the resolvent.

    ``method="walk"`` sums walk terms over connected supports of size at most
    ``support_cutoff`` and obtains ``K`` from the complement identity (all walks
    from ``x`` weigh ``q`` in total, so the weight of walks leaving the volume is
    ``q`` minus the interior total).  ``method="resolvent"`` uses the full
    resolvent, i.e. the sum over all supports, and is used for volumes too big
    to enumerate.
    """
    if q <= 0 or mstar <= 0:
        raise ValueError("q and mstar must be positive")
    n = len(v)
    d = v.dimension
    if support_cutoff is None:
        support_cutoff = max(n, 2)
    if support_cutoff < 2:
        raise ValueError("support_cutoff must be at least 2")
    if method == "auto":
        method = "walk" if n <= WALK_SITE_LIMIT else "resolvent"
    pref = mstar**2 / (2.0 * q)
    tables = None
    walk_cutoff = 0
    if method == "walk":
        if n > 16:
            raise ValueError("walk enumeration is limited to 16 sites")
        walk_cutoff = max_len if max_len is not None else min(support_cutoff, n) + 20
        rho = 2 * d / (1.0 / q + 2 * d)
        bar = walk_tail_bound(d, q, walk_cutoff)
        if support_cutoff < n:
            bar += q * rho**support_cutoff
        if pref * bar > bar_tol:
            need = support_cutoff
            while need < n and pref * (walk_tail_bound(d, q, walk_cutoff) + q * rho**need) > bar_tol:
                need += 1
            raise CutoffError("coupling truncation bar above tolerance", need)
        sites = list(v.sites)
        masks = np.arange(1 << n)
        pop = np.zeros(1 << n, dtype=np.int64)
        for u in range(n):
            pop += (masks >> u) & 1
        keep = pop <= support_cutoff
        tables = {}
        R = np.zeros((n, n))
        for i in range(n):
            t = walk_table(sites, i, q, walk_cutoff, max_support=support_cutoff)
            tables[i] = t
            R[i] = t[keep].sum(axis=0)
        R = 0.5 * (R + R.T)
        pair_bar = pref * bar
    elif method == "resolvent":
        R = np.array(resolvent_matrix(v, q))
        bar = 0.0
        pair_bar = 0.0
    else:
        raise ValueError(f"unknown method {method!r}")
    J = pref * R
    np.fill_diagonal(J, 0.0)
    deficit = q - R.sum(axis=1)
    K = pref * deficit
    if np.any(K < -pref * n * bar - 1e-12):
        raise RuntimeError("negative boundary weight; walk sums exceed the resolvent")
    K = np.maximum(K, 0.0)
    cs = CouplingSet(
        volume=v,
        q=q,
        mstar=mstar,
        pair_couplings=J,
        boundary_weights=K,
        support_cutoff=support_cutoff,
        pair_bar=pair_bar,
        boundary_bar=pref * n * bar,
        method=method,
        walk_tables=tables,
        walk_cutoff=walk_cutoff,
    )
    _check_coupling_bounds(cs)
    return cs


def _check_coupling_bounds(cs: CouplingSet) -> None:
    v = cs.volume
    d = v.dimension
    coords = v.coords
    dist = np.abs(coords[:, None, :] - coords[None, :, :]).sum(axis=2)
    lower = nn_coupling_lower_bound(d, cs.q, cs.mstar)
    nn = dist == 1
    if nn.any() and cs.pair_couplings[nn].min() < lower * (1 - 1e-12) - cs.pair_bar:
        raise AssertionError("nearest-neighbour coupling below its lower bound")
    off = dist > 0
    upper = coupling_decay_bound(d, cs.q, cs.mstar, dist)
    if np.any(cs.pair_couplings[off] > upper[off] * (1 + 1e-12)):
        raise AssertionError("pair coupling above its decay bound")


def shifted_heights(f: DisorderField, v: Volume, h) -> np.ndarray:
    """``u_x = h_x + d_x(h_x)``."""
    hv = _heights(v, h)
    return hv + f.shifts(v.sites, hv)


def effective_energy(v: Volume, f: DisorderField, q: float, mstar: float, h, bc=None) -> float:
    """Minimum over continuous heights of the joint energy at fixed ``h``.

    Evaluated with one resolvent solve; ``bc`` is an optional boundary condition
    for the continuous heights.
    """
    if abs(mstar - f.mstar) > 1e-12 * mstar:
        raise ValueError("mstar disagrees with the disorder field")
    hv = _heights(v, h)
    c = f.centers(v.sites, hv)
    etas = f.etas(v.sites, hv)
    bcv = _as_boundary_values(v, bc)
    b = boundary_field(v, q, bcv).values
    s = resolvent_solve(v, q, c + b).values
    links = v.boundary_links
    edge = 0.5 * q * float(np.sum(bcv[links[:, 1]] ** 2))
    return float(-0.5 * np.dot(c + b, s) + 0.5 * np.dot(c, c) - etas.sum() + edge)


def effective_energies(v: Volume, f: DisorderField, q: float, H: np.ndarray) -> np.ndarray:
    """Vectorised zero-boundary effective energy for the rows of ``H``."""
    H = np.atleast_2d(H)
    cov = covariance_matrix(v, q)
    cols = []
    etas = np.empty(H.shape, dtype=float)
    centers = np.empty(H.shape, dtype=float)
    for j, s in enumerate(v.sites):
        for val in np.unique(H[:, j]):
            sel = H[:, j] == val
            centers[sel, j] = f.center(s, int(val))
            etas[sel, j] = f.eta(s, int(val))
    quad = np.einsum("ij,jk,ik->i", centers, cov, centers)
    return -0.5 * quad + 0.5 * np.sum(centers**2, axis=1) - etas.sum(axis=1)


def ferromagnetic_energy(cs: CouplingSet, f: DisorderField, h) -> float:
    """``sum_{x<y} J (u_x - u_y)^2 + sum_x K u_x^2 - sum_x eta_x``."""
    v = cs.volume
    hv = _heights(v, h)
    u = hv + f.shifts(v.sites, hv)
    diff = u[:, None] - u[None, :]
    pair = 0.5 * float(np.sum(cs.pair_couplings * diff**2))
    return pair + float(np.dot(cs.boundary_weights, u**2)) - float(f.etas(v.sites, hv).sum())


# ---------------------------------------------------------------------------
# exact enumeration


@dataclass
class NuTable:
    volume: Volume
    hmax: int
    configs: np.ndarray
    probs: np.ndarray
    energies: np.ndarray
    omitted_mass_bound: float

    def prob(self, h) -> float:
        h = np.asarray(h).reshape(-1)
        idx = _config_index(h, self.hmax)
        return float(self.probs[idx])

    def marginal(self, site) -> dict:
        j = self.volume.index[tuple(site)]
        out = {}
        for val in range(-self.hmax, self.hmax + 1):
            out[val] = float(self.probs[self.configs[:, j] == val].sum())
        return out


def _config_index(h: np.ndarray, hmax: int) -> int:
    base = 2 * hmax + 1
    idx = 0
    for val in h:
        idx = idx * base + int(val) + hmax
    return idx


def all_configs(n: int, hmax: int) -> np.ndarray:
    vals = np.arange(-hmax, hmax + 1, dtype=np.int64)
    return np.array(list(itertools.product(vals, repeat=n)), dtype=np.int64).reshape(-1, n)


def nu_exact(
    v: Volume,
    f: DisorderField,
    q: float,
    mstar: float,
    hmax: int,
    cs: CouplingSet | None = None,
) -> NuTable:
    """Integer-height law on ``|h_x| <= hmax`` by full enumeration."""
    n = len(v)
    count = (2 * hmax + 1) ** n
    if count > MAX_ENUMERATION:
        raise ValueError(f"{count} configurations exceed the enumeration limit; use nu_mcmc")
    configs = all_configs(n, hmax)
    energies = np.concatenate(
        [effective_energies(v, f, q, configs[i : i + 200_000]) for i in range(0, count, 200_000)]
    )
    shift = energies.min()
    w = np.exp(-(energies - shift))
    Z = w.sum()
    probs = w / Z
    omitted = _omitted_mass(v, f, q, mstar, hmax, energies, shift, Z, cs)
    return NuTable(v, hmax, configs, probs, energies, omitted)


def _omitted_mass(v, f, q, mstar, hmax, energies, shift, Z, cs) -> float:
    """Upper bound on the mass outside the window relative to the kept mass.

    Dropping the (nonnegative) pair terms leaves
    ``E(h) >= sum_x K_x (|h_x| - delta_d)_+^2 - n * delta_eta``.
    """
    if cs is None:
        cs = couplings(v, q, mstar, method="resolvent")
    p = f.params
    kmin = float(cs.boundary_weights.min())
    n = len(v)
    ks = np.arange(0, 4 * hmax + 200)
    single = np.exp(-kmin * np.maximum(ks - p.delta_d, 0.0) ** 2)
    inside = single[0] + 2 * single[1 : hmax + 1].sum()
    total = single[0] + 2 * single[1:].sum()
    if not np.isfinite(total) or kmin == 0:
        return math.inf
    outside = total**n - inside**n
    log_out = math.log(max(outside, 1e-300)) + n * p.delta_eta
    return float(math.exp(log_out + shift) / Z)


# ---------------------------------------------------------------------------
# Markov chain


@dataclass(frozen=True)
class MCMCParams:
    sweeps: int = 1000
    burn_in: int = 100
    window: int = 2
    shift_every: int = 10
    thin: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.sweeps < 1 or self.burn_in < 0 or self.window < 1 or self.thin < 1:
            raise ValueError("invalid MCMC parameters")


@dataclass
class MCMCResult:
    samples: np.ndarray
    local_acceptance: float
    shift_acceptance: float
    autocorr_time: float
    observable: np.ndarray


def integrated_autocorr_time(x: np.ndarray, c: float = 5.0) -> float:
    """Integrated autocorrelation time with an automatic window."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4 or np.allclose(x, x[0]):
        return 1.0
    y = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(y, size)
    acf = np.fft.irfft(spec * np.conj(spec), size)[:n]
    acf /= acf[0]
    taus = 2.0 * np.cumsum(acf) - 1.0
    for m in range(1, n):
        if m >= c * taus[m]:
            return float(max(taus[m], 1.0))
    return float(max(taus[-1], 1.0))


def nu_mcmc(
    v: Volume,
    f: DisorderField,
    q: float,
    mstar: float,
    rng: np.random.Generator,
    params: MCMCParams = MCMCParams(),
    cs: CouplingSet | None = None,
    init=None,
) -> MCMCResult:
    """Windowed heat-bath chain with occasional global shifts.

    A site update draws a new height from the Boltzmann weights on
    ``current +/- window`` and accepts it with ``min(1, Z_old / Z_new)``, the
    ratio of window partition sums, which restores detailed balance.  Every
    ``shift_every`` sweeps a global +/-1 move is proposed with a Metropolis test.
    """
    if cs is None:
        cs = couplings(v, q, mstar, method="resolvent")
    n = len(v)
    sites = v.sites
    J = cs.pair_couplings
    K = cs.boundary_weights
    row = J.sum(axis=1)
    h = np.zeros(n, dtype=np.int64) if init is None else _heights(v, init).copy()
    u = h + f.shifts(sites, h)
    field_ = J @ u
    w = params.window
    offsets = np.arange(-w, w + 1)

    def local(j, vals):
        uu = vals + np.array([f.dshift(sites[j], int(k)) for k in vals])
        et = np.array([f.eta(sites[j], int(k)) for k in vals])
        return uu, uu * uu * (row[j] + K[j]) - 2.0 * uu * field_[j] - et

    def total_energy(uu, hh):
        pair = float(uu @ (row * uu) - uu @ (J @ uu))
        return pair + float(K @ (uu * uu)) - float(f.etas(sites, hh).sum())

    local_acc = local_try = 0
    shift_acc = shift_try = 0
    samples = []
    observable = []
    for sweep in range(params.burn_in + params.sweeps):
        for j in range(n):
            cur = int(h[j])
            cand = cur + offsets
            uu, e = local(j, cand)
            lw = -(e - e.min())
            wts = np.exp(lw)
            z_old = wts.sum()
            pick = int(rng.choice(len(cand), p=wts / z_old))
            new = int(cand[pick])
            local_try += 1
            if new == cur:
                local_acc += 1
                continue
            cand2 = new + offsets
            _, e2 = local(j, cand2)
            # both sums share the same reference energy e.min()
            z_new = np.exp(-(e2 - e.min())).sum()
            if rng.random() < min(1.0, z_old / z_new):
                local_acc += 1
                du = uu[pick] - u[j]
                h[j] = new
                u[j] = uu[pick]
                field_ += J[:, j] * du
        if params.shift_every and (sweep + 1) % params.shift_every == 0:
            step = 1 if rng.random() < 0.5 else -1
            h2 = h + step
            u2 = h2 + f.shifts(sites, h2)
            delta = total_energy(u2, h2) - total_energy(u, h)
            shift_try += 1
            if rng.random() < math.exp(min(0.0, -delta)):
                shift_acc += 1
                h, u = h2, u2
                field_ = J @ u
        if sweep >= params.burn_in and (sweep - params.burn_in) % params.thin == 0:
            samples.append(h.copy())
            observable.append(float(np.abs(h).sum()))
    obs = np.array(observable)
    return MCMCResult(
        samples=np.array(samples, dtype=np.int64).reshape(-1, n),
        local_acceptance=local_acc / max(local_try, 1),
        shift_acceptance=shift_acc / max(shift_try, 1) if shift_try else math.nan,
        autocorr_time=integrated_autocorr_time(obs),
        observable=obs,
    )


# ---------------------------------------------------------------------------
# roughness


@dataclass
class RoughnessReport:
    total: float
    gaussian_part: float
    centering_part: float
    centering_stderr: float
    summability: float
    n_samples: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def roughness(
    v: Volume,
    f: DisorderField,
    q: float,
    mstar: float,
    samples: np.ndarray,
    x0,
    autocorr_time: float = 1.0,
) -> RoughnessReport:
    """Second moment of the continuous height at ``x0`` split into its two parts.

    ``gaussian_part`` is the diagonal covariance entry; ``centering_part`` is the
    sample mean of the squared smoothed well-centre field.  ``summability`` is
    ``sum_y cov(x0, y) <|h_y|>``.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.int64))
    j = v.index[tuple(x0)]
    e = np.zeros(len(v))
    e[j] = 1.0
    row = resolvent_solve(v, q, e).values
    gaussian = float(row[j])
    vals = np.empty(len(samples))
    for k, h in enumerate(samples):
        vals[k] = float(np.dot(row, f.centers(v.sites, h))) ** 2
    cent = float(vals.mean())
    stderr = float(vals.std(ddof=1) * math.sqrt(autocorr_time / len(vals))) if len(vals) > 1 else math.nan
    summ = float(np.dot(row, np.abs(samples).mean(axis=0)))
    return RoughnessReport(gaussian + cent, gaussian, cent, stderr, summ, len(samples))
