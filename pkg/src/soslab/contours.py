"""Contour representation of the integer-height law.

Given ``h`` the effective energy is split into

* low-temperature (LT) terms: couplings across "dangerous" pairs, collected
  into activities of the connected components of the LT support;
* high-temperature (HT) terms: the remaining long-range pairs with a height
  mismatch, each attached to a staircase polymer;
* small fields: the shift-induced energy of regions where ``h`` is constant,
  split into centred local and multi-site terms plus a constant.

Subtracting a fixed bound from every HT and small-field term and expanding the
nonnegative remainders over polymer subsets gives nonnegative contour weights
``rho0``.  ``assemble_representation`` carries this out exactly on small
volumes and checks that ``exp(-E(h) + <S, V(h)>) / sum rho0`` does not depend
on ``h``.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .disorder import DisorderField
from .heights import CouplingSet, HeightConfig, _heights, all_configs, couplings, effective_energy, nn_coupling_lower_bound
from .lattice import Volume, connected_components, connected_masks, l1_distance, unit_vectors

Site = tuple


# ---------------------------------------------------------------------------
# constants


@dataclass(frozen=True)
class PeierlsConstants:
    dimension: int
    q: float
    mstar: float
    delta_d: float
    alpha: float
    range_r: int
    tau_nn: float
    beta: float
    tau1: float
    tilde_beta: float
    K_vol: float

    def decay_bound(self, dist) -> np.ndarray | float:
        """Upper bound on a pair coupling at 1-distance ``dist``."""
        d, q = self.dimension, self.q
        return self.mstar**2 * (1 + 2 * d * q) / 4.0 * (1.0 / (2 * d * q) + 1.0) ** (-np.asarray(dist, dtype=float))

    def boundary_decay_bound(self, dist) -> np.ndarray | float:
        """Upper bound on a boundary weight at distance ``dist`` from the outside.

        Walks leaving the box have length at least ``dist``; their total weight
        is ``q rho^dist`` with ``rho = 2dq / (1 + 2dq)``.
        """
        rho = 2 * self.dimension * self.q / (1 + 2 * self.dimension * self.q)
        return 0.5 * self.mstar**2 * rho ** np.asarray(dist, dtype=float)

    def threshold(self, dist) -> np.ndarray | float:
        return np.exp(0.5 * self.alpha * np.asarray(dist, dtype=float))


def peierls_constants(dimension: int, q: float, mstar: float, delta_d: float = 0.0) -> PeierlsConstants:
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    if mstar <= 0 or not 0 <= delta_d <= 0.25:
        raise ValueError("need mstar > 0 and 0 <= delta_d <= 1/4")
    d = dimension
    ratio = 1.0 + 1.0 / (2 * d * q)
    alpha = 0.5 * math.log(ratio)
    lead = mstar**2 * (1 + 2 * d * q) / 4.0
    r = 1
    if lead > 1:
        r = max(1, int(math.floor(2 * math.log(lead) / math.log(ratio))) + 1)
    tau_nn = (1 - 2 * delta_d) ** 2 * nn_coupling_lower_bound(d, q, mstar)
    beta = tau_nn / 3.0
    # inf over real L >= r of exp(alpha L / 2) / (3L)^d; the free minimiser is 2d / alpha
    L = max(float(r), 2.0 * d / alpha)
    K_vol = math.exp(0.5 * alpha * L) / (3.0 * L) ** d
    tau1 = beta * min((2 * r + 1) ** (-d), K_vol)
    tilde = min(alpha, beta, tau1)
    return PeierlsConstants(d, q, mstar, delta_d, alpha, r, tau_nn, beta, tau1, tilde, K_vol)


# ---------------------------------------------------------------------------
# contours


def _neighbours(s: Site):
    for e in unit_vectors(len(s)):
        yield tuple(a + b for a, b in zip(s, e))


def _forward(s: Site):
    # one end of each nearest-neighbour pair, so pair sums count every pair once
    for axis in range(len(s)):
        yield s[:axis] + (s[axis] + 1,) + s[axis + 1 :]


def closure(sites) -> frozenset:
    out = set(sites)
    for s in sites:
        out.update(_neighbours(s))
    return frozenset(out)


@dataclass(frozen=True)
class Contour:
    support: frozenset
    heights: HeightConfig

    def __post_init__(self):
        v = self.heights.volume
        if any(s not in v for s in self.support):
            raise ValueError("support must lie inside the volume")
        if not complement_constant(self.support, self.heights):
            raise ValueError("heights are not constant on the complement components of the support")

    @property
    def volume(self) -> Volume:
        return self.heights.volume

    def key(self) -> tuple:
        return (tuple(sorted(self.support)), tuple(int(x) for x in self.heights.values))


def complement_constant(support, h: HeightConfig) -> bool:
    """Check that the zero-extended heights are constant off the support.

    The check runs on the box enlarged by a collar of width one, whose outer
    ring joins all unbounded complement pieces.
    """
    v = h.volume
    lo = tuple(c - 1 for c in v.lo)
    hi = tuple(c + 1 for c in v.hi)
    region = set(itertools.product(*[range(a, b + 1) for a, b in zip(lo, hi)]))
    free = region - set(support)
    for comp in connected_components(free):
        vals = {h.extended(s) for s in comp}
        if len(vals) > 1:
            return False
    return True


def surface_energy(c: Contour) -> int:
    """Sum of ``|h_x - h_y|`` over nearest-neighbour pairs inside the closure of the support."""
    cl = closure(c.support)
    h = c.heights
    total = 0
    for s in cl:
        for y in _forward(s):
            if y in cl:
                total += abs(h.extended(s) - h.extended(y))
    return int(total)


def components(c: Contour) -> list[Contour]:
    """Connected pieces of ``c``; heights outside each piece are flattened to the adjacent level."""
    out = []
    for comp in connected_components(c.support):
        out.append(Contour(comp, _restrict_heights(c.heights, comp)))
    return out


def _restrict_heights(h: HeightConfig, support: frozenset) -> HeightConfig:
    v = h.volume
    cl = closure(support)
    vals = h.values.copy()
    lo = tuple(c - 1 for c in v.lo)
    hi = tuple(c + 1 for c in v.hi)
    region = set(itertools.product(*[range(a, b + 1) for a, b in zip(lo, hi)]))
    for piece in connected_components(region - set(support)):
        touching = {h.extended(s) for s in piece & cl}
        if not touching:
            continue
        if len(touching) > 1:
            raise ValueError("component heights are not separable")
        level = touching.pop()
        for s in piece:
            if s in v:
                vals[v.index[s]] = level
    return HeightConfig(v, vals)


# ---------------------------------------------------------------------------
# dangerous pairs and LT support


@dataclass
class _Geometry:
    """Index bookkeeping for the closed box."""

    volume: Volume
    sites: tuple
    coords: np.ndarray
    inside: np.ndarray
    dist: np.ndarray
    nearest_boundary: np.ndarray
    boundary_dist: np.ndarray


_GEOMETRY_CACHE: dict = {}


def _geometry(v: Volume) -> _Geometry:
    g = _GEOMETRY_CACHE.get(v)
    if g is not None:
        return g
    sites = v.closure
    coords = np.array(sites, dtype=np.int64)
    inside = np.array([s in v for s in sites])
    dist = np.abs(coords[:, None, :] - coords[None, :, :]).sum(axis=2)
    bidx = np.flatnonzero(~inside)
    # boundary partner: nearest boundary site, ties to the lexicographically smallest
    nb = np.empty(len(v), dtype=np.int64)
    bd = np.empty(len(v), dtype=np.int64)
    pos = {s: i for i, s in enumerate(sites)}
    for j, s in enumerate(v.sites):
        row = dist[pos[s], bidx]
        k = int(np.argmin(row))
        nb[j] = bidx[k]
        bd[j] = row[k]
    g = _Geometry(v, sites, coords, inside, dist, nb, bd)
    _GEOMETRY_CACHE[v] = g
    return g


def _closure_heights(g: _Geometry, h: HeightConfig) -> np.ndarray:
    return np.array([h.extended(s) for s in g.sites], dtype=np.int64)


def dangerous_edges(v: Volume, h, pc: PeierlsConstants) -> tuple[list, list]:
    """Pairs of the closed box with at least one end inside.

    Short-range pairs (distance at most ``r``) are dangerous whenever the heights
    differ; longer pairs when the height gap reaches ``exp(alpha |x - y| / 2)``.
    """
    hv = HeightConfig(v, _heights(v, h))
    g = _geometry(v)
    hh = _closure_heights(g, hv)
    gap = np.abs(hh[:, None] - hh[None, :])
    i, j = np.triu_indices(len(g.sites), 1)
    keep = (g.inside[i] | g.inside[j]) & (gap[i, j] > 0)
    i, j = i[keep], j[keep]
    dist = g.dist[i, j]
    short = dist <= pc.range_r
    far = (~short) & (gap[i, j] >= pc.threshold(dist))
    e1 = [(g.sites[a], g.sites[b]) for a, b in zip(i[short], j[short])]
    e2 = [(g.sites[a], g.sites[b]) for a, b in zip(i[far], j[far])]
    return e1, e2


def cube(x: Site, y: Site) -> frozenset:
    """Smallest cube containing both points: corner at the componentwise minimum."""
    side = max(abs(a - b) for a, b in zip(x, y))
    corner = [min(a, b) for a, b in zip(x, y)]
    return frozenset(itertools.product(*[range(c, c + side + 1) for c in corner]))


def long_range_pairs(h_ext: dict, pc: PeierlsConstants) -> list:
    """Dangerous long-range pairs in Z^d for heights ``h_ext`` (zero off its keys)."""
    pts = [(s, val) for s, val in h_ext.items() if val != 0]
    keys = set(h_ext)
    out = set()
    items = list(h_ext.items())
    for a in range(len(items)):
        x, hx = items[a]
        for b in range(a + 1, len(items)):
            y, hy = items[b]
            if hx == hy:
                continue
            dd = l1_distance(x, y)
            if dd > pc.range_r and abs(hx - hy) >= pc.threshold(dd):
                out.add((min(x, y), max(x, y)))
    # partners outside the listed sites carry height zero
    for x, hx in pts:
        reach = int(math.floor(2 * math.log(abs(hx)) / pc.alpha)) if abs(hx) > 1 else 0
        if reach <= pc.range_r:
            continue
        for off in itertools.product(range(-reach, reach + 1), repeat=len(x)):
            dd = sum(abs(o) for o in off)
            if dd <= pc.range_r or dd > reach:
                continue
            y = tuple(a + o for a, o in zip(x, off))
            if y in keys:
                continue
            if abs(hx) >= pc.threshold(dd):
                out.add((min(x, y), max(x, y)))
    return sorted(out)


def lt_support(v: Volume, h, pc: PeierlsConstants) -> Contour:
    hv = HeightConfig(v, _heights(v, h))
    e1, _ = dangerous_edges(v, hv, pc)
    gamma1 = {s for pair in e1 for s in pair}
    h_ext = {s: hv.extended(s) for s in v.closure}
    gamma2 = set()
    for x, y in long_range_pairs(h_ext, pc):
        gamma2 |= cube(x, y)
    support = frozenset(s for s in gamma1 | gamma2 if s in v)
    return Contour(support, hv)


# ---------------------------------------------------------------------------
# surface energy per site on dangerous cubes


@dataclass
class VolumeAudit:
    n_components: int
    worst_ratio: float
    violations: int
    K_vol: float

    @property
    def margin(self) -> float:
        return self.worst_ratio - self.K_vol


def cube_volume_audit(h_patch: dict, pc: PeierlsConstants) -> VolumeAudit:
    """Surface energy per site on every component of the union of dangerous cubes."""
    pairs = long_range_pairs(h_patch, pc)
    union = set()
    for x, y in pairs:
        union |= cube(x, y)
    worst = math.inf
    bad = 0
    comps = connected_components(union)
    for comp in comps:
        energy = 0
        for s in comp:
            for y in _forward(s):
                if y in comp:
                    energy += abs(h_patch.get(s, 0) - h_patch.get(y, 0))
        ratio = energy / len(comp)
        worst = min(worst, ratio)
        if ratio < pc.K_vol * (1 - 1e-12):
            bad += 1
    return VolumeAudit(len(comps), worst, bad, pc.K_vol)


# ---------------------------------------------------------------------------
# pair terms


@dataclass(frozen=True)
class _PairUniverse:
    """All coupled pairs: interior pairs and each site with its boundary partner."""

    a: np.ndarray  # closure index of the first end (inside)
    b: np.ndarray  # closure index of the second end
    site_a: np.ndarray  # volume index of a
    site_b: np.ndarray  # volume index of b, -1 for boundary partners
    dist: np.ndarray
    coupling: np.ndarray
    bound: np.ndarray  # h-independent HT bound (only meaningful for dist > r)
    polymer: list  # frozensets of volume sites


def _staircase(x: Site, y: Site) -> list:
    """Path from the smaller end, fixing coordinates axis by axis."""
    a, b = (x, y) if x <= y else (y, x)
    cur = list(a)
    path = [tuple(cur)]
    for axis in range(len(a)):
        step = 1 if b[axis] > cur[axis] else -1
        while cur[axis] != b[axis]:
            cur[axis] += step
            path.append(tuple(cur))
    return path


_UNIVERSE_CACHE: dict = {}


def _pair_universe(cs: CouplingSet, pc: PeierlsConstants) -> _PairUniverse:
    key = (id(cs), pc)
    hit = _UNIVERSE_CACHE.get(key)
    if hit is not None and hit[0] is cs:
        return hit[1]
    v = cs.volume
    g = _geometry(v)
    pos = {s: i for i, s in enumerate(g.sites)}
    n = len(v)
    A, B, SA, SB, D, J, BD, P = [], [], [], [], [], [], [], []
    for i in range(n):
        for j in range(i + 1, n):
            x, y = v.sites[i], v.sites[j]
            dd = l1_distance(x, y)
            A.append(pos[x]); B.append(pos[y]); SA.append(i); SB.append(j)
            D.append(dd)
            J.append(cs.pair_couplings[i, j])
            BD.append(min(1.0, float(pc.decay_bound(dd)) * (pc.threshold(dd) + 2 * pc.delta_d) ** 2))
            P.append(frozenset(s for s in _staircase(x, y) if s in v))
    for i in range(n):
        x = v.sites[i]
        y = g.sites[g.nearest_boundary[i]]
        dd = int(g.boundary_dist[i])
        A.append(pos[x]); B.append(int(g.nearest_boundary[i])); SA.append(i); SB.append(-1)
        D.append(dd)
        J.append(cs.boundary_weights[i])
        BD.append(min(1.0, float(pc.boundary_decay_bound(dd)) * (pc.threshold(dd) + pc.delta_d) ** 2))
        P.append(frozenset(s for s in _staircase(x, y) if s in v))
    u = _PairUniverse(
        np.array(A), np.array(B), np.array(SA), np.array(SB), np.array(D), np.array(J), np.array(BD), P
    )
    _UNIVERSE_CACHE[key] = (cs, u)
    return u


@dataclass
class _PairSplit:
    lt_mask: np.ndarray
    ht_mask: np.ndarray
    energy: np.ndarray  # per-pair energy carried by LT/HT (zero for flat pairs)


def _split_pairs(u: _PairUniverse, f: DisorderField, v: Volume, hv: np.ndarray, pc: PeierlsConstants) -> _PairSplit:
    shifts = f.shifts(v.sites, hv)
    ha = hv[u.site_a]
    hb = np.where(u.site_b >= 0, hv[np.maximum(u.site_b, 0)], 0)
    differ = ha != hb
    gap = np.abs(ha - hb)
    danger = differ & ((u.dist <= pc.range_r) | (gap >= pc.threshold(u.dist)))
    da = shifts[u.site_a]
    interior = u.site_b >= 0
    db = np.where(interior, shifts[np.maximum(u.site_b, 0)], 0.0)
    # interior pairs: J (du)^2; boundary pairs: K (h^2 + 2 h d), the K d^2 part sits in the small fields
    e_int = u.coupling * ((ha + da) - (hb + db)) ** 2
    e_bdy = u.coupling * (ha * ha + 2.0 * ha * da)
    energy = np.where(differ, np.where(interior, e_int, e_bdy), 0.0)
    return _PairSplit(danger, differ & ~danger, energy)


def _lt_components(v: Volume, support: frozenset) -> tuple[list, np.ndarray]:
    comps = connected_components(support)
    label = np.full(len(v), -1, dtype=np.int64)
    for k, comp in enumerate(comps):
        for s in comp:
            label[v.index[s]] = k
    return comps, label


def lt_activity(v: Volume, f: DisorderField, cs: CouplingSet, c: Contour, pc: PeierlsConstants) -> float:
    """``exp(-sum of dangerous-pair energies)`` for pairs anchored in the support of ``c``."""
    return math.exp(-_lt_energy(v, f, cs, c, pc))


def _lt_energy(v, f, cs, c: Contour, pc) -> float:
    u = _pair_universe(cs, pc)
    hv = c.heights.values
    split = _split_pairs(u, f, v, hv, pc)
    inside = np.zeros(len(v), dtype=bool)
    for s in c.support:
        inside[v.index[s]] = True
    anchored = inside[u.site_a]
    stray = split.lt_mask & ~anchored
    if np.any(stray & (u.site_b >= 0) & inside[np.maximum(u.site_b, 0)]):
        raise AssertionError("dangerous pair straddles the support")
    sel = split.lt_mask & anchored
    if np.any(sel & (u.site_b >= 0) & ~inside[np.maximum(u.site_b, 0)]):
        raise AssertionError("dangerous pair leaves its component")
    return float(split.energy[sel].sum())


@dataclass(frozen=True)
class HTTerm:
    polymer: frozenset
    endpoints: tuple
    value: float
    bound: float


def ht_terms(v: Volume, f: DisorderField, cs: CouplingSet, h, pc: PeierlsConstants, size_cutoff: int | None = None):
    """Non-dangerous mismatched pairs with their staircase polymers.

    Returns the terms with ``|g| <= size_cutoff`` and the summed bounds of the
    omitted ones.
    """
    hv = _heights(v, h)
    u = _pair_universe(cs, pc)
    split = _split_pairs(u, f, v, hv, pc)
    g = _geometry(v)
    terms = []
    omitted = 0.0
    for k in np.flatnonzero(split.ht_mask):
        size = int(u.dist[k]) + 1
        if size_cutoff is not None and size > size_cutoff:
            omitted += float(u.bound[k])
            continue
        val = float(split.energy[k])
        if not 0 <= val <= u.bound[k] * (1 + 1e-12):
            raise AssertionError(f"HT term {val} outside [0, {u.bound[k]}]; the pair should be dangerous")
        terms.append(HTTerm(u.polymer[k], (g.sites[u.a[k]], g.sites[u.b[k]]), val, float(u.bound[k])))
    return terms, omitted


# ---------------------------------------------------------------------------
# small fields


@dataclass(frozen=True)
class SmallFieldTerm:
    support: frozenset
    height: int | None
    value: float
    kind: str  # "local", "boundary", "pair", "multi"
    bound: float


def small_field_bound(pc: PeierlsConstants, size: int) -> float:
    d, q = pc.dimension, pc.q
    return (2 * pc.delta_d) ** 2 * q * pc.mstar**2 * (2 * d / (1 + 2 * d * q)) * math.exp(-pc.alpha * (size - 2))


def boundary_field_bound(pc: PeierlsConstants) -> float:
    d, q = pc.dimension, pc.q
    return q * pc.mstar**2 * d * pc.delta_d**2 / (1 + 2 * d * q)


@dataclass
class _Clusters:
    masks: np.ndarray
    sizes: np.ndarray
    members: np.ndarray  # bool (n_masks, n)
    walks: np.ndarray  # (n_masks, n, n) walk sums for each support
    bounds: np.ndarray
    supports: list


_CLUSTER_CACHE: dict = {}


def _clusters(cs: CouplingSet, pc: PeierlsConstants, size_cutoff: int | None) -> _Clusters:
    key = (id(cs), pc, size_cutoff)
    hit = _CLUSTER_CACHE.get(key)
    if hit is not None and hit[0] is cs:
        return hit[1]
    if cs.walk_tables is None:
        raise ValueError("small fields need walk-route couplings")
    v = cs.volume
    n = len(v)
    top = cs.support_cutoff if size_cutoff is None else min(size_cutoff, cs.support_cutoff)
    masks = np.array(connected_masks(list(v.sites), 2, top), dtype=np.int64)
    members = ((masks[:, None] >> np.arange(n)[None, :]) & 1).astype(bool)
    walks = np.stack([cs.walk_tables[i][masks] for i in range(n)], axis=1)
    sizes = members.sum(axis=1)
    bounds = np.array([small_field_bound(pc, int(s)) for s in sizes])
    supports = [frozenset(v.sites[i] for i in np.flatnonzero(row)) for row in members]
    out = _Clusters(masks, sizes, members, walks, bounds, supports)
    _CLUSTER_CACHE[key] = (cs, out)
    return out


def _cluster_values(cl: _Clusters, cs: CouplingSet, f: DisorderField, hv: np.ndarray, e_d2: float):
    """``(raw, centred, flat)`` per cluster for heights ``hv``."""
    v = cs.volume
    d = f.shifts(v.sites, hv)
    same = hv[:, None] == hv[None, :]
    diff2 = np.where(same, (d[:, None] - d[None, :]) ** 2, 0.0)
    raw = 0.5 * cs.prefactor * np.einsum("kij,ij->k", cl.walks, diff2)
    offset = np.zeros(len(cl.masks))
    two = cl.sizes == 2
    if np.any(two):
        nn_walk = np.array([cl.walks[k][cl.members[k]][:, cl.members[k]][0, 1] for k in np.flatnonzero(two)])
        offset[two] = cs.prefactor * nn_walk * 2.0 * e_d2
    flat = np.array([len(set(hv[row].tolist())) == 1 for row in cl.members])
    return raw, raw - offset, flat, offset


def boundary_shift_field(cs: CouplingSet, f: DisorderField, hv: np.ndarray) -> np.ndarray:
    """``K_x (E d^2 - d_x(h_x)^2)``, the centred boundary interaction of the shifts."""
    d = f.shifts(cs.volume.sites, hv)
    return cs.boundary_weights * (f.shift_second_moment - d * d)


def small_fields(
    v: Volume,
    f: DisorderField,
    cs: CouplingSet,
    hmax: int,
    size_cutoff: int | None = None,
    pc: PeierlsConstants | None = None,
) -> list[SmallFieldTerm]:
    """Small-field terms for every flat cluster and every level ``|h| <= hmax``."""
    if pc is None:
        pc = peierls_constants(v.dimension, cs.q, cs.mstar, f.params.delta_d)
    cl = _clusters(cs, pc, size_cutoff)
    out = []
    bbound = boundary_field_bound(pc)
    for level in range(-hmax, hmax + 1):
        hv = np.full(len(v), level, dtype=np.int64)
        tilde = boundary_shift_field(cs, f, hv)
        if np.any(np.abs(tilde) > bbound * (1 + 1e-12)):
            raise AssertionError("boundary shift field above its bound")
        for j, s in enumerate(v.sites):
            out.append(SmallFieldTerm(frozenset([s]), level, -f.eta(s, level), "local", f.params.delta_eta))
            out.append(SmallFieldTerm(frozenset([s]), level, -float(tilde[j]), "boundary", bbound))
        _, centred, _, _ = _cluster_values(cl, cs, f, hv, f.shift_second_moment)
        for k in range(len(cl.masks)):
            if abs(centred[k]) > cl.bounds[k] * (1 + 1e-12):
                raise AssertionError("small field above its bound")
            kind = "pair" if cl.sizes[k] == 2 else "multi"
            out.append(SmallFieldTerm(cl.supports[k], level, float(centred[k]), kind, float(cl.bounds[k])))
    return out


def small_field_energy(v, f, cs, hv, pc, size_cutoff=None) -> float:
    """``<S, V(h)>``: all local terms plus the flat clusters of ``h``."""
    cl = _clusters(cs, pc, size_cutoff)
    local = -float(f.etas(v.sites, hv).sum()) - float(boundary_shift_field(cs, f, hv).sum())
    _, centred, flat, _ = _cluster_values(cl, cs, f, hv, f.shift_second_moment)
    return local + float(centred[flat].sum())


# ---------------------------------------------------------------------------
# full representation


@dataclass
class RepresentationAudit:
    log_K: float
    log_K_spread: float
    log_K_expected: float
    min_rho0: float
    peierls_violations: int
    peierls_worst_margin: float
    identity_max_error: float
    omitted_bound: float
    n_configs: int
    n_contours: int

    @property
    def relative_spread(self) -> float:
        return math.expm1(self.log_K_spread)

    def passed(self, tol: float = 1e-6) -> bool:
        return (
            self.relative_spread <= tol + self.omitted_bound
            and self.min_rho0 >= 0
            and self.peierls_violations == 0
        )

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["relative_spread"] = self.relative_spread
        d["passed"] = self.passed()
        return d


@dataclass
class ConfigExpansion:
    h: tuple
    lt_support: frozenset
    log_weight: float  # -E(h) + <S, V(h)>
    rho0: dict  # union support mask -> weight
    log_K: float


@dataclass
class _Representation:
    v: Volume
    f: DisorderField
    cs: CouplingSet
    pc: PeierlsConstants
    size_cutoff: int | None
    clusters: _Clusters
    pairs: _PairUniverse
    constant: float

    def mask_of(self, sites) -> int:
        m = 0
        for s in sites:
            m |= 1 << self.v.index[s]
        return m

    def expand(self, h) -> ConfigExpansion:
        v, f, cs, pc = self.v, self.f, self.cs, self.pc
        hv = _heights(v, h)
        contour = lt_support(v, hv, pc)
        comps, label = _lt_components(v, contour.support)
        split = _split_pairs(self.pairs, f, v, hv, pc)
        u = self.pairs
        # LT activities and r, r2 factors per component
        log_prod = 0.0
        lt_energy = float(split.energy[split.lt_mask].sum())
        log_prod -= lt_energy
        polys = []  # (mask, t)
        pmask = [self.mask_of(p) for p in u.polymer]
        comp_masks = [self.mask_of(c) for c in comps]
        ht_sel = u.dist > pc.range_r
        for k in np.flatnonzero(ht_sel):
            hits = sum(1 for cm in comp_masks if cm & pmask[k])
            if hits == 0:
                if split.ht_mask[k]:
                    raise AssertionError("HT term away from every contour")
                continue
            s_val = float(split.energy[k]) if split.ht_mask[k] else 0.0
            if s_val > u.bound[k] * (1 + 1e-12):
                raise AssertionError("HT term above its bound")
            log_prod -= hits * float(u.bound[k])
            polys.append((pmask[k], hits * float(u.bound[k]) - s_val))
        cl = self.clusters
        _, centred, flat, _ = _cluster_values(cl, cs, f, hv, f.shift_second_moment)
        for k, cm_k in enumerate(cl.masks):
            cm_k = int(cm_k)
            hits = sum(1 for cm in comp_masks if cm & cm_k)
            if hits == 0:
                if not flat[k]:
                    raise AssertionError("non-flat cluster away from every contour")
                continue
            n_val = 0.0 if flat[k] else float(centred[k])
            if abs(n_val) > cl.bounds[k] * (1 + 1e-12):
                raise AssertionError("small field above its bound")
            log_prod -= hits * float(cl.bounds[k])
            polys.append((cm_k, hits * float(cl.bounds[k]) - n_val))
        base = self.mask_of(contour.support)
        table = {base: 1.0}
        for m, t in polys:
            w = math.expm1(t)
            if w == 0.0:
                continue
            nxt = dict(table)
            for key, val in table.items():
                nk = key | m
                nxt[nk] = nxt.get(nk, 0.0) + val * w
            table = nxt
        scale = math.exp(log_prod)
        rho0 = {k: val * scale for k, val in table.items()}
        energy = effective_energy(v, f, cs.q, cs.mstar, hv)
        svh = small_field_energy(v, f, cs, hv, pc, self.size_cutoff)
        log_weight = -energy + svh
        total = sum(rho0.values())
        log_K = log_weight - math.log(total)
        return ConfigExpansion(tuple(int(x) for x in hv), contour.support, log_weight, rho0, log_K)

    def support_of(self, mask: int) -> frozenset:
        return frozenset(s for i, s in enumerate(self.v.sites) if mask >> i & 1)


def build_representation(v: Volume, f: DisorderField, q: float, mstar: float, size_cutoff: int | None = None, cs=None):
    if len(v) > 12:
        raise ValueError("the exact representation is limited to 12 sites")
    if cs is None:
        cs = couplings(v, q, mstar, method="walk")
    pc = peierls_constants(v.dimension, q, mstar, f.params.delta_d)
    cl = _clusters(cs, pc, size_cutoff)
    _, _, _, offset = _cluster_values(cl, cs, f, np.zeros(len(v), dtype=np.int64), f.shift_second_moment)
    constant = float(cs.boundary_weights.sum() * f.shift_second_moment + offset.sum())
    return _Representation(v, f, cs, pc, size_cutoff, cl, _pair_universe(cs, pc), constant)


def assemble_representation(
    v: Volume,
    f: DisorderField,
    q: float,
    mstar: float,
    hmax: int,
    size_cutoff: int | None = None,
    cs: CouplingSet | None = None,
):
    """Exact contour representation over all ``|h_x| <= hmax``.

    Returns ``(K_Lambda, rho0_table, audit)``; the table maps
    ``(support, heights)`` to the weight ``rho0``.
    """
    count = (2 * hmax + 1) ** len(v)
    if count > 10**5:
        raise ValueError(f"{count} configurations exceed the enumeration limit")
    rep = build_representation(v, f, q, mstar, size_cutoff, cs)
    pc = rep.pc
    omitted = 0.0
    if size_cutoff is not None:
        full = _clusters(rep.cs, pc, None)
        omitted = float(full.bounds[full.sizes > size_cutoff].sum())
    log_ks = []
    table = {}
    min_rho = math.inf
    bad = 0
    worst = math.inf
    for h in all_configs(len(v), hmax):
        ex = rep.expand(h)
        log_ks.append(ex.log_K)
        hc = HeightConfig(v, h)
        for mask, val in ex.rho0.items():
            support = rep.support_of(mask)
            c = Contour(support, hc)
            table[c.key()] = val
            min_rho = min(min_rho, val)
            bound = -pc.beta * surface_energy(c) - pc.tilde_beta * len(support)
            margin = bound - (math.log(val) if val > 0 else -math.inf)
            worst = min(worst, margin)
            if margin < -1e-12:
                bad += 1
    log_ks = np.array(log_ks)
    logK = float(np.median(log_ks))
    audit = RepresentationAudit(
        log_K=logK,
        log_K_spread=float(log_ks.max() - log_ks.min()),
        log_K_expected=-rep.constant,
        min_rho0=float(min_rho),
        peierls_violations=bad,
        peierls_worst_margin=float(worst),
        identity_max_error=float(np.max(np.abs(log_ks + rep.constant))),
        omitted_bound=omitted,
        n_configs=len(log_ks),
        n_contours=len(table),
    )
    return math.exp(logK), table, audit


def write_contour_table(path, rows, header_lines=()) -> None:
    """CSV ``support_size, E_s, rho0, bound``; ``rows`` holds tuples in that order."""
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["support_size", "E_s", "rho0", "bound"])
        for row in rows:
            w.writerow([int(row[0]), int(row[1]), repr(float(row[2])), repr(float(row[3]))])


@dataclass
class PeierlsAudit:
    n_configs: int
    n_contours: int
    violations: int
    worst_margin: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def lt_peierls_audit(v: Volume, f: DisorderField, cs: CouplingSet, pc: PeierlsConstants, hmax: int = 1) -> PeierlsAudit:
    """Check ``rho_LT <= exp(-beta E_s - tau1 |support|)`` for every component of every ``|h| <= hmax``."""
    seen = 0
    bad = 0
    worst = math.inf
    configs = all_configs(len(v), hmax)
    for h in configs:
        contour = lt_support(v, h, pc)
        for comp in components(contour):
            seen += 1
            energy = _lt_energy(v, f, cs, comp, pc)
            margin = energy - pc.beta * surface_energy(comp) - pc.tau1 * len(comp.support)
            worst = min(worst, margin)
            if margin < -1e-12 * max(1.0, energy):
                bad += 1
    return PeierlsAudit(len(configs), seen, bad, float(worst))
