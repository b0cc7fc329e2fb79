"""Box geometry, the Dirichlet operator ``1 - q*Laplacian`` and its resolvent.

Sites are integer tuples.  Every volume enumerates its sites in lexicographic
order, and every vector or matrix indexed by sites uses that order.

The resolvent ``R = (1/q - Laplacian)^{-1}`` admits a decomposition into
nearest-neighbour walks classified by the exact set of sites they visit.
``walk_resolvent`` evaluates one term of that decomposition by a dynamic
program over (visited set, endpoint) states.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

Site = tuple[int, ...]

DENSE_THRESHOLD = 4096
DEFAULT_TOL = 1e-10


class SolverError(RuntimeError):
    """Raised when an iterative solve misses its residual target."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def unit_vectors(dimension: int) -> list[Site]:
    out = []
    for axis in range(dimension):
        for sign in (1, -1):
            e = [0] * dimension
            e[axis] = sign
            out.append(tuple(e))
    return out


def l1_distance(x: Sequence[int], y: Sequence[int]) -> int:
    return int(sum(abs(a - b) for a, b in zip(x, y)))


@dataclass(frozen=True)
class Volume:
    """A box ``lo <= s <= hi`` in Z^d together with its outer boundary."""

    dimension: int
    lo: Site
    hi: Site

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        if len(self.lo) != self.dimension or len(self.hi) != self.dimension:
            raise ValueError("corner vectors must have length equal to the dimension")
        if any(h < l for l, h in zip(self.lo, self.hi)):
            raise ValueError("empty box")

    @cached_property
    def sites(self) -> tuple[Site, ...]:
        ranges = [range(l, h + 1) for l, h in zip(self.lo, self.hi)]
        return tuple(itertools.product(*ranges))

    @cached_property
    def index(self) -> dict[Site, int]:
        return {s: i for i, s in enumerate(self.sites)}

    @cached_property
    def coords(self) -> np.ndarray:
        return np.array(self.sites, dtype=np.int64).reshape(len(self.sites), self.dimension)

    def __len__(self) -> int:
        return len(self.sites)

    def __contains__(self, site) -> bool:
        site = tuple(site)
        return len(site) == self.dimension and all(
            l <= c <= h for c, l, h in zip(site, self.lo, self.hi)
        )

    @cached_property
    def boundary(self) -> tuple[Site, ...]:
        out = set()
        for s in self.sites:
            for e in unit_vectors(self.dimension):
                y = tuple(a + b for a, b in zip(s, e))
                if y not in self:
                    out.add(y)
        return tuple(sorted(out))

    @cached_property
    def boundary_index(self) -> dict[Site, int]:
        return {s: i for i, s in enumerate(self.boundary)}

    @cached_property
    def closure(self) -> tuple[Site, ...]:
        return tuple(sorted(self.sites + self.boundary))

    @cached_property
    def neighbor_pairs(self) -> np.ndarray:
        """Interior nearest-neighbour pairs ``(i, j)`` with ``i < j``."""
        pairs = []
        for i, s in enumerate(self.sites):
            for axis in range(self.dimension):
                y = list(s)
                y[axis] += 1
                y = tuple(y)
                if y in self:
                    pairs.append((i, self.index[y]))
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)

    @cached_property
    def boundary_links(self) -> np.ndarray:
        """Pairs ``(site index, boundary index)`` at distance one."""
        links = []
        for i, s in enumerate(self.sites):
            for e in unit_vectors(self.dimension):
                y = tuple(a + b for a, b in zip(s, e))
                if y not in self:
                    links.append((i, self.boundary_index[y]))
        return np.array(links, dtype=np.int64).reshape(-1, 2)

    @cached_property
    def boundary_counts(self) -> np.ndarray:
        counts = np.zeros(len(self), dtype=np.int64)
        np.add.at(counts, self.boundary_links[:, 0], 1)
        return counts


@dataclass(frozen=True)
class RealConfig:
    """Real values on the sites of a volume, or on its outer boundary."""

    volume: Volume
    values: np.ndarray
    on_boundary: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).reshape(-1)
        expected = len(self.volume.boundary) if self.on_boundary else len(self.volume)
        if vals.shape[0] != expected:
            raise ValueError(f"expected {expected} values, got {vals.shape[0]}")
        object.__setattr__(self, "values", vals)

    def __getitem__(self, site) -> float:
        table = self.volume.boundary_index if self.on_boundary else self.volume.index
        return float(self.values[table[tuple(site)]])


def make_box(dimension: int, side: int) -> Volume:
    if dimension not in (1, 2, 3):
        raise ValueError("dimension must be 1, 2 or 3")
    if side < 1:
        raise ValueError("side must be at least 1")
    return Volume(dimension, (0,) * dimension, (side - 1,) * dimension)


def _as_site_values(v: Volume, u) -> np.ndarray:
    if isinstance(u, RealConfig):
        if u.volume != v or u.on_boundary:
            raise ValueError("configuration is not defined on the sites of this volume")
        return u.values
    arr = np.asarray(u, dtype=float).reshape(-1)
    if arr.shape[0] != len(v):
        raise ValueError(f"expected {len(v)} values, got {arr.shape[0]}")
    return arr


def _as_boundary_values(v: Volume, bc) -> np.ndarray:
    if bc is None:
        return np.zeros(len(v.boundary))
    if isinstance(bc, RealConfig):
        if bc.volume != v or not bc.on_boundary:
            raise ValueError("boundary condition must live on the outer boundary")
        return bc.values
    if np.isscalar(bc):
        return np.full(len(v.boundary), float(bc))
    arr = np.asarray(bc, dtype=float).reshape(-1)
    if arr.shape[0] != len(v.boundary):
        raise ValueError(f"expected {len(v.boundary)} boundary values, got {arr.shape[0]}")
    return arr


@lru_cache(maxsize=64)
def precision_matrix(v: Volume, q: float) -> sp.csr_matrix:
    """Sparse ``1 - q*Laplacian`` with the Dirichlet diagonal ``1 + 2dq``."""
    if q < 0:
        raise ValueError("q must be nonnegative")
    n = len(v)
    pairs = v.neighbor_pairs
    rows = np.concatenate([np.arange(n), pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([np.arange(n), pairs[:, 1], pairs[:, 0]])
    data = np.concatenate(
        [np.full(n, 1.0 + 2 * v.dimension * q), np.full(2 * len(pairs), -q)]
    )
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


@lru_cache(maxsize=32)
def _cholesky(v: Volume, q: float):
    return scipy.linalg.cho_factor(precision_matrix(v, q).toarray(), lower=True)


def laplacian_apply(v: Volume, q: float, u) -> RealConfig:
    vals = _as_site_values(v, u)
    return RealConfig(v, precision_matrix(v, q) @ vals)


def resolvent_solve(
    v: Volume,
    q: float,
    rhs,
    tol: float = DEFAULT_TOL,
    dense_threshold: int = DENSE_THRESHOLD,
) -> RealConfig:
    """Solve ``(1 - q*Laplacian) u = rhs``.

    Dense Cholesky below ``dense_threshold`` sites, conjugate gradients above.
    Raises ``SolverError`` when the residual target is missed.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = _as_site_values(v, rhs)
    scale = float(np.max(np.abs(b))) if b.size else 0.0
    if scale == 0.0:
        return RealConfig(v, np.zeros_like(b))
    a = precision_matrix(v, q)
    if len(v) <= dense_threshold:
        u = scipy.linalg.cho_solve(_cholesky(v, q), b)
    else:
        u, info = spla.cg(a, b, rtol=tol * 0.1, atol=0.0, maxiter=10 * len(v))
        if info != 0:
            res = float(np.max(np.abs(a @ u - b))) / scale
            raise SolverError("conjugate gradients did not converge", res)
    res = float(np.max(np.abs(a @ u - b))) / scale
    if res > tol:
        raise SolverError("residual above tolerance", res)
    return RealConfig(v, u)


@lru_cache(maxsize=32)
def covariance_matrix(v: Volume, q: float) -> np.ndarray:
    """Dense ``(1 - q*Laplacian)^{-1}``; intended for desk-scale volumes."""
    n = len(v)
    out = scipy.linalg.cho_solve(_cholesky(v, q), np.eye(n))
    out = 0.5 * (out + out.T)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=32)
def resolvent_matrix(v: Volume, q: float) -> np.ndarray:
    """Dense ``(1/q - Laplacian)^{-1}`` computed from its own factorization."""
    if q <= 0:
        raise ValueError("the resolvent needs q > 0")
    n = len(v)
    op = (1.0 / q + 2 * v.dimension) * np.eye(n)
    pairs = v.neighbor_pairs
    op[pairs[:, 0], pairs[:, 1]] = -1.0
    op[pairs[:, 1], pairs[:, 0]] = -1.0
    out = scipy.linalg.cho_solve(scipy.linalg.cho_factor(op, lower=True), np.eye(n))
    out = 0.5 * (out + out.T)
    out.setflags(write=False)
    return out


def resolvent_entry(v: Volume, q: float, x: Site, y: Site) -> float:
    x, y = tuple(x), tuple(y)
    if x not in v or y not in v:
        raise ValueError("site outside the volume")
    return float(resolvent_matrix(v, q)[v.index[x], v.index[y]])


def boundary_field(v: Volume, q: float, bc) -> RealConfig:
    """``q`` times the sum of boundary values over the outer neighbours of each site."""
    vals = _as_boundary_values(v, bc)
    out = np.zeros(len(v))
    links = v.boundary_links
    np.add.at(out, links[:, 0], q * vals[links[:, 1]])
    return RealConfig(v, out)


# ---------------------------------------------------------------------------
# walk decomposition


@dataclass(frozen=True)
class WalkTerm:
    x: Site
    y: Site
    support: frozenset
    value: float
    walk_cutoff: int
    tail_bound: float


def walk_step_weight(dimension: int, q: float) -> float:
    return 1.0 / (1.0 / q + 2 * dimension)


def walk_tail_bound(dimension: int, q: float, max_len: int) -> float:
    """Total weight of all walks longer than ``max_len``, summed in closed form."""
    w = walk_step_weight(dimension, q)
    rho = 2 * dimension * w
    return w * rho ** (max_len + 1) / (1.0 - rho)


def is_connected(sites: Iterable[Site]) -> bool:
    sites = set(map(tuple, sites))
    if not sites:
        return False
    start = next(iter(sites))
    seen = {start}
    todo = deque([start])
    while todo:
        s = todo.popleft()
        for e in unit_vectors(len(s)):
            y = tuple(a + b for a, b in zip(s, e))
            if y in sites and y not in seen:
                seen.add(y)
                todo.append(y)
    return len(seen) == len(sites)


def connected_components(sites: Iterable[Site]) -> list[frozenset]:
    remaining = set(map(tuple, sites))
    comps = []
    while remaining:
        start = min(remaining)
        seen = {start}
        todo = deque([start])
        while todo:
            s = todo.popleft()
            for e in unit_vectors(len(s)):
                y = tuple(a + b for a, b in zip(s, e))
                if y in remaining and y not in seen:
                    seen.add(y)
                    todo.append(y)
        remaining -= seen
        comps.append(frozenset(seen))
    comps.sort(key=lambda c: min(c))
    return comps


def walk_table(
    sites: Sequence[Site],
    start: int,
    q: float,
    max_len: int,
    max_support: int | None = None,
) -> np.ndarray:
    """Weighted walk sums from ``sites[start]`` split by visited set.

    Entry ``[mask, j]`` is the sum over walks of length at most ``max_len`` that
    stay inside ``sites``, end at ``sites[j]`` and visit exactly the sites
    whose bits are set in ``mask``.  Each walk of length ``l`` carries the
    weight ``(1/q + 2d)^{-(l+1)}``.
    """
    n = len(sites)
    if n > 20:
        raise ValueError("walk tables are limited to 20 sites")
    dimension = len(sites[0])
    w = walk_step_weight(dimension, q)
    index = {s: i for i, s in enumerate(sites)}
    nbrs = [[] for _ in range(n)]
    for i, s in enumerate(sites):
        for e in unit_vectors(dimension):
            y = tuple(a + b for a, b in zip(s, e))
            if y in index:
                nbrs[i].append(index[y])
    masks = np.arange(1 << n, dtype=np.int64)
    with_bit = [masks[(masks >> u) & 1 == 1] for u in range(n)]
    keep = None
    if max_support is not None:
        pop = np.zeros(1 << n, dtype=np.int64)
        for u in range(n):
            pop += (masks >> u) & 1
        keep = pop <= max_support

    cur = np.zeros((1 << n, n))
    cur[1 << start, start] = w
    acc = cur.copy()
    for _ in range(max_len):
        nxt = np.zeros_like(cur)
        for u in range(n):
            if not nbrs[u]:
                continue
            idx = with_bit[u]
            src = cur[:, nbrs[u]].sum(axis=1)
            nxt[idx, u] = w * (src[idx] + src[idx ^ (1 << u)])
        if keep is not None:
            nxt[~keep] = 0.0
        cur = nxt
        acc += cur
        if not cur.any():
            break
    return acc


def walk_resolvent(
    x: Site,
    y: Site,
    C: Iterable[Site],
    q: float,
    max_len: int | None = None,
) -> WalkTerm:
    """Sum over walks from ``x`` to ``y`` whose visited set is exactly ``C``."""
    x, y = tuple(x), tuple(y)
    support = sorted(set(map(tuple, C)))
    if q <= 0:
        raise ValueError("q must be positive")
    if x not in support or y not in support:
        raise ValueError("walk endpoints must lie in C")
    if not is_connected(support):
        raise ValueError("C is not nearest-neighbour connected")
    if max_len is None:
        max_len = len(support) + 20
    if max_len < len(support) - 1:
        raise ValueError("max_len too small to visit every site of C")
    index = {s: i for i, s in enumerate(support)}
    table = walk_table(support, index[x], q, max_len)
    full = (1 << len(support)) - 1
    return WalkTerm(
        x=x,
        y=y,
        support=frozenset(support),
        value=float(table[full, index[y]]),
        walk_cutoff=max_len,
        tail_bound=walk_tail_bound(len(x), q, max_len),
    )


def connected_masks(sites: Sequence[Site], min_size: int = 1, max_size: int | None = None) -> list[int]:
    """All bitmasks over ``sites`` describing nonempty connected subsets."""
    n = len(sites)
    out = []
    for mask in range(1, 1 << n):
        size = bin(mask).count("1")
        if size < min_size or (max_size is not None and size > max_size):
            continue
        subset = [sites[i] for i in range(n) if mask >> i & 1]
        if is_connected(subset):
            out.append(mask)
    return out
