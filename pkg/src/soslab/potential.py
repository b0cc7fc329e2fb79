"""Single-site multi-well potential and the well-assignment kernel.

The potential at a site is ``V(m) = -log sum_l exp(-(m - c_l)^2 / 2 + eta_l)``
with well centres ``c_l = mstar * (l + d_l)``.  Sums over ``l`` are truncated to
a window around the nearest well; the omitted Gaussian tail is bounded in
closed form and reported next to every value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .disorder import DisorderField

DEFAULT_WINDOW = 8


@dataclass(frozen=True)
class PotentialEval:
    value: float
    tail_bar: float


@dataclass(frozen=True)
class KernelEval:
    site: tuple
    m: float
    window: int
    probs: dict
    tail_mass_bound: float
    norm: float

    def prob(self, h: int) -> float:
        return self.probs.get(int(h), 0.0)


def _nearest_well(m: float, mstar: float) -> int:
    return int(math.floor(m / mstar + 0.5))


def _well_rows(f: DisorderField, x, l0: int, window: int):
    # memoised next to the disorder values; the rows are pure functions of the key
    key = ("wells", tuple(x), l0, window)
    hit = f.cache.get(key)
    if hit is None:
        heights = np.arange(l0 - window, l0 + window + 1)
        centers = np.array([f.center(x, int(l)) for l in heights])
        etas = np.array([f.eta(x, int(l)) for l in heights])
        hit = f.cache[key] = (heights, centers, etas)
    return hit


def _log_terms(f: DisorderField, x, m: float, window: int):
    heights, centers, etas = _well_rows(f, x, _nearest_well(m, f.mstar), window)
    return heights, -0.5 * (m - centers) ** 2 + etas


def _lse(logs: np.ndarray) -> float:
    top = float(logs.max())
    return top + math.log(float(np.exp(logs - top).sum()))


def _log_tail_bound(f: DisorderField, window: int) -> float:
    """Log of an upper bound on the omitted terms, valid for any ``m``.

    A well ``k`` steps from the nearest one sits at distance at least
    ``mstar * (k - 1/2 - delta_d)`` from ``m``.
    """
    p = f.params
    a = 0.5 * p.mstar**2
    gap = window + 0.5 - p.delta_d
    ratio = math.exp(-2.0 * a * gap)
    return math.log(2.0) + p.delta_eta - a * gap * gap - math.log1p(-ratio)


def potential_eval(f: DisorderField, x, m: float, window: int = DEFAULT_WINDOW) -> PotentialEval:
    if window < 3:
        raise ValueError("window must be at least 3")
    _, logs = _log_terms(f, x, float(m), window)
    kept = _lse(logs)
    rel = math.exp(_log_tail_bound(f, window) - kept)
    return PotentialEval(-kept, math.log1p(rel))


def potential_value(f: DisorderField, x, m: float, window: int = DEFAULT_WINDOW) -> float:
    return potential_eval(f, x, m, window).value


def kernel(f: DisorderField, x, m: float, window: int = DEFAULT_WINDOW) -> KernelEval:
    """Probabilities ``T(h | m)`` of the wells near ``m``.

    ``norm`` is the plain sum of the kept Boltzmann factors.  Probabilities are
    normalised by ``norm`` plus the tail bound, so they never overshoot.
    """
    if window < 3:
        raise ValueError("window must be at least 3")
    heights, logs = _log_terms(f, x, float(m), window)
    weights = np.exp(logs)
    norm = float(weights.sum())
    tail = math.exp(_log_tail_bound(f, window))
    total = norm + tail
    probs = {int(h): float(w / total) for h, w in zip(heights, weights)}
    return KernelEval(tuple(x), float(m), window, probs, tail / total, norm)


def kernel_prob(f: DisorderField, x, h: int, m: float, window: int = DEFAULT_WINDOW) -> float:
    return kernel(f, x, m, window).prob(h)


def radius_bound(mstar: float, delta_d: float, delta_eta: float) -> float:
    """A priori distance between the kernel maximiser and ``mstar * h``."""
    first = mstar * (4 * delta_d + delta_d**2) / (4 * (1 - delta_d))
    second = (math.log((1 + 2 * delta_d) / (1 - 2 * delta_d)) + 2 * delta_eta) / (
        2 * mstar * (1 - delta_d)
    )
    return first + second


def _ratio_slope_root(centers: np.ndarray, etas: np.ndarray, h_pos: int, lo: float, hi: float, tol: float) -> float:
    """Minimiser of ``sum_{l != h} f_l`` where ``log f_l`` is affine in ``m``.

    The derivative splits into wells above and below ``h``; its sign is the sign
    of ``LSE(up) - LSE(down)``, which is increasing in ``m`` and overflow-free.
    """
    ch, eh = centers[h_pos], etas[h_pos]
    slope = centers - ch
    offset = -0.5 * (centers**2 - ch**2) + etas - eh
    up = slope > 0
    down = slope < 0

    def g(m):
        lu = logsumexp(slope[up] * m + offset[up], b=slope[up])
        ld = logsumexp(slope[down] * m + offset[down], b=-slope[down])
        return lu - ld

    width = hi - lo
    for _ in range(60):
        if g(lo) < 0 < g(hi):
            break
        lo -= width
        hi += width
        width *= 2
    else:
        raise RuntimeError("could not bracket the kernel maximiser")
    return float(optimize.brentq(g, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500))


def kernel_maximizer(f: DisorderField, x, h: int, window: int = DEFAULT_WINDOW, tol: float = 1e-12) -> float:
    """Unique maximiser of ``m -> T(h | m)``.

    ``window`` limits the competing wells to ``|l - h| <= window``; with
    ``window=1`` only the two neighbouring wells compete.
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    heights = np.arange(h - window, h + window + 1)
    centers = np.array([f.center(x, int(l)) for l in heights])
    etas = np.array([f.eta(x, int(l)) for l in heights])
    ch = centers[window]
    return _ratio_slope_root(centers, etas, window, ch - f.mstar, ch + f.mstar, tol)


def pair_maximizer(mstar: float, d: dict, eta: dict, h: int = 1) -> float:
    """Closed-form minimiser of ``f_h + f_{-h}`` for wells measured from height 0.

    ``d`` and ``eta`` map the heights ``-h, 0, h`` to the shifts and depths.
    """
    c = {k: mstar * (k + d[k]) for k in (-h, 0, h)}
    spread = c[h] - c[-h]
    log_term = math.log((c[0] - c[-h]) / (c[h] - c[0]))
    return 0.5 * (c[h] + c[-h]) + (eta[-h] - eta[h] + log_term) / spread


def sandwich_audit(f: DisorderField, x, h: int, m_grid, window: int = DEFAULT_WINDOW) -> tuple[float, float]:
    """Extremes of ``T(h|m) / exp(-(m - c_h)^2 / 2)`` over the grid."""
    grid = np.asarray(m_grid, dtype=float)
    mstar = f.mstar
    if grid.min() > mstar * h - 3 * mstar or grid.max() < mstar * h + 3 * mstar:
        raise ValueError("grid must cover mstar*h +/- 3*mstar")
    # T(h|m) exp((m - c_h)^2 / 2) = exp(eta_h) / Norm(m), which stays finite
    # where both factors on the left under- or overflow
    depth = math.exp(f.eta(x, h))
    ratios = np.array([depth / (k.norm / (1.0 - k.tail_mass_bound)) for k in (kernel(f, x, m, window) for m in grid)])
    return float(ratios.min()), float(ratios.max())
