"""Quenched disorder: random well depths ``eta`` and well shifts ``d``.

Every value is a pure function of ``(seed, site, height, channel)``.  A keyed
BLAKE2b hash turns the key into a uniform number, which is pushed through the
inverse CDF of a centred truncated normal.  Nothing depends on query order, so
the height lattice can be explored lazily in any direction.
"""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import special, stats

ETA = 0
SHIFT = 1
_CHANNEL_NAMES = {ETA: "eta", SHIFT: "d"}


@dataclass(frozen=True)
class DisorderParams:
    sigma_eta: float = 0.05
    sigma_d: float = 0.02
    delta_eta: float = 0.15
    delta_d: float = 0.05
    mstar: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_eta", "sigma_d", "delta_eta", "delta_d"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.delta_d > 0.25:
            raise ValueError("delta_d must not exceed 1/4")
        if self.mstar <= 0:
            raise ValueError("mstar must be positive")
        if not -(2**63) <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def eta_scale(self) -> float:
        return self.sigma_eta

    @property
    def shift_scale(self) -> float:
        """Scale of the normal underlying ``d``.

        The shift tail condition reads ``P[d^2 >= t] <= exp(-t^2 / 2 sigma_d^2)``.
        A truncated normal of scale ``s`` has ``P[d^2 >= t] <= exp(-t / 2 s^2)``,
        so the condition holds on ``t <= delta_d^2`` once
        ``s^2 <= sigma_d^2 / delta_d^2``.  Taking half of that keeps the exponent
        a factor two away from the limit at ``t = delta_d^2``.
        """
        if self.sigma_d == 0 or self.delta_d == 0:
            return 0.0
        return self.sigma_d / (math.sqrt(2.0) * self.delta_d)

    @classmethod
    def zero(cls, mstar: float = 10.0, seed: int = 0) -> "DisorderParams":
        return cls(0.0, 0.0, 0.0, 0.0, mstar, seed)


def _seed_key(seed: int) -> bytes:
    return (int(seed) % 2**64).to_bytes(8, "little")


def keyed_uniform(seed: int, site: Sequence[int], height: int, channel: int) -> float:
    """Uniform number in (0, 1) attached to one disorder key."""
    payload = struct.pack(f"<B{len(site) + 1}q", channel, int(height), *map(int, site))
    raw = hashlib.blake2b(payload, digest_size=8, key=_seed_key(seed)).digest()
    bits = int.from_bytes(raw, "little") >> 11
    return (bits + 0.5) * 2.0**-53


def truncated_normal_ppf(u, scale: float, bound: float):
    """Inverse CDF of a centred normal of ``scale`` truncated to ``[-bound, bound]``."""
    u = np.asarray(u, dtype=float)
    if scale == 0.0 or bound == 0.0:
        return np.zeros_like(u)
    a = bound / scale
    lo = special.ndtr(-a)
    x = scale * special.ndtri(lo + u * (1.0 - 2.0 * lo))
    return np.clip(x, -bound, bound)


def truncated_normal_second_moment(scale: float, bound: float) -> float:
    if scale == 0.0 or bound == 0.0:
        return 0.0
    a = bound / scale
    return float(stats.truncnorm(-a, a, scale=scale).var())


@dataclass
class DisorderField:
    """Lazily evaluated, memoised disorder realisation."""

    params: DisorderParams
    cache: dict = field(default_factory=dict, repr=False)

    def _value(self, site, height: int, channel: int) -> float:
        key = (tuple(int(c) for c in site), int(height), channel)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        p = self.params
        if channel == ETA:
            scale, bound = p.eta_scale, p.delta_eta
        else:
            scale, bound = p.shift_scale, p.delta_d
        if scale == 0.0 or bound == 0.0:
            val = 0.0
        else:
            u = keyed_uniform(p.seed, key[0], key[1], channel)
            val = float(truncated_normal_ppf(u, scale, bound))
        self.cache[key] = val
        return val

    def eta(self, site, height: int) -> float:
        return self._value(site, height, ETA)

    def dshift(self, site, height: int) -> float:
        return self._value(site, height, SHIFT)

    def center(self, site, height: int) -> float:
        return self.params.mstar * (height + self.dshift(site, height))

    @property
    def mstar(self) -> float:
        return self.params.mstar

    @property
    def shift_second_moment(self) -> float:
        """Closed-form ``E[d^2]`` of the shift law."""
        return truncated_normal_second_moment(self.params.shift_scale, self.params.delta_d)

    def centers(self, sites: Sequence, heights: Sequence[int]) -> np.ndarray:
        return np.array([self.center(s, h) for s, h in zip(sites, heights)])

    def etas(self, sites: Sequence, heights: Sequence[int]) -> np.ndarray:
        return np.array([self.eta(s, h) for s, h in zip(sites, heights)])

    def shifts(self, sites: Sequence, heights: Sequence[int]) -> np.ndarray:
        return np.array([self.dshift(s, h) for s, h in zip(sites, heights)])


def eta(f: DisorderField, x, h: int) -> float:
    return f.eta(x, h)


def dshift(f: DisorderField, x, h: int) -> float:
    return f.dshift(x, h)


def center(f: DisorderField, x, h: int) -> float:
    return f.center(x, h)


# ---------------------------------------------------------------------------
# snapshots


def export_table(f: DisorderField, sites: Iterable, heights: Iterable[int], path) -> None:
    """Write ``x_1 .. x_d, h, eta, d`` rows for every (site, height) pair."""
    sites = [tuple(s) for s in sites]
    heights = list(heights)
    dim = len(sites[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{i + 1}" for i in range(dim)] + ["h", "eta", "d"])
        for s in sites:
            for h in heights:
                w.writerow([*s, h, repr(f.eta(s, h)), repr(f.dshift(s, h))])


def import_table(path, params: DisorderParams) -> DisorderField:
    """Field whose cache is preloaded from a snapshot; unlisted keys fall back to the generator."""
    f = DisorderField(params)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 3
        for row in reader:
            site = tuple(int(c) for c in row[:dim])
            h = int(row[dim])
            eta_v, d_v = float(row[dim + 1]), float(row[dim + 2])
            if abs(eta_v) > params.delta_eta or abs(d_v) > params.delta_d:
                raise ValueError(f"snapshot value out of bounds at {site}, h={h}")
            f.cache[(site, h, ETA)] = eta_v
            f.cache[(site, h, SHIFT)] = d_v
    return f


# ---------------------------------------------------------------------------
# law audit


@dataclass
class TailCheck:
    t: float
    empirical: float
    bound: float

    @property
    def excess(self) -> float:
        return self.empirical - self.bound


@dataclass
class AuditReport:
    n_samples: int
    eta_hard_violations: int
    shift_hard_violations: int
    eta_tail: list[TailCheck]
    shift_tail: list[TailCheck]
    shift_scale: float
    shift_margin_at_edge: float
    eta_mean: float
    shift_mean: float
    shift_second_moment: float
    shift_second_moment_empirical: float

    @property
    def eta_tail_flagged(self) -> list[TailCheck]:
        return [c for c in self.eta_tail if c.excess > 0]

    @property
    def shift_tail_flagged(self) -> list[TailCheck]:
        return [c for c in self.shift_tail if c.excess > 0]

    @staticmethod
    def _worst(checks: list[TailCheck]):
        if not checks:
            return None
        c = max(checks, key=lambda c: c.excess)
        return {"t": c.t, "empirical": c.empirical, "bound": c.bound, "excess": c.excess}

    @property
    def worst_eta(self):
        return self._worst(self.eta_tail)

    @property
    def worst_shift(self):
        return self._worst(self.shift_tail)

    @property
    def passed(self) -> bool:
        return (
            self.eta_hard_violations == 0
            and self.shift_hard_violations == 0
            and not self.eta_tail_flagged
            and not self.shift_tail_flagged
        )

    def as_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "eta_hard_violations": self.eta_hard_violations,
            "shift_hard_violations": self.shift_hard_violations,
            "eta_tail_flagged": len(self.eta_tail_flagged),
            "shift_tail_flagged": len(self.shift_tail_flagged),
            "worst_eta": self.worst_eta,
            "worst_shift": self.worst_shift,
            "shift_scale": self.shift_scale,
            "shift_margin_at_edge": self.shift_margin_at_edge,
            "eta_mean": self.eta_mean,
            "shift_mean": self.shift_mean,
            "shift_second_moment": self.shift_second_moment,
            "shift_second_moment_empirical": self.shift_second_moment_empirical,
            "passed": self.passed,
        }


def draw_samples(params: DisorderParams, n: int, channel: int, scale: float | None = None) -> np.ndarray:
    """``n`` independent draws of one channel at keys ``((i,), 0)``."""
    if channel == ETA:
        default, bound = params.eta_scale, params.delta_eta
    else:
        default, bound = params.shift_scale, params.delta_d
    scale = default if scale is None else scale
    if scale == 0.0 or bound == 0.0:
        return np.zeros(n)
    u = np.fromiter(
        (keyed_uniform(params.seed, (i,), 0, channel) for i in range(n)), dtype=float, count=n
    )
    return truncated_normal_ppf(u, scale, bound)


def audit_conditions(
    params: DisorderParams,
    n_samples: int = 10**6,
    eta_scale: float | None = None,
    n_grid: int = 12,
) -> AuditReport:
    """Empirical check of the hard bounds and the two tail conditions.

    ``eta_scale`` overrides the depth generator's scale; a value above
    ``sigma_eta`` is the negative control that the audit must flag.
    """
    if n_samples < 10**4:
        raise ValueError("the audit needs at least 10^4 samples")
    etas = draw_samples(params, n_samples, ETA, eta_scale)
    shifts = draw_samples(params, n_samples, SHIFT)
    # the generator clips, so hard violations can only come from a broken law
    eta_hard = int(np.sum(np.abs(etas) > params.delta_eta))
    shift_hard = int(np.sum(np.abs(shifts) > params.delta_d))

    eta_checks = []
    if params.sigma_eta > 0 and params.delta_eta > 0:
        top = min(params.delta_eta, 4.0 * params.sigma_eta)
        abs_eta = np.sort(np.abs(etas))
        for t in np.linspace(0.5 * params.sigma_eta, top, n_grid):
            emp = 1.0 - np.searchsorted(abs_eta, t, side="left") / n_samples
            eta_checks.append(TailCheck(float(t), float(emp), math.exp(-t * t / (2 * params.sigma_eta**2))))

    shift_checks = []
    margin = math.inf
    s = params.shift_scale
    if s > 0:
        d2 = np.sort(shifts**2)
        edge = params.delta_d**2
        for t in np.linspace(0.05 * edge, edge, n_grid):
            emp = 1.0 - np.searchsorted(d2, t, side="left") / n_samples
            shift_checks.append(TailCheck(float(t), float(emp), math.exp(-t * t / (2 * params.sigma_d**2))))
        margin = (edge / (2 * s * s)) / (edge * edge / (2 * params.sigma_d**2))

    return AuditReport(
        n_samples=n_samples,
        eta_hard_violations=eta_hard,
        shift_hard_violations=shift_hard,
        eta_tail=eta_checks,
        shift_tail=shift_checks,
        shift_scale=s,
        shift_margin_at_edge=margin,
        eta_mean=float(etas.mean()),
        shift_mean=float(shifts.mean()),
        shift_second_moment=truncated_normal_second_moment(s, params.delta_d),
        shift_second_moment_empirical=float(np.mean(shifts**2)),
    )
