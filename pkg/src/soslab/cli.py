"""Command line front end: configuration, audits and data emission.

Exit codes: 0 success, 1 audit failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import contours as ct
from . import gibbs, heights, lattice, potential
from .disorder import DisorderField, DisorderParams, audit_conditions

log = logging.getLogger("soslab")

EXIT_OK, EXIT_AUDIT, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    dimension: int = 2
    side: int = 2
    q: float = 0.1
    mstar: float = 10.0
    disorder: DisorderParams = field(default_factory=DisorderParams)
    seeds: tuple = (0,)
    mcmc: heights.MCMCParams = field(default_factory=lambda: heights.MCMCParams(sweeps=2000, burn_in=200))
    window: int = 8
    support_cutoff: int = 0  # 0 means the full volume
    polymer_size: int = 0  # 0 means no cutoff
    hmax: int = 1
    samples_per_seed: int = 20
    audit_samples: int = 200_000
    cube_patches: int = 200
    output: str = "out"

    def validate(self) -> None:
        if self.dimension not in (1, 2, 3):
            raise ConfigError("dimension must be 1, 2 or 3")
        if self.side < 1:
            raise ConfigError("side must be positive")
        if not 0 < self.q < 1:
            raise ConfigError("q must lie in (0, 1)")
        if self.mstar <= 0:
            raise ConfigError("mstar must be positive")
        if abs(self.disorder.mstar - self.mstar) > 0:
            raise ConfigError("disorder mstar must match the model")
        if self.window < 3:
            raise ConfigError("window must be at least 3")
        if self.hmax < 0 or self.samples_per_seed < 1:
            raise ConfigError("hmax must be >= 0 and samples_per_seed >= 1")
        if self.audit_samples < 10**4:
            raise ConfigError("audit_samples must be at least 10^4")
        if self.support_cutoff < 0 or self.polymer_size < 0 or self.cube_patches < 0:
            raise ConfigError("cutoffs must be nonnegative")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def header(self) -> list[str]:
        return [f"soslab {__version__}", "config " + json.dumps(self.as_dict(), sort_keys=True)]


def _get(sec, key, conv, default):
    if sec is None or key not in sec:
        return default
    raw = sec[key]
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def load_config(path: str | None) -> RunConfig:
    base = RunConfig()
    if path is None:
        return base
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    sec = lambda name: cp[name] if cp.has_section(name) else None
    model, dis, run, mc, cut = sec("model"), sec("disorder"), sec("run"), sec("mcmc"), sec("cutoffs")
    mstar = _get(model, "mstar", float, base.mstar)
    try:
        disorder = DisorderParams(
            sigma_eta=_get(dis, "sigma_eta", float, base.disorder.sigma_eta),
            sigma_d=_get(dis, "sigma_d", float, base.disorder.sigma_d),
            delta_eta=_get(dis, "delta_eta", float, base.disorder.delta_eta),
            delta_d=_get(dis, "delta_d", float, base.disorder.delta_d),
            mstar=mstar if mstar > 0 else 1.0,
            seed=0,
        )
        mcmc = heights.MCMCParams(
            sweeps=_get(mc, "sweeps", int, base.mcmc.sweeps),
            burn_in=_get(mc, "burn_in", int, base.mcmc.burn_in),
            window=_get(mc, "window", int, base.mcmc.window),
            shift_every=_get(mc, "shift_every", int, base.mcmc.shift_every),
            thin=_get(mc, "thin", int, base.mcmc.thin),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    seeds = _get(run, "seeds", lambda s: tuple(int(x) for x in s.replace(",", " ").split()), base.seeds)
    cfg = RunConfig(
        dimension=_get(model, "dimension", int, base.dimension),
        side=_get(model, "side", int, base.side),
        q=_get(model, "q", float, base.q),
        mstar=mstar,
        disorder=disorder,
        seeds=seeds,
        mcmc=mcmc,
        window=_get(cut, "window", int, base.window),
        support_cutoff=_get(cut, "support_cutoff", int, base.support_cutoff),
        polymer_size=_get(cut, "polymer_size", int, base.polymer_size),
        hmax=_get(cut, "hmax", int, base.hmax),
        samples_per_seed=_get(run, "samples_per_seed", int, base.samples_per_seed),
        audit_samples=_get(run, "audit_samples", int, base.audit_samples),
        cube_patches=_get(run, "cube_patches", int, base.cube_patches),
        output=_get(run, "output", str, base.output),
    )
    cfg.validate()
    return cfg


def _field(cfg: RunConfig, seed: int) -> DisorderField:
    return DisorderField(replace(cfg.disorder, seed=seed))


def _volume(cfg: RunConfig) -> lattice.Volume:
    return lattice.make_box(cfg.dimension, cfg.side)


def _write_json(path: Path, cfg: RunConfig, payload: dict) -> None:
    doc = {"version": f"soslab {__version__}", "config": cfg.as_dict(), **payload}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def _csv_header(fh, cfg: RunConfig, schema: str) -> None:
    for line in cfg.header():
        fh.write(f"# {line}\n")
    fh.write(f"# columns: {schema}\n")


# ---------------------------------------------------------------------------
# audits


def _audit_normalization(cfg: RunConfig, seed: int) -> dict:
    f = _field(cfg, seed)
    worst = 0.0
    for draw in range(50):
        x = (draw,)
        for m in np.linspace(-1.5 * cfg.mstar, 1.5 * cfg.mstar, 200):
            ke = potential.kernel(f, x, float(m), cfg.window)
            pe = potential.potential_eval(f, x, float(m), cfg.window)
            bar = pe.tail_bar + ke.tail_mass_bound
            err = abs(ke.norm * math.exp(pe.value) - 1.0) - bar
            worst = max(worst, err)
    return {"passed": worst <= 1e-10, "margin": 1e-10 - worst}


def _audit_resolvent(cfg: RunConfig) -> dict:
    worst = 0.0
    for d, side in ((1, 4), (2, 2)):
        v = lattice.make_box(d, side)
        R = lattice.resolvent_matrix(v, cfg.q)
        sites = list(v.sites)
        n = len(sites)
        tail = n * lattice.walk_tail_bound(d, cfg.q, 30)
        for i in range(n):
            table = lattice.walk_table(sites, i, cfg.q, 30)
            err = np.max(np.abs(table.sum(axis=0) - R[i])) - tail
            worst = max(worst, err)
        cov = lattice.covariance_matrix(v, cfg.q)
        worst = max(worst, float(np.max(np.abs(R - cfg.q * cov))) - 1e-10 * float(np.max(R)))
    return {"passed": worst <= 1e-12, "margin": -worst}


def _audit_energy(cfg: RunConfig, seed: int) -> dict:
    v = lattice.make_box(2, 3)
    f = _field(cfg, seed)
    cs = heights.couplings(v, cfg.q, cfg.mstar)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        h = rng.integers(-2, 3, size=len(v))
        e1 = heights.effective_energy(v, f, cfg.q, cfg.mstar, h)
        m = gibbs.gaussian_center(v, f, cfg.q, None, h)
        e2 = gibbs.joint_energy(v, f, cfg.q, None, h, m)
        e3 = heights.ferromagnetic_energy(cs, f, h)
        scale = max(1.0, abs(e1))
        worst = max(worst, abs(e1 - e2) / scale, abs(e1 - e3) / scale)
    return {"passed": worst <= 1e-8, "margin": 1e-8 - worst}


def _audit_factorization(cfg: RunConfig, seed: int) -> dict:
    v = lattice.make_box(2, 2)
    f = _field(cfg, seed)
    table = heights.nu_exact(v, f, cfg.q, cfg.mstar, 2)
    quad = gibbs.quadrature_nu(v, f, cfg.q, 2, window=cfg.window)
    tv = 0.5 * float(np.abs(table.probs - quad.probs).sum())
    return {"passed": tv <= 1e-6, "margin": 1e-6 - tv, "total_variation": tv}


def _audit_representation(cfg: RunConfig, seed: int) -> dict:
    out = {}
    ok = True
    for d, side in ((2, 2), (1, 5)):
        v = lattice.make_box(d, side)
        f = _field(cfg, seed)
        _, _, audit = ct.assemble_representation(v, f, cfg.q, cfg.mstar, 1)
        out[f"{d}d_{side}"] = audit.as_dict()
        ok &= audit.passed()
    return {"passed": ok, "details": out}


def _audit_peierls(cfg: RunConfig, seed: int) -> dict:
    v = lattice.make_box(2, 2)
    f = _field(cfg, seed)
    cs = heights.couplings(v, cfg.q, cfg.mstar)
    pc = ct.peierls_constants(2, cfg.q, cfg.mstar, cfg.disorder.delta_d)
    res = ct.lt_peierls_audit(v, f, cs, pc, 1)
    return {"passed": res.violations == 0, "margin": res.worst_margin, **res.as_dict()}


def random_cube_patch(rng: np.random.Generator, pc: ct.PeierlsConstants, side: int = 12) -> dict:
    """Random heights on a square patch with a few tall spikes."""
    d = pc.dimension
    patch = {}
    for s in np.ndindex(*(side,) * d):
        patch[tuple(int(c) for c in s)] = 0
    top = max(2.0, float(pc.threshold(3 * pc.range_r)))
    for _ in range(int(rng.integers(1, 6))):
        s = tuple(int(c) for c in rng.integers(0, side, size=d))
        patch[s] = int(rng.choice([-1, 1])) * int(rng.integers(1, int(top) + 2))
    for _ in range(int(rng.integers(0, 3))):
        lo = rng.integers(0, side, size=d)
        ext = rng.integers(1, 4, size=d)
        level = int(rng.integers(-3, 4))
        for off in np.ndindex(*ext):
            s = tuple(int(a + b) for a, b in zip(lo, off))
            if s in patch:
                patch[s] = level
    return patch


def _audit_cube_volume(cfg: RunConfig, seed: int) -> dict:
    pc = ct.peierls_constants(2, cfg.q, cfg.mstar, cfg.disorder.delta_d)
    rng = np.random.default_rng(seed + 31)
    worst = math.inf
    bad = 0
    comps = 0
    for _ in range(cfg.cube_patches):
        rep = ct.cube_volume_audit(random_cube_patch(rng, pc), pc)
        comps += rep.n_components
        bad += rep.violations
        if rep.n_components:
            worst = min(worst, rep.margin)
    return {"passed": bad == 0, "margin": worst if comps else None, "components": comps, "violations": bad}


def _audit_gauss(cfg: RunConfig, seed: int) -> dict:
    rng = np.random.default_rng(seed + 24)
    a = np.array([0.3, -0.2])
    sigma = np.array([[1.0, 0.3], [0.3, 0.5]])
    lam = 0.7
    S = float(np.linalg.norm(a) + lam * np.trace(sigma))
    moment, tail = gibbs.gauss_exp_moment_bound(a, float(np.trace(sigma)), lam, S)
    coincide = abs(moment - tail) / moment
    draws = rng.multivariate_normal(a, sigma, size=100_000)
    norms = np.linalg.norm(draws, axis=1)
    emp_m = float(np.mean(np.exp(lam * norms)))
    S2 = S + 1.5
    _, tail2 = gibbs.gauss_exp_moment_bound(a, float(np.trace(sigma)), lam, S2)
    emp_t = float(np.mean(np.exp(lam * norms) * (norms >= S2)))
    ok = coincide <= 1e-12 and emp_m <= moment and emp_t <= tail2
    return {"passed": bool(ok), "coincidence_error": coincide, "moment_margin": moment - emp_m, "tail_margin": tail2 - emp_t}


def _audit_disorder(cfg: RunConfig, seed: int) -> dict:
    rep = audit_conditions(replace(cfg.disorder, seed=seed), cfg.audit_samples)
    return {"passed": rep.passed, **rep.as_dict()}


AUDITS = [
    ("normalization", lambda c, s: _audit_normalization(c, s)),
    ("resolvent", lambda c, s: _audit_resolvent(c)),
    ("effective_energy", _audit_energy),
    ("factorization", _audit_factorization),
    ("representation", _audit_representation),
    ("peierls_lt", _audit_peierls),
    ("cube_volume", _audit_cube_volume),
    ("gaussian_bounds", _audit_gauss),
    ("disorder", _audit_disorder),
]


def cmd_verify(cfg: RunConfig, out: Path, seed_offset: int = 0) -> int:
    seed = cfg.seeds[0] + seed_offset
    results = {}
    first_fail = None
    for name, fn in AUDITS:
        t0 = time.perf_counter()
        try:
            res = fn(cfg, seed)
        except Exception as exc:  # an exception inside an audit is a failure, not a crash
            res = {"passed": False, "error": f"{type(exc).__name__}: {exc}"}
        log.info("%s: %s (%.1fs)", name, "pass" if res["passed"] else "FAIL", time.perf_counter() - t0)
        results[name] = res
        if not res["passed"] and first_fail is None:
            first_fail = name
    _write_json(out / "verify.json", cfg, {"seed": seed, "audits": results, "passed": first_fail is None, "first_failure": first_fail})
    if first_fail is not None:
        print(f"audit failed: {first_fail}", file=sys.stderr)
        return EXIT_AUDIT
    print("all audits passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sampling


def _sample_one(cfg: RunConfig, seed: int, out: Path) -> str:
    v = _volume(cfg)
    f = _field(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    mc = replace(cfg.mcmc, seed=seed)
    res = heights.nu_mcmc(v, f, cfg.q, cfg.mstar, rng, mc)
    picks = np.linspace(0, len(res.samples) - 1, cfg.samples_per_seed).astype(int)
    states = []
    for k in picks:
        h = heights.HeightConfig(v, res.samples[k])
        spec = gibbs.GaussianSpec(v, gibbs.gaussian_center(v, f, cfg.q, None, h), cfg.q)
        states.append(gibbs.JointState(h, gibbs.sample_conditional(spec, rng)))
    path = out / f"samples_seed{seed}.csv"
    gibbs.write_samples(path, states, cfg.header() + ["columns: sample, x_1..x_d, h, m"])
    x0 = tuple(s // 2 for s in (cfg.side,) * cfg.dimension)
    rep = heights.roughness(v, f, cfg.q, cfg.mstar, res.samples, x0, res.autocorr_time)
    hist = {int(k): int(c) for k, c in zip(*np.unique(res.samples, return_counts=True))}
    _write_json(
        out / f"roughness_seed{seed}.json",
        cfg,
        {
            "seed": seed,
            "x0": list(x0),
            "roughness": rep.as_dict(),
            "local_acceptance": res.local_acceptance,
            "shift_acceptance": None if math.isnan(res.shift_acceptance) else res.shift_acceptance,
            "autocorr_time": res.autocorr_time,
            "height_histogram": hist,
        },
    )
    return path.name


def _pool_map(fn, cfg, seeds, out, threads):
    if threads <= 1 or len(seeds) == 1:
        return [fn(cfg, s, out) for s in seeds]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        futures = [ex.submit(fn, cfg, s, out) for s in seeds]
        return [fut.result() for fut in futures]


def cmd_sample(cfg: RunConfig, out: Path, threads: int = 1, seed_offset: int = 0) -> int:
    seeds = [s + seed_offset for s in cfg.seeds]
    names = _pool_map(_sample_one, cfg, seeds, out, threads)
    print("\n".join(names))
    return EXIT_OK


def cmd_nu(cfg: RunConfig, out: Path, seed_offset: int = 0) -> int:
    v = _volume(cfg)
    for seed in (s + seed_offset for s in cfg.seeds):
        f = _field(cfg, seed)
        table = heights.nu_exact(v, f, cfg.q, cfg.mstar, cfg.hmax)
        path = out / f"nu_seed{seed}.csv"
        with open(path, "w", newline="") as fh:
            _csv_header(fh, cfg, "h_<site>..., prob, energy")
            fh.write(f"# omitted_mass_bound {table.omitted_mass_bound!r}\n")
            w = csv.writer(fh)
            w.writerow(["h_" + "_".join(map(str, s)) for s in v.sites] + ["prob", "energy"])
            for h, p, e in zip(table.configs, table.probs, table.energies):
                w.writerow([*map(int, h), repr(float(p)), repr(float(e))])
        print(path.name)
    return EXIT_OK


def _contour_one(cfg: RunConfig, seed: int, out: Path) -> str:
    v = _volume(cfg)
    f = _field(cfg, seed)
    pc = ct.peierls_constants(cfg.dimension, cfg.q, cfg.mstar, cfg.disorder.delta_d)
    rng = np.random.default_rng([seed, 2])
    res = heights.nu_mcmc(v, f, cfg.q, cfg.mstar, rng, replace(cfg.mcmc, seed=seed))
    cs = heights.couplings(v, cfg.q, cfg.mstar)
    sizes: dict = {}
    energies: dict = {}
    rows = []
    for h in res.samples:
        c = ct.lt_support(v, h, pc)
        for comp in ct.components(c):
            es = ct.surface_energy(comp)
            sizes[len(comp.support)] = sizes.get(len(comp.support), 0) + 1
            energies[es] = energies.get(es, 0) + 1
            rho = ct.lt_activity(v, f, cs, comp, pc)
            bound = math.exp(-pc.beta * es - pc.tau1 * len(comp.support))
            rows.append((len(comp.support), es, rho, bound))
    path = out / f"contours_seed{seed}.csv"
    ct.write_contour_table(path, rows, cfg.header() + ["columns: support_size, E_s, rho0 (LT activity), bound"])
    payload = {
        "seed": seed,
        "component_sizes": {str(k): sizes[k] for k in sorted(sizes)},
        "surface_energies": {str(k): energies[k] for k in sorted(energies)},
        "min_log_margin": min((math.log(b) - math.log(r) for _, _, r, b in rows if r > 0), default=None),
    }
    if len(v) <= 12 and (2 * cfg.hmax + 1) ** len(v) <= 10**4:
        _, table, audit = ct.assemble_representation(
            v, f, cfg.q, cfg.mstar, cfg.hmax, cfg.polymer_size or None
        )
        rep_rows = []
        for (support, hv), val in sorted(table.items()):
            c = ct.Contour(frozenset(support), heights.HeightConfig(v, np.array(hv)))
            es = ct.surface_energy(c)
            rep_rows.append((len(support), es, val, math.exp(-pc.beta * es - pc.tilde_beta * len(support))))
        ct.write_contour_table(out / f"representation_seed{seed}.csv", rep_rows, cfg.header() + ["columns: support_size, E_s, rho0, bound"])
        payload["representation"] = audit.as_dict()
    _write_json(out / f"contours_seed{seed}.json", cfg, payload)
    return path.name


def cmd_contours(cfg: RunConfig, out: Path, threads: int = 1, seed_offset: int = 0) -> int:
    seeds = [s + seed_offset for s in cfg.seeds]
    print("\n".join(_pool_map(_contour_one, cfg, seeds, out, threads)))
    return EXIT_OK


def cmd_potential_dump(cfg: RunConfig, out: Path, seed_offset: int = 0, points: int = 401) -> int:
    seed = cfg.seeds[0] + seed_offset
    f = _field(cfg, seed)
    x = (0,) * cfg.dimension
    path = out / f"potential_seed{seed}.csv"
    with open(path, "w", newline="") as fh:
        _csv_header(fh, cfg, "m, V, T(h|m) for h=-3..3")
        w = csv.writer(fh)
        w.writerow(["m", "V"] + [f"T_{h}" for h in range(-3, 4)])
        for m in np.linspace(-3.5 * cfg.mstar, 3.5 * cfg.mstar, points):
            ke = potential.kernel(f, x, float(m), cfg.window)
            w.writerow([repr(float(m)), repr(potential.potential_value(f, x, float(m), cfg.window))] + [repr(ke.prob(h)) for h in range(-3, 4)])
    print(path.name)
    return EXIT_OK


def cmd_disorder_audit(cfg: RunConfig, out: Path, seed_offset: int = 0) -> int:
    seed = cfg.seeds[0] + seed_offset
    res = _audit_disorder(cfg, seed)
    _write_json(out / f"disorder_audit_seed{seed}.json", cfg, res)
    print("disorder audit:", "pass" if res["passed"] else "FAIL")
    return EXIT_OK if res["passed"] else EXIT_AUDIT


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (INI sections: model, disorder, run, mcmc, cutoffs)")
    common.add_argument("--out", help="output directory (overrides run.output)")
    common.add_argument("--threads", type=int, default=1, help="worker processes over seeds")
    common.add_argument("--seed-offset", type=int, default=0, help="added to every configured seed")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="soslab", description="Disordered SOS interface laboratory", parents=[common])
    p.add_argument("--version", action="version", version=f"soslab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("verify", parents=[common], help="run every audit and write verify.json")
    sub.add_parser("sample", parents=[common], help="two-stage samples and roughness reports")
    sub.add_parser("nu", parents=[common], help="exact integer-height law table")
    sub.add_parser("contours", parents=[common], help="contour statistics and representation table")
    pot = sub.add_parser("potential", help="single-site potential tools")
    pot_sub = pot.add_subparsers(dest="action", required=True)
    pot_sub.add_parser("dump", parents=[common], help="CSV of V(m) and T(h|m)")
    dis = sub.add_parser("disorder", help="disorder law tools")
    dis_sub = dis.add_subparsers(dest="action", required=True)
    dis_sub.add_parser("audit", parents=[common], help="empirical check of the disorder conditions")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "verify":
        return cmd_verify(cfg, out, args.seed_offset)
    if cmd == "sample":
        return cmd_sample(cfg, out, args.threads, args.seed_offset)
    if cmd == "nu":
        return cmd_nu(cfg, out, args.seed_offset)
    if cmd == "contours":
        return cmd_contours(cfg, out, args.threads, args.seed_offset)
    if cmd == "potential":
        return cmd_potential_dump(cfg, out, args.seed_offset)
    if cmd == "disorder":
        return cmd_disorder_audit(cfg, out, args.seed_offset)
    parser.error(f"unknown command {cmd}")
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
