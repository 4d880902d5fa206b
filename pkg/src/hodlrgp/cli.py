"""Command-line front end: ``hodlrgp {fit,fit-tensor,validate,bench}``.

Settings come from an optional flat TOML file (``--config``) and are
overridden by command-line flags.  Every artifact except ``timings.json``
and the bench tables is a deterministic function of (config, seed).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .hodlr import DEFAULT_LEAF
from .kernels import NUGGET_REL, collapse_duplicates, read_csv
from .oracle import InadmissibleError, ValidationConfig, validation_rows
from .sampler import GridPrecomp, PriorSpec, default_rho_grid, run_gibbs
from .tensorgp import TENSOR_NUGGET_REL, run_tensor_gibbs

MODES = ("fit", "fit-tensor", "validate", "bench")
DEFAULT_SIZES = {"validate": (50, 100, 200),
                 "bench": tuple(2 ** k for k in range(10, 14))}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "fit"
    data: str | None = None
    out: str = "out"
    eps: float = 1e-10
    B: int = DEFAULT_LEAF
    a1: float = 1.0
    b1: float = 1.0
    a2: float = 1.0
    b2: float = 1.0
    grid_size: int = 100
    rho_min: float | None = None
    rho_max: float | None = None
    nugget_rel: float | None = None
    precision_rule: str = "linear"
    iters: int = 1000
    burn_in: int = 0
    thin: int = 1
    seed: int = 0
    holdout: float = 0.0
    keep_f: bool = False
    chains: int = 1
    # fit-tensor
    n_bases: int = 1
    main_effects: bool = False
    beta_var: float = 100.0
    surface_grid: int = 0
    # validate
    sizes: list | None = None
    eps_values: list | None = None
    # bench
    bench_iters: int = 100
    bench_grid: int = 4

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if not 0.0 <= self.holdout < 1.0:
            raise ConfigError("holdout must satisfy 0 <= holdout < 1")
        if self.mode in ("fit", "fit-tensor"):
            if not self.data:
                raise ConfigError(f"mode {self.mode} needs a data file")
            if self.iters < 1 or self.burn_in < 0 or self.thin < 1:
                raise ConfigError("need iters >= 1, burn_in >= 0, thin >= 1")
            if self.burn_in >= self.iters:
                raise ConfigError("burn_in must be smaller than iters")
        if self.B < 1 or self.grid_size < 1 or self.chains < 1 or self.n_bases < 1:
            raise ConfigError("B, grid_size, chains and n_bases must be >= 1")
        if self.precision_rule not in ("linear", "squared"):
            raise ConfigError("precision_rule must be 'linear' or 'squared'")
        if (self.rho_min is None) != (self.rho_max is None):
            raise ConfigError("give both rho_min and rho_max or neither")
        if self.rho_min is not None and not 0 < self.rho_min <= self.rho_max:
            raise ConfigError("need 0 < rho_min <= rho_max")
        if self.sizes is None:
            self.sizes = list(DEFAULT_SIZES.get(self.mode, ()))
        if self.mode in DEFAULT_SIZES and not self.sizes:
            raise ConfigError("sizes must not be empty")
        if self.bench_iters < 1 or self.bench_grid < 1:
            raise ConfigError("bench_iters and bench_grid must be >= 1")
        return self

    def rho_grid(self, points):
        if self.rho_min is None:
            return default_rho_grid(points, self.grid_size)
        return np.geomspace(self.rho_min, self.rho_max, self.grid_size)


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    known = {f.name for f in fields(RunConfig)}
    bad = sorted(set(raw) - known)
    if bad:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(bad)}")
    return raw


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(float(v)) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hodlrgp", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="mode", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with RunConfig keys")
    common.add_argument("--out", help="output directory")
    common.add_argument("--eps", type=float)
    common.add_argument("--seed", type=int)
    fitting = argparse.ArgumentParser(add_help=False)
    fitting.add_argument("data", nargs="?", help="CSV with header x1,...,xd,y[,f]")
    fitting.add_argument("-B", "--leaf-size", dest="B", type=int)
    for k in ("a1", "b1", "a2", "b2", "rho_min", "rho_max", "nugget_rel", "holdout"):
        fitting.add_argument("--" + k.replace("_", "-"), dest=k, type=float)
    for k in ("grid_size", "iters", "burn_in", "thin", "chains"):
        fitting.add_argument("--" + k.replace("_", "-"), dest=k, type=int)
    fitting.add_argument("--keep-f", dest="keep_f", action="store_true", default=None)

    p = sub.add_parser("fit", parents=[common, fitting], help="1-D GP regression")
    p.add_argument("--precision-rule", dest="precision_rule", choices=["linear", "squared"])
    p = sub.add_parser("fit-tensor", parents=[common, fitting],
                       help="tensor-product surface regression")
    p.add_argument("--n-bases", dest="n_bases", type=int)
    p.add_argument("--main-effects", dest="main_effects", action="store_true", default=None)
    p.add_argument("--beta-var", dest="beta_var", type=float)
    p.add_argument("--surface-grid", dest="surface_grid", type=int,
                   help="points per axis of the exported surface grid")
    p = sub.add_parser("validate", parents=[common], help="KL-bound sweep")
    p.add_argument("--sizes", type=_ints)
    p.add_argument("--eps-values", dest="eps_values", type=_floats)
    p = sub.add_parser("bench", parents=[common], help="timing study")
    p.add_argument("--sizes", type=_ints)
    p.add_argument("--iters", dest="bench_iters", type=int)
    p.add_argument("--grid-size", dest="bench_grid", type=int)
    p.add_argument("--nugget-rel", dest="nugget_rel", type=float)
    p.add_argument("-B", "--leaf-size", dest="B", type=int)
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = load_config(args.config) if args.config else {}
    for k, v in vars(args).items():
        if k != "config" and v is not None:
            values[k] = v
    values["mode"] = args.mode
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


# -- helpers -------------------------------------------------------------------

def holdout_split(n: int, frac: float, seed):
    """Indices (train, test) with ``ceil(frac * n)`` test points."""
    # round() strips float noise such as 0.07 * 100 = 7.000000000000001
    n_test = math.ceil(round(frac * n, 9)) if frac > 0 else 0
    if n_test >= n:
        raise ConfigError("holdout leaves no training data")
    perm = np.random.default_rng([int(seed), 7]).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def interval_summary(draws):
    return (draws.mean(0), np.quantile(draws, 0.025, axis=0),
            np.quantile(draws, 0.975, axis=0))


def ci_area(lower, upper, X) -> float:
    """Mean interval width times the volume of the input bounding box."""
    X = np.asarray(X, dtype=float).reshape(len(lower), -1)
    extent = float(np.prod(X.max(0) - X.min(0))) if len(X) else 0.0
    return float(np.mean(upper - lower)) * extent


def _config_record(cfg: RunConfig) -> dict:
    # the output directory is left out so reports do not depend on where they live
    return {k: v for k, v in asdict(cfg).items() if k != "out"}


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(v):
    return format(float(v), ".17g")


def write_predictions(path, X, mean, lo, hi, y=None, truth=None):
    d = X.shape[1]
    cols = [f"x{h + 1}" for h in range(d)]
    extra = []
    if y is not None:
        cols.append("y")
        extra.append(y)
    if truth is not None:
        cols.append("f")
        extra.append(truth)
    cols += ["mean", "lower95", "upper95"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(len(X)):
            w.writerow([_fmt(v) for v in (*X[i], *(e[i] for e in extra),
                                          mean[i], lo[i], hi[i])])


def _prediction_report(Xt, yt, ft, draws):
    mean, lo, hi = interval_summary(draws)
    target, name = (ft, "f") if ft is not None else (yt, "y")
    return (mean, lo, hi), {
        "n_holdout": int(len(Xt)),
        "mspe": float(np.mean((mean - target) ** 2)),
        "mspe_target": name,
        "ci_area": ci_area(lo, hi, Xt),
        "coverage95": float(np.mean((lo <= target) & (target <= hi))),
    }


# -- fit -------------------------------------------------------------------------

def _fit_chain(args):
    cfg, X, y, Xt, seed = args
    ds = collapse_duplicates(X, y, cfg.precision_rule, leaf_size=cfg.B)
    priors = PriorSpec(cfg.rho_grid(ds.unique_points), cfg.a1, cfg.b1, cfg.a2, cfg.b2)
    nugget = NUGGET_REL if cfg.nugget_rel is None else cfg.nugget_rel
    return run_gibbs(ds, priors, eps=cfg.eps, B=cfg.B, iters=cfg.iters,
                     burn_in=cfg.burn_in, thin=cfg.thin, seed=seed,
                     x_star=Xt if len(Xt) else None, keep_f=cfg.keep_f,
                     nugget_rel=nugget)


def chain_seeds(seed, chains):
    if chains == 1:
        return [int(seed)]
    ss = np.random.SeedSequence(int(seed)).spawn(chains)
    return [int(s.generate_state(1, np.uint64)[0]) for s in ss]


def run_fit(cfg: RunConfig) -> int:
    X, y, truth = read_csv(cfg.data, with_truth=True)
    if X.shape[1] != 1:
        raise ConfigError(f"fit needs 1-D inputs, got d={X.shape[1]}; use fit-tensor")
    train, test = holdout_split(len(y), cfg.holdout, cfg.seed)
    os.makedirs(cfg.out, exist_ok=True)
    seeds = chain_seeds(cfg.seed, cfg.chains)
    jobs = [(cfg, X[train], y[train], X[test], s) for s in seeds]
    if cfg.chains == 1:
        chains = [_fit_chain(jobs[0])]
    else:
        with ProcessPoolExecutor(max_workers=min(cfg.chains, os.cpu_count() or 1)) as ex:
            chains = list(ex.map(_fit_chain, jobs))
    timings = {}
    for k, ch in enumerate(chains):
        tag = "" if cfg.chains == 1 else f"_{k + 1}"
        ch.to_csv(os.path.join(cfg.out, f"chain{tag}.csv"), include_f=cfg.keep_f)
        ch.write_metadata(os.path.join(cfg.out, f"metadata{tag}.json"))
        timings[f"chain{tag or '_1'}"] = ch.timings
    summary = {"mode": "fit", "n_train": int(len(train)), "seeds": seeds,
               "config": _config_record(cfg),
               "tau_mean": float(np.mean(np.concatenate([c.tau for c in chains]))),
               "sigma_f_sq_mean": float(np.mean(np.concatenate([c.sigma_f_sq for c in chains])))}
    if len(test):
        draws = np.vstack([c.f_star for c in chains])
        (mean, lo, hi), rep = _prediction_report(
            X[test], y[test], None if truth is None else truth[test], draws)
        summary.update(rep)
        write_predictions(os.path.join(cfg.out, "predictions.csv"), X[test], mean, lo, hi,
                          y[test], None if truth is None else truth[test])
    _write_json(os.path.join(cfg.out, "summary.json"), summary)
    _write_json(os.path.join(cfg.out, "timings.json"), timings)
    return 0


# -- fit-tensor ------------------------------------------------------------------

def write_tensor_chain(path, ch) -> None:
    nb, d = ch.rho_idx.shape[1:]
    grids = ch.meta["rho_grids"]
    cols = ["iter", "tau"] + [f"beta_{b + 1}" for b in range(nb)]
    cols += [f"rho_{b + 1}_{h + 1}" for b in range(nb) for h in range(d)]
    first = ch.burn_in + ch.thin
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(ch.n_retained):
            vals = [ch.tau[k], *ch.beta[k]]
            vals += [grids[h][ch.rho_idx[k, b, h]] for b in range(nb) for h in range(d)]
            fh.write(str(first + k * ch.thin) + "," + ",".join(_fmt(v) for v in vals) + "\n")


def surface_points(X, m: int):
    axes = [np.linspace(lo, hi, m) for lo, hi in zip(X.min(0), X.max(0))]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([g.ravel() for g in mesh])


def run_fit_tensor(cfg: RunConfig) -> int:
    X, y, truth = read_csv(cfg.data, with_truth=True)
    train, test = holdout_split(len(y), cfg.holdout, cfg.seed)
    os.makedirs(cfg.out, exist_ok=True)
    Xtr = X[train]
    grid_pts = surface_points(Xtr, cfg.surface_grid) if cfg.surface_grid else np.empty((0, X.shape[1]))
    Xs = np.vstack([X[test], grid_pts])
    grids = None
    if cfg.rho_min is not None:
        grids = [np.geomspace(cfg.rho_min, cfg.rho_max, cfg.grid_size)] * X.shape[1]
    nugget = TENSOR_NUGGET_REL if cfg.nugget_rel is None else cfg.nugget_rel
    ch = run_tensor_gibbs(Xtr, y[train], n_bases=cfg.n_bases, iters=cfg.iters,
                          burn_in=cfg.burn_in, thin=cfg.thin, seed=cfg.seed,
                          eps=cfg.eps, B=cfg.B, x_star=Xs if len(Xs) else None,
                          rho_grids=grids, grid_size=cfg.grid_size, a1=cfg.a1,
                          b1=cfg.b1, beta_var=cfg.beta_var,
                          main_effects=cfg.main_effects, nugget_rel=nugget)
    write_tensor_chain(os.path.join(cfg.out, "chain.csv"), ch)
    meta = dict(ch.meta, seed=cfg.seed, burn_in=ch.burn_in, thin=ch.thin,
                iters=ch.iters, n_retained=ch.n_retained, y_scale=ch.y_scale,
                bases=[list(b) for b in ch.bases], nugget_rel=nugget)
    _write_json(os.path.join(cfg.out, "metadata.json"), meta)
    summary = {"mode": "fit-tensor", "n_train": int(len(train)), "config": _config_record(cfg),
               "tau_mean": float(ch.tau.mean())}
    nt = len(test)
    if nt:
        (mean, lo, hi), rep = _prediction_report(
            X[test], y[test], None if truth is None else truth[test], ch.surface_star[:, :nt])
        summary.update(rep)
        write_predictions(os.path.join(cfg.out, "predictions.csv"), X[test], mean, lo, hi,
                          y[test], None if truth is None else truth[test])
    if len(grid_pts):
        mean, lo, hi = interval_summary(ch.surface_star[:, nt:])
        write_predictions(os.path.join(cfg.out, "surface.csv"), grid_pts, mean, lo, hi)
    _write_json(os.path.join(cfg.out, "summary.json"), summary)
    _write_json(os.path.join(cfg.out, "timings.json"), ch.timings)
    return 0


# -- validate --------------------------------------------------------------------

def run_validate(cfg: RunConfig) -> int:
    strict = cfg.eps_values is not None
    vc = ValidationConfig(sizes=tuple(int(n) for n in cfg.sizes),
                          eps_values=tuple(cfg.eps_values) if strict
                          else ValidationConfig.eps_values, seed=cfg.seed)
    rows = validation_rows(vc, strict=strict)
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "validation.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("n,eps,kl,part_i,part_ii,part_iii,bound,status\n")
        for r in rows:
            fh.write(f"{r[0]}," + ",".join(_fmt(v) for v in r[1:7]) + f",{r[7]}\n")
    failed = [r for r in rows if r[7] == "fail"]
    for r in failed:
        print(f"bound violated: n={r[0]} eps={r[1]:g} kl={r[2]:.3e} > {r[6]:.3e}",
              file=sys.stderr)
    return 1 if failed else 0


# -- bench -------------------------------------------------------------------------

def loglog_slope(ns, ts):
    """Least-squares slope of log t on log n; None for fewer than two sizes."""
    ns = np.asarray(ns, dtype=float)
    ts = np.asarray(ts, dtype=float)
    if len(np.unique(ns)) < 2:
        return None
    return float(np.polyfit(np.log(ns), np.log(ts), 1)[0])


# At 1e5+ points on [0, 1] the smoothest grid values need a nugget well
# above the accumulated block errors to stay positive definite.
BENCH_NUGGET_REL = 1e-6


def bench_dataset(n: int, seed):
    rng = np.random.default_rng([int(seed), n])
    x = rng.uniform(0.0, 1.0, n)
    y = np.sin(2 * np.pi * x) + rng.standard_normal(n) * 0.1
    return collapse_duplicates(x[:, None], y)


def bench_one(n, cfg: RunConfig):
    ds = bench_dataset(n, cfg.seed)
    if cfg.rho_min is not None:
        grid = np.geomspace(cfg.rho_min, cfg.rho_max, cfg.bench_grid)
    else:
        grid = default_rho_grid(ds.unique_points, cfg.bench_grid)
    nugget = BENCH_NUGGET_REL if cfg.nugget_rel is None else cfg.nugget_rel
    t0 = time.perf_counter()
    pre = GridPrecomp(ds.unique_points, grid, cfg.eps, cfg.B, nugget)
    setup = time.perf_counter() - t0
    ch = run_gibbs(ds, PriorSpec(grid), iters=cfg.bench_iters, seed=cfg.seed,
                   keep_f=False, grid=pre)
    return setup, ch.timings["sampling_total"]


def run_bench(cfg: RunConfig) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    rows = []
    for n in cfg.sizes:
        setup, sampling = bench_one(int(n), cfg)
        rows.append((int(n), setup, sampling))
        print(f"n={n:>8d}  setup {setup:9.3f} s  sampling {sampling:9.3f} s", flush=True)
    with open(os.path.join(cfg.out, "bench.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("n,setup_s,sampling_s,total_s\n")
        for n, s, t in rows:
            fh.write(f"{n},{s:.6f},{t:.6f},{s + t:.6f}\n")
    slope = loglog_slope([r[0] for r in rows], [r[2] for r in rows])
    text = "n/a" if slope is None else f"{slope:.3f}"
    print(f"sampling-phase log-log slope: {text}")
    _write_json(os.path.join(cfg.out, "bench_summary.json"),
                {"sizes": [r[0] for r in rows], "iters": cfg.bench_iters,
                 "grid_size": cfg.bench_grid, "sampling_slope": slope if slope is not None else "n/a"})
    return 0


RUNNERS = {"fit": run_fit, "fit-tensor": run_fit_tensor,
           "validate": run_validate, "bench": run_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return RUNNERS[cfg.mode](cfg)
    except (ConfigError, InadmissibleError, ValueError, OSError) as exc:
        print(f"hodlrgp {args.mode}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
