"""Command line front end: ``python -m cogarch_pbef <command>``.

Commands: ``simulate``, ``moments``, ``estimate``, ``asymvar``, ``study`` and,
with ``--dev``, ``oracle``.  Exit status is 0 on success, 2 for invalid
configuration or parameters, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .errors import CogarchError, ConfigError, NumericalError, ParameterError
from .levy import LevyModel, Theta, VarianceGamma, model_from_dict
from .moments import K_MAX, build_moment_cache
from .pbef import METHODS, asymptotic_variance, estimate
from .simulator import SimConfig, read_returns, simulate_path, write_returns

__all__ = ["StudyConfig", "parse_config", "run_study", "build_parser", "main"]

log = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
MAX_TRUNC_K = 50
PARAM_NAMES = ("beta", "eta", "phi")

DEFAULT_MODEL = {"family": "variance_gamma", "C": 1.0}


@dataclass(frozen=True)
class StudyConfig:
    """Settings of a simulation-and-estimation study."""

    model: LevyModel
    theta0: Theta
    n_obs: int
    replications: int
    lag_r: float = 1.0
    methods: tuple = ("mspe",)
    q: int = 1
    trunc_K: int = 0
    seed: int = 0
    out_dir: str = "study_out"
    refine: int = 1000
    burn_in: float | None = None
    n_starts: int = 5
    init: str = "theta0"
    hist_bins: int = 30
    maxiter: int = 4000

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "theta0": list(self.theta0.as_tuple()),
            "n_obs": self.n_obs,
            "replications": self.replications,
            "lag_r": self.lag_r,
            "methods": list(self.methods),
            "q": self.q,
            "trunc_K": self.trunc_K,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "refine": self.refine,
            "burn_in": self.burn_in,
            "n_starts": self.n_starts,
            "init": self.init,
            "hist_bins": self.hist_bins,
            "maxiter": self.maxiter,
        }


# --- config parsing ------------------------------------------------------

_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def _theta(text: str) -> Theta:
    parts = [p for p in re.split(r"[,\s]+", text.strip()) if p]
    try:
        values = [float(p) for p in parts]
    except ValueError:
        raise ParameterError(f"theta must be three numbers 'beta,eta,phi', got {text!r}") from None
    return Theta.from_sequence(values)


def _model(text: str) -> LevyModel:
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParameterError(f"model must be a JSON object such as {json.dumps(DEFAULT_MODEL)}: {exc}") from None
    if not isinstance(spec, dict):
        raise ParameterError("model must be a JSON object")
    return model_from_dict(spec)


def _int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParameterError(f"expected an integer, got {text!r}") from None


def _float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParameterError(f"expected a number, got {text!r}") from None
    if not math.isfinite(value):
        raise ParameterError(f"expected a finite number, got {text!r}")
    return value


def _methods(text: str) -> tuple:
    methods = tuple(m.strip().lower() for m in text.split(",") if m.strip())
    bad = [m for m in methods if m not in METHODS]
    if not methods or bad:
        raise ParameterError(f"methods must be a comma list from {METHODS}, got {text!r}")
    return methods


def _burn_in(text: str):
    return None if text.strip().lower() == "auto" else _float(text)


def _init(text: str) -> str:
    text = text.strip().lower()
    if text not in ("theta0", "moments"):
        raise ParameterError(f"init must be 'theta0' or 'moments', got {text!r}")
    return text


_FIELDS = {
    "model": _model,
    "theta0": _theta,
    "n_obs": _int,
    "replications": _int,
    "lag_r": _float,
    "methods": _methods,
    "q": _int,
    "trunc_K": _int,
    "seed": _int,
    "out_dir": str.strip,
    "refine": _int,
    "burn_in": _burn_in,
    "n_starts": _int,
    "init": _init,
    "hist_bins": _int,
    "maxiter": _int,
}
_REQUIRED = ("model", "theta0", "n_obs", "replications")

CONFIG_HELP = """\
study config: one 'key = value' per line, '#' starts a comment.
  model         JSON Lévy model, e.g. {"family": "variance_gamma", "C": 1.0}  (required)
  theta0        true parameters beta,eta,phi                                   (required)
  n_obs         returns per replication                                        (required)
  replications  number of simulated paths                                      (required)
  lag_r         sampling interval                        default 1.0
  methods       comma list of mspe, opbe                 default mspe
  q             predictor order                          default 1
  trunc_K       lags kept in M for OPBE weights (0..50)  default 0
  seed          base seed; path i uses substream (seed, i)  default 0
  out_dir       output directory                         default study_out
  refine        Euler steps per lag                      default 1000
  burn_in       time units, or 'auto' = 20/(-Psi(1))     default auto
  n_starts      Nelder-Mead starts for MSPE              default 5
  init          first start: theta0 or moments          default theta0
  hist_bins     bins of the density histograms          default 30
  maxiter       Nelder-Mead iterations per start         default 4000
"""


def parse_config(path) -> StudyConfig:
    """Parse a strict ``key = value`` study configuration file."""
    path = str(path)
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    values, where = {}, {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not _KEY_RE.match(key):
            raise ConfigError(f"{path}:{lineno}: invalid key {key!r}")
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r} (first set on line {where[key]})")
        try:
            values[key] = _FIELDS[key](value)
        except (ParameterError, ValueError) as exc:
            raise ConfigError(f"{path}:{lineno}: {key}: {exc}") from None
        where[key] = lineno
    missing = [k for k in _REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"{path}: missing required key(s) {', '.join(missing)}")
    cfg = StudyConfig(**values)

    def fail(key, msg):
        loc = f"{path}:{where[key]}" if key in where else path
        raise ConfigError(f"{loc}: {key}: {msg}")

    if cfg.replications < 1:
        fail("replications", "must be >= 1")
    if cfg.q < 0:
        fail("q", "must be >= 0")
    if cfg.n_obs <= cfg.q + 1:
        fail("n_obs", f"must exceed q + 1 = {cfg.q + 1}")
    if not 0 <= cfg.trunc_K <= MAX_TRUNC_K:
        fail("trunc_K", f"must lie in [0, {MAX_TRUNC_K}]")
    if cfg.lag_r <= 0:
        fail("lag_r", "must be > 0")
    if cfg.refine < 1:
        fail("refine", "must be >= 1")
    if cfg.burn_in is not None and cfg.burn_in < 0:
        fail("burn_in", "must be >= 0 or 'auto'")
    if cfg.n_starts < 1:
        fail("n_starts", "must be >= 1")
    if cfg.hist_bins < 1:
        fail("hist_bins", "must be >= 1")
    if cfg.maxiter < 1:
        fail("maxiter", "must be >= 1")
    if not 0 <= cfg.seed < 2**63:
        fail("seed", "must be a non-negative 63-bit integer")
    return cfg


# --- study ---------------------------------------------------------------


def _replication(args):
    """Simulate path ``rep`` and estimate it with every method; returns CSV rows."""
    cfg, rep = args
    rows = []
    try:
        sim = SimConfig(n_obs=cfg.n_obs, lag_r=cfg.lag_r, refine=cfg.refine, burn_in=cfg.burn_in, seed=cfg.seed)
        sample = simulate_path(cfg.model, cfg.theta0, sim, path_index=rep)
    except CogarchError as exc:
        log.warning("replication %d: simulation failed: %s", rep, exc)
        return [_row(rep, m, None, str(exc)) for m in cfg.methods]
    init = cfg.theta0 if cfg.init == "theta0" else None
    prelim = None
    for method in cfg.methods:
        try:
            res = estimate(sample, cfg.model, method, cfg.q, init, trunc_K=cfg.trunc_K,
                           n_starts=cfg.n_starts, seed=cfg.seed + rep, maxiter=cfg.maxiter,
                           preliminary=prelim)
        except CogarchError as exc:
            log.warning("replication %d, %s: %s", rep, method, exc)
            rows.append(_row(rep, method, None, str(exc)))
            continue
        if method == "mspe":
            prelim = res.theta_hat
        rows.append(_row(rep, method, res, ""))
    return rows


def _row(rep, method, res, error):
    row = {"replication": rep, "method": method, "label": "", "beta": "", "eta": "", "phi": "",
           "objective": "", "iterations": "", "converged": "", "status": "failed", "error": error}
    if res is not None:
        b, e, p = res.theta_hat.as_tuple()
        row.update(label=res.method_label, beta=repr(b), eta=repr(e), phi=repr(p),
                   objective=repr(float(res.objective_value)), iterations=res.iterations,
                   converged=int(res.converged), status="ok")
    return row


def _provenance(cfg: StudyConfig) -> dict:
    return {"code_version": __version__, "config": cfg.to_dict(),
            "burn_in_rule": "20/(-Psi(1)) time units" if cfg.burn_in is None else "user"}


def _write_csv(path, header_meta: dict, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(header_meta, sort_keys=True) + "\n")
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _summarize(cfg: StudyConfig, rows) -> dict:
    theta0 = np.array(cfg.theta0.as_tuple())
    per_method = {}
    for method in cfg.methods:
        mine = [r for r in rows if r["method"] == method]
        ok = [r for r in mine if r["status"] == "ok"]
        n = len(mine)
        entry = {"replications": n, "n_ok": len(ok), "failure_rate": (n - len(ok)) / n if n else float("nan")}
        if ok:
            est = np.array([[float(r[k]) for k in PARAM_NAMES] for r in ok])
            avg = est.mean(axis=0)
            entry["label"] = ok[0]["label"]
            entry["avg"] = avg.tolist()
            entry["median"] = np.median(est, axis=0).tolist()
            entry["relative_bias"] = (np.abs(avg - theta0) / theta0).tolist()
            entry["cov"] = np.cov(est, rowvar=False, ddof=1).tolist() if len(ok) > 1 else None
            entry["converged_fraction"] = float(np.mean([int(r["converged"]) for r in ok]))
        per_method[method] = entry
    return {"methods": per_method}


def run_study(cfg: StudyConfig, workers: int = 1) -> dict:
    """Run every replication, write the report files and return the summary.

    Files in ``cfg.out_dir``: ``estimates.csv`` (one row per replication and
    method), ``summary.json`` (avg, relative bias and covariance per method),
    ``hist_<method>_<param>.csv`` (density histograms) and every file carries
    the resolved configuration.  Output does not depend on ``workers``.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    jobs = [(cfg, rep) for rep in range(cfg.replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replication, jobs, chunksize=1))
    else:
        results = [_replication(j) for j in jobs]
    rows = [row for rep_rows in results for row in rep_rows]
    meta = _provenance(cfg)
    fields = ["replication", "method", "label", *PARAM_NAMES, "objective", "iterations", "converged", "status", "error"]
    _write_csv(os.path.join(cfg.out_dir, "estimates.csv"), meta, fields, rows)

    summary = _summarize(cfg, rows)
    summary["provenance"] = meta
    summary["theta0"] = list(cfg.theta0.as_tuple())
    with open(os.path.join(cfg.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    for method in cfg.methods:
        ok = [r for r in rows if r["status"] == "ok" and r["method"] == method]
        for k, name in enumerate(PARAM_NAMES):
            vals = np.array([float(r[name]) for r in ok])
            hist_rows = []
            if len(vals):
                dens, edges = np.histogram(vals, bins=cfg.hist_bins, density=True)
                hist_rows = [{"left": repr(float(a)), "right": repr(float(b)), "density": repr(float(c))}
                             for a, b, c in zip(edges[:-1], edges[1:], dens)]
            _write_csv(os.path.join(cfg.out_dir, f"hist_{method}_{name}.csv"),
                       dict(meta, method=method, parameter=name), ["left", "right", "density"], hist_rows)
    return summary


# --- command handlers ----------------------------------------------------


def _parse_K(text: str):
    if text.strip().lower() in ("inf", "none", "all"):
        return None
    k = _int(text)
    if k < 0:
        raise ParameterError(f"truncation must be >= 0 or 'inf', got {text!r}")
    return k


def _cmd_simulate(args) -> int:
    model, theta = _model(args.model), _theta(args.theta)
    cfg = SimConfig(n_obs=args.n_obs, lag_r=args.lag_r, refine=args.refine, burn_in=args.burn_in, seed=args.seed)
    sample = simulate_path(model, theta, cfg, path_index=args.path_index)
    meta = {"code_version": __version__, "model": model.to_dict(), "theta": list(theta.as_tuple()),
            "sim_config": {"n_obs": cfg.n_obs, "lag_r": cfg.lag_r, "refine": cfg.refine,
                           "burn_in": cfg.burn_in, "seed": cfg.seed, "path_index": args.path_index},
            "burn_in_rule": "20/(-Psi(1)) time units" if cfg.burn_in is None else "user"}
    write_returns(args.out, sample, meta)
    print(f"wrote {len(sample)} returns to {args.out}", file=sys.stderr)
    return 0


def _cmd_moments(args) -> int:
    model, theta = _model(args.model), _theta(args.theta)
    cache = build_moment_cache(model, theta, k_max=K_MAX)
    jt = cache.jtable
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["k", "i", "h", "d", "value"])
    for text in args.entry or ["1,1,1,0", "2,2,1,0"]:
        try:
            k, i = (int(v) for v in text.split(",")[:2])
            h, d = (float(v) for v in text.split(",")[2:])
        except ValueError:
            raise ParameterError(f"entry must be 'k,i,h,d', got {text!r}") from None
        coef = jt.coefficient_vector(k, i, h, d)
        if args.sigma2_v is None:
            value = float(coef @ np.array(cache.stationary_sigma[: k + 1]))
        else:
            value = float(np.polynomial.polynomial.polyval(args.sigma2_v, coef))
        out.writerow([k, i, repr(h), repr(d), repr(value)])
    return 0


def _cmd_estimate(args) -> int:
    model = _model(args.model)
    data = read_returns(args.data, lag_r=args.lag_r)
    init = _theta(args.init) if args.init else None
    res = estimate(data, model, args.method, args.q, init, trunc_K=args.trunc_K, n_starts=args.n_starts,
                   seed=args.seed, compute_cov=args.cov)
    out = res.to_dict()
    out["provenance"] = {"code_version": __version__, "data": args.data, "model": model.to_dict(),
                         "lag_r": data.lag_r, "n_obs": len(data)}
    json.dump(out, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0 if res.converged else EXIT_NUMERIC


def _cmd_asymvar(args) -> int:
    model, theta = _model(args.model), _theta(args.theta)
    K = _parse_K(args.trunc_K)
    sandwich = "same" if args.sandwich_K is None else _parse_K(args.sandwich_K)
    V = asymptotic_variance(model, theta, args.q, args.lag_r, args.method, K, sandwich_K=sandwich)
    buf = io.StringIO()
    np.savetxt(buf, V, delimiter=",", fmt="%.10g")
    sys.stdout.write(buf.getvalue())
    return 0


def _cmd_study(args) -> int:
    cfg = parse_config(args.config)
    if args.out_dir:
        cfg = replace(cfg, out_dir=args.out_dir)
    summary = run_study(cfg, workers=args.workers)
    json.dump(summary["methods"], sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


def _cmd_oracle(args) -> int:
    from . import oracles

    model, theta = _model(args.model), _theta(args.theta)
    if args.what == "psi":
        print(repr(oracles.psi_quadrature(model, theta, args.k)))
    elif args.what == "nested":
        print(repr(oracles.nested_j_quadrature(model, theta, args.k, args.i, args.t)))
    else:
        spec = oracles.MomentSpec(returns=((0, 2 * args.k),))
        est = oracles.mc_moment(model, theta, spec, args.n_paths, args.seed)
        print(json.dumps({"value": est.value, "std_error": est.std_error, "n_paths": est.n_paths}))
    return 0


# --- parser --------------------------------------------------------------


def _common(p, theta=True):
    p.add_argument("--model", default=json.dumps(DEFAULT_MODEL), help="Lévy model as JSON (default: %(default)s)")
    if theta:
        p.add_argument("--theta", default="0.04,0.053,0.038", help="beta,eta,phi (default: %(default)s)")


def build_parser(dev: bool = False) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cogarch_pbef", description="COGARCH(1,1) moments, simulation and PBEF estimation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--dev", action="store_true", help="enable developer oracle commands")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate equally spaced returns")
    _common(p)
    p.add_argument("--n-obs", type=int, required=True)
    p.add_argument("--lag-r", type=float, default=1.0)
    p.add_argument("--refine", type=int, default=1000, help="Euler steps per lag (default: %(default)s)")
    p.add_argument("--burn-in", type=float, default=None, help="time units (default: 20/(-Psi(1)))")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--path-index", type=int, default=0, help="RNG substream index (default: %(default)s)")
    p.add_argument("--out", required=True, help="CSV output; a .json sidecar is written next to it")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("moments", help="print conditional or stationary moments as CSV")
    _common(p)
    p.add_argument("--entry", action="append", metavar="k,i,h,d",
                   help="E[G_{s,h}^{2i} sigma_{s+h}^{2(k-i)}] with s - v = d; repeatable")
    p.add_argument("--sigma2-v", type=float, default=None,
                   help="condition on sigma^2_v; default averages over its stationary law")
    p.set_defaults(func=_cmd_moments)

    p = sub.add_parser("estimate", help="estimate theta from a returns CSV")
    _common(p, theta=False)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=METHODS, default="mspe")
    p.add_argument("--q", type=int, default=1, help="predictor order (default: %(default)s)")
    p.add_argument("--trunc-K", type=int, default=0, help="lags kept in M for OPBE weights (default: %(default)s)")
    p.add_argument("--init", default=None, help="beta,eta,phi start (default: moment-based)")
    p.add_argument("--lag-r", type=float, default=None, help="default: from the data sidecar, else 1")
    p.add_argument("--n-starts", type=int, default=5)
    p.add_argument("--seed", type=int, default=0, help="seed of the jittered starts")
    p.add_argument("--cov", action="store_true", help="add the plug-in asymptotic covariance / n")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("asymvar", help="asymptotic covariance of sqrt(n)(theta_hat - theta) as CSV")
    _common(p)
    p.add_argument("--q", type=int, default=1)
    p.add_argument("--lag-r", type=float, default=1.0)
    p.add_argument("--method", choices=METHODS, default="mspe")
    p.add_argument("--trunc-K", default="0", help="lags of M in the OPBE weights, or 'inf' (default: %(default)s)")
    p.add_argument("--sandwich-K", default=None,
                   help="lags of M in D^-1 W M W^T D^-T, or 'inf' (default: same as --trunc-K)")
    p.set_defaults(func=_cmd_asymvar)

    p = sub.add_parser("study", help="replicated simulation study from a config file",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=CONFIG_HELP)
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir", default=None, help="override out_dir from the config")
    p.set_defaults(func=_cmd_study)

    if dev:
        p = sub.add_parser("oracle", help="brute-force reference values (developer)")
        _common(p)
        p.add_argument("what", choices=("psi", "nested", "mc"))
        p.add_argument("--k", type=int, default=1)
        p.add_argument("--i", type=int, default=0)
        p.add_argument("--t", type=float, default=1.0)
        p.add_argument("--n-paths", type=int, default=10000)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=_cmd_oracle)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser(dev="--dev" in argv)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
