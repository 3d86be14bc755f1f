"""Command-line driver.

    gdsampler run --model a --N 100 --T 10 --M 5000 --R 200 --scale 1.05 --seed 7 --out runA
    gdsampler benchmark --Ns 500,1000,2000,4000,8000 --out bench
    gdsampler marglik-study --out study.csv

Settings may also come from a flat ``key = value`` file given with
``--config``; flags on the command line win over the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import timeit
from pathlib import Path

import numpy as np

from .gds_core import GdsConfig, ProposalCapExceeded, ScaleSearchFailed, default_threads, run
from .marglik import estimate_log_ml, harmonic_mean_log_ml, marglik_study, write_study_csv
from .mode_finder import ModeFindingError, ModeOptions, find_mode
from .model import OutOfSupport, make_model_a, make_model_b, make_model_c
from .proposal import build_proposal
from .sparse_linalg import NonFiniteGradient, NotPositiveDefinite, cholesky, fd_hessian, solve_lt, write_matrix_market

log = logging.getLogger("gdsampler")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# key -> (type, default); the same keys are accepted in config files
RUN_KEYS = {
    "model": (str, "a"),
    "N": (int, None),
    "T": (int, None),
    "k": (int, None),
    "n": (int, None),
    "diag_sigma": (bool, False),
    "mu_true": (float, -1.0),
    "tau_true": (float, 3.0),
    "sigma_true": (float, None),
    "data_seed": (int, None),
    "M": (int, 1000),
    "R": (int, 100),
    "scale": (float, None),
    "prec_scale": (float, None),
    "seed": (int, 0),
    "threads": (int, None),
    "out": (str, "gds_run"),
    "marglik": (bool, False),
    "max_attempts": (int, 10),
    "cap": (int, 10_000_000),
}

MODEL_DEFAULTS = {
    "a": {"N": 100, "T": 10},
    "b": {"N": 500, "T": 52, "k": 3, "sigma_true": 0.1},
    "c": {"n": 200, "T": 1, "k": 5, "sigma_true": 1.0},
}

QUANTILES = (2.5, 25, 50, 75, 97.5)


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _convert(key, value):
    typ = RUN_KEYS[key][0]
    if value is None:
        return None
    try:
        return _parse_bool(value) if typ is bool else typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for num, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{num}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in RUN_KEYS:
            raise ConfigError(f"{path}:{num}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def resolve_run_config(flags: dict, file_values: dict | None = None) -> dict:
    """Merge defaults, config file and explicit flags (highest precedence)."""
    cfg = {k: v[1] for k, v in RUN_KEYS.items()}
    cfg.update(file_values or {})
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if cfg["model"] not in MODEL_DEFAULTS:
        raise ConfigError(f"unknown model {cfg['model']!r}; choose a, b or c")
    for key, val in MODEL_DEFAULTS[cfg["model"]].items():
        if cfg.get(key) is None:
            cfg[key] = val
    if cfg["scale"] is not None and cfg["prec_scale"] is not None:
        raise ConfigError("give either scale or prec_scale, not both")
    if cfg["prec_scale"] is not None and cfg["prec_scale"] <= 0:
        raise ConfigError("prec_scale must be positive")
    if cfg["scale"] is None and cfg["prec_scale"] is None:
        cfg["scale"] = 1.02
    if cfg["threads"] is None:
        cfg["threads"] = default_threads()
    if cfg["data_seed"] is None:
        cfg["data_seed"] = cfg["seed"]
    for key in ("N", "T", "k", "n", "M", "R", "threads", "max_attempts", "cap"):
        if cfg.get(key) is not None and cfg[key] < 1:
            raise ConfigError(f"{key} must be positive")
    if cfg["M"] < 2:
        raise ConfigError("M must be at least 2")
    return cfg


def build_model(cfg: dict):
    m = cfg["model"]
    if m == "a":
        return make_model_a(cfg["N"], cfg["T"], mu_true=cfg["mu_true"], tau_true=cfg["tau_true"],
                            sigma_true=cfg["sigma_true"] or 2.0, seed=cfg["data_seed"])
    if m == "b":
        return make_model_b(cfg["N"], T=cfg["T"], k=cfg["k"], Sigma_true=cfg["sigma_true"] * np.eye(cfg["k"]),
                            seed=cfg["data_seed"], diag_sigma=cfg["diag_sigma"])
    return make_model_c(cfg["n"], T=cfg["T"], k=cfg["k"], seed=cfg["data_seed"], sigma_true=cfg["sigma_true"])


def summarize(result, model) -> list[dict]:
    pop = result.samples[:, model.dim - model.pop_dim :]
    rows = []
    for j, name in enumerate(model.pop_names()):
        x = pop[:, j]
        row = {"param": name, "mean": float(x.mean()), "sd": float(x.std(ddof=1)) if x.size > 1 else 0.0}
        for q, val in zip(QUANTILES, np.percentile(x, QUANTILES)):
            row[f"q{q:g}"] = float(val)
        rows.append(row)
    return rows


def cmd_run(cfg: dict, verbose: bool = False) -> int:
    model = build_model(cfg)
    scale = cfg["scale"] if cfg["scale"] is not None else 1.0 / cfg["prec_scale"]
    gcfg = GdsConfig(M=cfg["M"], R=cfg["R"], scale_s=scale, max_scale_attempts=cfg["max_attempts"],
                     max_proposals_per_draw=cfg["cap"], seed=cfg["seed"], threads=cfg["threads"])
    trace = None
    if verbose:
        # debug files: the optimizer trace and the proposal's Cholesky factor
        Path(cfg["out"]).mkdir(parents=True, exist_ok=True)
        trace = open(Path(cfg["out"]) / "mode_trace.csv", "w")
    try:
        result = run(model, gcfg, mode_opts=ModeOptions(trace=trace))
    finally:
        if trace is not None:
            trace.close()
    if verbose:
        write_matrix_market(Path(cfg["out"]) / "proposal_factor.mtx", result.proposal.factor)
    # threads and the output location do not change the result, so they stay
    # out of the saved config and reruns elsewhere give identical files
    saved = {k: v for k, v in cfg.items() if k not in ("threads", "out")}
    extra = {"run_config": saved, "model_settings": model.config()}
    if cfg["marglik"]:
        est = estimate_log_ml(result)
        extra["log_ml"] = est.log_ml
        extra["gamma_hat"] = est.gamma_hat
        extra["log_ml_plugin"] = est.log_ml_plugin
        extra["log_ml_hme"] = harmonic_mean_log_ml(model, result.samples)
    out = result.save(cfg["out"], extra)
    rows = summarize(result, model)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    meta = result.meta()
    print(f"s={result.scale_s_final:.4g}  proposals={meta['total_proposals']}  "
          f"acceptance={100 * result.acceptance_rate:.3g}%  median/draw={meta['median_proposals_per_draw']:g}")
    if cfg["marglik"]:
        print(f"log marginal likelihood {extra['log_ml']:.4f} (harmonic mean {extra['log_ml_hme']:.4f})")
    print(f"wrote {out}")
    return EXIT_OK


BENCH_OPS = ("log_density", "gradient", "hessian", "cholesky", "mvn_sample", "solve")


def _time(fn) -> float:
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=3, number=number)) / number


def benchmark(Ns, reps=3, seed=0, k=3, T=52) -> tuple[list[dict], dict]:
    """Mean wall time per operation on model B at each N, plus log-log slopes."""
    rows = []
    rng = np.random.default_rng(seed)
    for N in Ns:
        model = make_model_b(N, T=T, k=k, seed=seed)
        mode = find_mode(model)
        if not mode.converged:
            log.warning("mode not converged at N=%d; timing at the last iterate", N)
        theta = mode.theta_star
        pattern = model.sparsity()
        H = mode.hessian
        factor = cholesky(H)
        prop = build_proposal(mode, H, 1.0)
        z = rng.standard_normal(model.dim)

        def neg_grad(t):
            return -model.gradient(t)

        ops = {
            "log_density": lambda: model.log_density(theta),
            "gradient": lambda: model.gradient(theta),
            "hessian": lambda: fd_hessian(neg_grad, theta, pattern, mode.coloring),
            "cholesky": lambda: cholesky(H),
            "mvn_sample": lambda: prop.sample(rng),
            "solve": lambda: solve_lt(factor, z, mode="backward"),
        }
        for op, fn in ops.items():
            t = float(np.mean([_time(fn) for _ in range(reps)]))
            rows.append({"N": N, "op": op, "seconds": t, "nnz_L": factor.nnz})
        log.info("N=%d done", N)
    slopes = {}
    for op in BENCH_OPS:
        pts = [(r["N"], r["seconds"]) for r in rows if r["op"] == op]
        if len(pts) >= 2:
            x, y = np.log([p[0] for p in pts]), np.log([p[1] for p in pts])
            slopes[op] = float(np.polyfit(x, y, 1)[0])
    return rows, slopes


def cmd_benchmark(args) -> int:
    Ns = [int(x) for x in args.Ns.split(",")] if args.Ns else [500, 1000, 2000, 4000, 8000]
    if args.full:
        Ns = [int(x) for x in np.round(np.geomspace(500, 50000, 10), -1)]
    rows, slopes = benchmark(Ns, reps=args.reps, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "benchmark.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["N", "op", "seconds", "nnz_L"])
        w.writeheader()
        w.writerows(rows)
    with open(out / "slopes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["op", "slope"])
        for op, s in slopes.items():
            w.writerow([op, f"{s:.4f}"])
            print(f"{op:12s} slope {s:.3f}")
    return EXIT_OK


def cmd_marglik_study(args) -> int:
    def ints(s):
        return tuple(int(x) for x in s.split(","))

    if args.full:
        ks, ns, Ms, scales = (5, 25, 100), (200, 2000), (1000, 10000), (0.5, 0.6, 0.7, 0.8)
    else:
        ks, ns, Ms = ints(args.ks), ints(args.ns), ints(args.Ms)
        scales = tuple(float(x) for x in args.scales.split(","))
    if any(s <= 0 for s in scales):
        raise ConfigError("precision scales must be positive")
    cells = marglik_study(ks=ks, ns=ns, Ms=Ms, scales=scales, replications=args.reps, seed=args.seed,
                          R=args.R, T=args.T, threads=args.threads or default_threads())
    write_study_csv(cells, args.out)
    for c in cells:
        print(c.row())
    print(f"wrote {args.out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gdsampler", description="Generalized direct sampling for hierarchical models")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="sample from a built-in model")
    r.add_argument("--config", help="key = value settings file")
    for key, (typ, _) in RUN_KEYS.items():
        flag = "--" + key.replace("_", "-")
        if typ is bool:
            r.add_argument(flag, dest=key, action="store_const", const=True, default=None)
        else:
            r.add_argument(flag, dest=key, type=str, default=None)

    b = sub.add_parser("benchmark", help="time the sparse kernels on model B")
    b.add_argument("--Ns", default=None, help="comma separated N values")
    b.add_argument("--full", action="store_true", help="ten N values from 500 to 50000")
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="benchmark")

    s = sub.add_parser("marglik-study", help="log marginal likelihood study on model C")
    s.add_argument("--ks", default="5,25")
    s.add_argument("--ns", default="200")
    s.add_argument("--Ms", default="1000")
    s.add_argument("--scales", default="0.5,0.6,0.7", help="precision scales")
    s.add_argument("--reps", type=int, default=5)
    s.add_argument("--R", type=int, default=250)
    s.add_argument("--T", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--full", action="store_true")
    s.add_argument("--out", default="marglik_study.csv")
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            flags = {k: (_convert(k, v) if isinstance(v, str) else v) for k, v in vars(args).items() if k in RUN_KEYS}
            file_values = read_config_file(args.config) if args.config else {}
            return cmd_run(resolve_run_config(flags, file_values), verbose=args.verbose)
        if args.command == "benchmark":
            return cmd_benchmark(args)
        return cmd_marglik_study(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NotPositiveDefinite, ProposalCapExceeded, ScaleSearchFailed, ModeFindingError,
            NonFiniteGradient, OutOfSupport) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
