"""Command-line front end: ``hidimlr fit | test | simulate``.

Features are numbered from 1 on the command line and from 0 in the library.

Exit codes: 0 success, 2 invalid input, 3 unbounded MLE, 4 no convergence,
5 feature index out of range, 6 too many failed Monte Carlo repetitions.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from hidimlr import __version__
from hidimlr.errors import (
    HidimlrError,
    IndexOutOfRange,
    MaxIterations,
    TooManyFailures,
    Unbounded,
)
from hidimlr.inference import build_kron_solver, estimate_omega_jj, omega_from_sigma, test_feature
from hidimlr.mle import Dataset, FitConfig, check_balance, fit_mle
from hidimlr.simulate import SCHEMA, SimConfig, run_monte_carlo, write_raw_csv

logger = logging.getLogger("hidimlr")

EXIT_INPUT = 2
EXIT_UNBOUNDED = 3
EXIT_MAXITER = 4
EXIT_RANGE = 5
EXIT_FAILURES = 6


class InputError(Exception):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_matrix(path, header: bool = False) -> np.ndarray:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    if header:
        rows = rows[1:]
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise InputError(f"{path}: no data rows")
    width = len(rows[0])
    try:
        data = [[float(c) for c in r] for r in rows if len(r) == width or _bad_width(path, r, width)]
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric entry ({exc})") from None
    out = np.array(data, dtype=float)
    if not np.all(np.isfinite(out)):
        raise InputError(f"{path}: non-finite entry")
    return out


def _bad_width(path, row, width):
    raise InputError(f"{path}: ragged row with {len(row)} columns, expected {width}")


def write_matrix(path, M) -> None:
    """CSV with 17 significant digits so that reading back is exact."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for row in np.atleast_2d(M):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def load_dataset(args) -> Dataset:
    X = read_matrix(args.x_csv, args.header)
    Y = read_matrix(args.y_csv, args.header)
    if args.labels:
        if Y.shape[1] != 1 or np.any(Y != np.round(Y)) or Y.min() < 1:
            raise InputError("--labels expects one column of integer labels 1..K+1")
        return Dataset.from_labels(X, Y[:, 0].astype(int) - 1)
    return Dataset(X, Y, args.q)


def load_fit_config(path) -> FitConfig:
    if path is None:
        return FitConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return FitConfig(**{k: v for k, v in raw.items() if k != "schema"})
    except (OSError, ValueError, TypeError) as exc:
        raise InputError(f"invalid fit config {path}: {exc}") from None


def manifest(command: str, config: dict, inputs: list, start: float) -> dict:
    return {
        "command": command,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "version": __version__,
        "duration_seconds": time.perf_counter() - start,
    }


def dump_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _fit_config_dict(cfg: FitConfig, n: int) -> dict:
    return {"grad_tol": cfg.resolved_grad_tol(n), "max_iter": cfg.max_iter, "tau": cfg.tau,
            "gamma": cfg.gamma, "line_search_shrink": cfg.line_search_shrink,
            "armijo": cfg.armijo}


def _input_config(args) -> dict:
    return {"header": args.header, "labels": args.labels, "q": args.q}


def cmd_fit(args) -> int:
    start = time.perf_counter()
    data = load_dataset(args)
    cfg = load_fit_config(args.config)
    fit = fit_mle(data, cfg)
    balanced, counts = check_balance(data.Y, cfg.gamma, data.q)
    inputs = [args.x_csv, args.y_csv] + ([args.config] if args.config else [])
    out = {
        "schema": SCHEMA,
        "n": data.n, "p": data.p, "K": data.K, "q": data.q,
        "A_hat": fit.A_hat.tolist(),
        "converged": True,
        "iterations": fit.iterations,
        "final_grad_norm": fit.final_grad_norm,
        "loss": fit.loss,
        "boundedness": fit.boundedness,
        "boundedness_ok": fit.boundedness <= cfg.tau,
        "balance": {"balanced": balanced, "counts": counts.tolist(), "gamma": cfg.gamma},
        "manifest": manifest("fit", {**_input_config(args), **_fit_config_dict(cfg, data.n)},
                             inputs, start),
    }
    dump_json(out, args.out)
    return 0


def _parse_omega(spec: str, j: int, p: int):
    """Returns (omega_jj or None, extra input file or None)."""
    if spec == "estimate":
        return None, None
    kind, _, value = spec.partition(":")
    if kind == "value":
        try:
            omega = float(value)
        except ValueError:
            raise InputError(f"bad --omega value {value!r}") from None
        if not omega > 0:
            raise InputError("--omega value must be positive")
        return omega, None
    if kind == "sigma":
        Sigma = read_matrix(value)
        if Sigma.shape != (p, p):
            raise InputError(f"Sigma must be {p}x{p}, got {Sigma.shape}")
        return omega_from_sigma(Sigma, j), value
    raise InputError("--omega must be 'estimate', 'value:<float>' or 'sigma:<csv>'")


def cmd_test(args) -> int:
    start = time.perf_counter()
    data = load_dataset(args)
    if not 1 <= args.feature <= data.p:
        raise IndexOutOfRange(f"--feature {args.feature} outside [1, {data.p}]")
    j = args.feature - 1
    omega, sigma_file = _parse_omega(args.omega, j, data.p)
    cfg = load_fit_config(args.config)
    fit = fit_mle(data, cfg)
    solver = build_kron_solver(fit, data.X, args.backend)
    report = test_feature(fit, data.X, j, omega=omega, solver=solver)
    out = report.to_dict()
    out["feature_index"] = args.feature
    inputs = [args.x_csv, args.y_csv] + [f for f in (args.config, sigma_file) if f]
    out.update({
        "schema": SCHEMA,
        "feature_index_base": 1,
        "backend": solver.backend,
        "manifest": manifest("test", {**_input_config(args), **_fit_config_dict(cfg, data.n),
                                      "feature": args.feature, "omega": args.omega,
                                      "backend": solver.backend}, inputs, start),
    })
    dump_json(out, args.out)
    return 0


def cmd_simulate(args) -> int:
    start = time.perf_counter()
    try:
        raw = json.loads(Path(args.config_json).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ValueError("config must be a JSON object")
    except (OSError, ValueError) as exc:
        raise InputError(f"invalid config {args.config_json}: {exc}") from None
    config = SimConfig.from_dict(raw)
    summary = run_monte_carlo(config)
    out = summary.to_dict()
    out["manifest"] = manifest("simulate", config.to_dict(), [args.config_json], start)
    dump_json(out, args.out)
    if args.raw:
        write_raw_csv(summary, args.raw)
    return 0


def cmd_estimate_omega(args) -> int:
    X = read_matrix(args.x_csv, args.header)
    if not 1 <= args.feature <= X.shape[1]:
        raise IndexOutOfRange(f"--feature {args.feature} outside [1, {X.shape[1]}]")
    dump_json({"schema": SCHEMA, "feature_index": args.feature,
               "omega_jj": estimate_omega_jj(X, args.feature - 1)}, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hidimlr",
        description="Multinomial logistic MLE and high-dimensional feature significance tests.",
        epilog="Features are 1-based on the command line. Exit codes: 2 invalid input, "
               "3 unbounded MLE, 4 no convergence, 5 feature out of range, 6 too many "
               "failed repetitions.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("x_csv", help="n x p design matrix, comma separated")
        p.add_argument("y_csv", help="n x (K+1) responses, or one label column with --labels")
        p.add_argument("--header", action="store_true", help="skip one header row in each CSV")
        p.add_argument("--labels", action="store_true",
                       help="Y is a single column of integer labels 1..K+1")
        p.add_argument("--q", type=int, default=1, help="repetitions averaged into each Y row")
        p.add_argument("--config", help="JSON with fit settings (tau, gamma, max_iter, ...)")
        p.add_argument("--out", help="output JSON path (default: stdout)")

    p_fit = sub.add_parser("fit", help="fit the multinomial logistic MLE")
    data_args(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_test = sub.add_parser("test", help="test whether one feature is a null covariate")
    data_args(p_test)
    p_test.add_argument("--feature", type=int, required=True, help="1-based feature index J")
    p_test.add_argument("--omega", default="estimate",
                        help="'estimate', 'value:<float>' or 'sigma:<csv>' (default: estimate)")
    p_test.add_argument("--backend", default="auto", choices=["auto", "dense", "woodbury"])
    p_test.set_defaults(func=cmd_test)

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    p_sim.add_argument("config_json")
    p_sim.add_argument("--out", help="summary JSON path (default: stdout)")
    p_sim.add_argument("--raw", help="optional per-repetition CSV")
    p_sim.set_defaults(func=cmd_simulate)

    p_om = sub.add_parser("omega", help="estimate the precision diagonal for one feature")
    p_om.add_argument("x_csv")
    p_om.add_argument("--feature", type=int, required=True)
    p_om.add_argument("--header", action="store_true")
    p_om.add_argument("--out")
    p_om.set_defaults(func=cmd_estimate_omega)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Unbounded as exc:
        print(f"error: {exc}. The test requires the MLE existence and boundedness "
              "assumption (||X B||_F^2 / n <= tau); collect more data or raise tau.",
              file=sys.stderr)
        return EXIT_UNBOUNDED
    except MaxIterations as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MAXITER
    except IndexOutOfRange as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RANGE
    except TooManyFailures as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURES
    except (InputError, HidimlrError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
