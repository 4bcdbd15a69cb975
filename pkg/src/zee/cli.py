"""Command line: ``zee fit``, ``zee calibrate`` and ``zee simulate``.

Exit codes: 0 success, 2 bad input or arguments, 3 numerical failure,
4 internal error. JSON is the contract; the text tables are for reading.
Set ``ZEE_LOG`` (e.g. ``INFO``) for progress logging on stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import solve_gamma
from .data import WeightScheme, load_csv, validate
from .errors import DataError, ZeeError
from .estimators import fit as fit_model
from .schemas import validate_instance
from .simulation import load_config, run_experiment
from .variance import MODEL, ROBUST, Target, influence, model_based_variance, robust_variance

log = logging.getLogger("zee")
OUTPUT_VERSION = "1.0"


class UsageError(DataError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _check_output(payload, name):
    # a mismatch here is a bug in this module, not in the user's input
    try:
        validate_instance(payload, name)
    except ZeeError as exc:
        raise ZeeError(str(exc)) from None


def _write_outputs(out, files, manifest):
    """Write ``files`` (name -> text) and the manifest into directory ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)
    manifest["outputs"] = sorted(files)
    _check_output(manifest, "manifest")
    (out / "manifest.json").write_text(_dump(manifest))


def _manifest(argv, config, inputs, started, seed=None):
    return {"command": list(argv), "config": config,
            "inputs": {str(p): _sha256(p) for p in inputs}, "version": __version__,
            "wall_time_seconds": round(time.time() - started, 3), "seed": seed}


# --- fit ------------------------------------------------------------------

def _parse_predict(spec):
    try:
        zpart, spart = spec.split("@")
        z = [float(v) for v in zpart.split(",")]
        return z, float(spart)
    except ValueError:
        raise UsageError(f"--predict expects 'z1,...,zp@s', got {spec!r}") from None


def _scheme(args, ds):
    if args.scheme == "rs":
        return WeightScheme.unit(), None
    if args.scheme == "ipw":
        return WeightScheme.ipw(), None
    validate(ds, WeightScheme.calibrated(np.zeros(ds.q)))
    sol = solve_gamma(ds)
    return sol.scheme, sol


def _se(ds, scheme, f, target, kinds):
    rows = influence(ds, scheme, f, target)
    out = {ROBUST: None, MODEL: None}
    if ROBUST in kinds:
        out[ROBUST] = [float(v) for v in robust_variance(rows, ds).se]
    if MODEL in kinds:
        out[MODEL] = [float(v) for v in model_based_variance(ds, scheme, f, rows).se]
    return rows, out


def fit_payload(ds, scheme, kinds, predictions=(), oracle_check=False):
    f = fit_model(ds, scheme)
    rows, se = _se(ds, scheme, f, Target.theta(), kinds)
    mean_max = float(np.max(np.abs(rows.weighted_mean(ds))))
    preds = []
    for z, s in predictions:
        _, sp = _se(ds, scheme, f, Target.pred_at(s, z), kinds)
        _, sl = _se(ds, scheme, f, Target.lambda_at(s), kinds)
        preds.append({"z": [float(v) for v in z], "s": float(s),
                      "estimate": f.predict(z, s), "lambda": float(f.lambda_(s)),
                      "se_robust": sp[ROBUST][0] if sp[ROBUST] else None,
                      "se_model": sp[MODEL][0] if sp[MODEL] else None,
                      "lambda_se_robust": sl[ROBUST][0] if sl[ROBUST] else None,
                      "lambda_se_model": sl[MODEL][0] if sl[MODEL] else None})
    tab = f.table
    diag = {"a_condition": float(np.linalg.cond(f.a_matrix)),
            "events": float(tab.dn.sum() * ds.n),
            "at_risk_at_tau": float(tab.m0[-1] * ds.n),
            "influence_mean_max": mean_max,
            "oracle_max_residual": None, "oracle_max_relative_difference": None}
    if oracle_check:
        from .oracle import check_fit
        chk = check_fit(ds, scheme, f)
        diag["oracle_max_residual"] = chk["max_residual"]
        diag["oracle_max_relative_difference"] = chk["max_relative_difference"]
    lam = f.lambda_
    payload = {"version": OUTPUT_VERSION, "scheme": scheme.label,
               "gamma": list(scheme.gamma) if scheme.gamma is not None else None,
               "tau": ds.tau, "n": ds.n, "p": ds.p,
               "theta": [float(v) for v in f.theta],
               "se_robust": se[ROBUST], "se_model": se[MODEL],
               "lambda": {"knots": [float(v) for v in lam.knots],
                          "values": [float(v) for v in lam.values]},
               "predictions": preds, "diagnostics": diag}
    return f, payload


def _lambda_csv(f):
    from io import StringIO
    buf = StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "cumhaz"])
    for t, v in zip(f.lambda_.knots, f.lambda_.values):
        w.writerow([f"{t:.17g}", f"{v:.17g}"])
    return buf.getvalue()


def cmd_fit(args, argv):
    started = time.time()
    ds = load_csv(args.data, args.tau, sigma=args.sigma)
    scheme, _ = _scheme(args, ds)
    kinds = {"robust": (ROBUST,), "model": (MODEL,), "both": (ROBUST, MODEL)}[args.variance]
    preds = [_parse_predict(p) for p in args.predict or ()]
    f, payload = fit_payload(ds, scheme, kinds, preds, args.oracle_check)
    _check_output(payload, "fit")
    text = _dump(payload)
    files = {"fit.json": text}
    if args.lambda_csv:
        files["lambda.csv"] = _lambda_csv(f)
    if args.out:
        config = {k: v for k, v in vars(args).items() if k not in ("func", "out")}
        _write_outputs(args.out, files, _manifest(argv, config, [args.data], started))
    else:
        sys.stdout.write(text)
        if args.lambda_csv:
            log.warning("--lambda-csv needs --out; curve not written")
    return 0


# --- calibrate ------------------------------------------------------------

def cmd_calibrate(args, argv):
    started = time.time()
    ds = load_csv(args.data, args.tau, sigma=args.sigma)
    sol = solve_gamma(ds, tol=args.tol, max_iter=args.max_iter)
    sel = ds.selected == 1
    w = sol.weights[sel]
    payload = {"version": OUTPUT_VERSION, "gamma": [float(g) for g in sol.gamma],
               "constraint_residual": [float(r) for r in sol.constraint_residual],
               "max_residual": sol.max_residual, "deviance": sol.deviance,
               "iterations": sol.iterations, "converged": sol.converged,
               "weight_summary": {"selected": int(sel.sum()), "min": float(w.min()),
                                  "max": float(w.max()), "sum": float(w.sum())}}
    if args.weights:
        payload["weights"] = [float(v) for v in sol.weights]
    _check_output(payload, "calibrate")
    text = _dump(payload)
    if args.out:
        config = {k: v for k, v in vars(args).items() if k not in ("func", "out")}
        _write_outputs(args.out, {"calibrate.json": text},
                       _manifest(argv, config, [args.data], started))
    else:
        sys.stdout.write(text)
    return 0


# --- simulate -------------------------------------------------------------

def cmd_simulate(args, argv):
    started = time.time()
    config = load_config(args.config)
    changes = {}
    if args.replicates is not None:
        changes["replicates"] = args.replicates
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.n is not None:
        changes["n"] = args.n
    if changes:
        config = replace(config, **changes)
    report = run_experiment(config, jobs=args.jobs)
    payload = report.to_dict()
    _check_output(payload, "report")
    files = {"report.json": report.to_json(), "report.txt": report.to_text()}
    _write_outputs(args.out, files,
                   _manifest(argv, config.to_dict(), [args.config], started, config.seed))
    sys.stdout.write(report.to_text())
    if report.failed:
        log.error("%d of %d replicates failed", report.failures, report.replicates)
        return 3
    return 0


def build_parser():
    p = _Parser(prog="zee", description="Additive hazards estimation for two-phase samples.")
    p.add_argument("--version", action="version", version=f"zee {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit the additive hazards model to a CSV file")
    f.add_argument("data", help="CSV with time, event, selected, prob, z1.. [vtilde1..]")
    f.add_argument("--tau", type=float, required=True, help="study horizon")
    f.add_argument("--scheme", choices=("rs", "ipw", "cal"), default="rs")
    f.add_argument("--variance", choices=("robust", "model", "both"), default="both")
    f.add_argument("--predict", action="append", metavar="Z@S",
                   help="subject-specific cumulative hazard, e.g. 0.5,1@1.5 (repeatable)")
    f.add_argument("--oracle-check", action="store_true",
                   help="certify the fit with the brute-force equation solver (small data)")
    f.add_argument("--lambda-csv", action="store_true",
                   help="also write lambda.csv with the baseline curve at its knots")
    f.add_argument("--sigma", type=float, default=1e-6, help="floor on sampling probabilities")
    f.add_argument("--out", help="output directory (default: JSON on stdout)")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("calibrate", help="solve for calibrated weights")
    c.add_argument("data")
    c.add_argument("--tau", type=float, default=None,
                   help="horizon (default: largest follow-up time)")
    c.add_argument("--tol", type=float, default=1e-10)
    c.add_argument("--max-iter", type=int, default=50)
    c.add_argument("--weights", action="store_true", help="include every weight in the output")
    c.add_argument("--sigma", type=float, default=1e-6)
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    s.add_argument("--config", required=True, help="TOML or JSON simulation config")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--replicates", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--n", type=int, help="override the cohort size")
    s.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    level = getattr(logging, os.environ.get("ZEE_LOG", "WARNING").upper(), None)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args, argv)
    except ZeeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
