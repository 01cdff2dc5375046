"""Command-line front end: ``splinegee fit`` and ``splinegee simulate``.

Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure
(non-convergence, or too many failed replications).  Artifacts are written
under ``--out`` (default ``$SPLINEGEE_OUTPUT_DIR`` or ``./splinegee_out``),
and every path written is printed on stdout.

``simulate --config FILE`` reads a JSON object whose keys are
:class:`~splinegee.simulation.SimulationConfig` fields; a run manifest is
accepted too (its ``config`` entry is used).  Explicit flags override the
file, which overrides the defaults.
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
from datetime import datetime, timezone

import numpy as np

from splinegee import __version__
from splinegee.covariance import Structure
from splinegee.data import CsvSchema, dataset_summary, read_csv, validate
from splinegee.errors import (
    CannotEstimateError,
    GeeError,
    NonConvergenceError,
    SchemaError,
    SelectionError,
    StudyError,
)
from splinegee.estimator import FitConfig, fit
from splinegee.inference import wald_report
from splinegee.selection import CvPlan, cross_validate
from splinegee.simulation import SimulationConfig, run_study
from splinegee.spline_basis import build_additive_basis

log = logging.getLogger("splinegee")

OUT_ENV = "SPLINEGEE_OUTPUT_DIR"


def _csv_list(text: str | None) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()] if text else []


def _int_list(text: str) -> list[int]:
    return [int(s) for s in _csv_list(text)]


def parse_knot_grid(text: str, D: int):
    """``"0:10"`` (shared, inclusive) or ``"0:10,0:5"`` (one range per dimension)."""
    def one(part: str) -> list[int]:
        if ":" in part:
            lo, hi = part.split(":")
            return list(range(int(lo), int(hi) + 1))
        return [int(part)]

    parts = _csv_list(text)
    if len(parts) == 1:
        return one(parts[0])
    if len(parts) != D:
        raise ValueError(f"knot grid {text!r} has {len(parts)} ranges for {D} dimensions")
    return [one(p) for p in parts]


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    return str(v)


class _Artifacts:
    def __init__(self, outdir: str):
        self.outdir = outdir
        self.paths: list[str] = []
        os.makedirs(outdir, exist_ok=True)

    def _path(self, name: str) -> str:
        path = os.path.join(self.outdir, name)
        self.paths.append(path)
        print(f"wrote {path}")
        return path

    def table(self, name: str, header, rows) -> str:
        path = self._path(name)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        return path

    def text(self, name: str, text: str) -> str:
        path = self._path(name)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        return path

    def manifest(self, argv, subcommand, config, seeds, inputs, started, t0) -> str:
        payload = {
            "command": ["splinegee", *argv],
            "subcommand": subcommand,
            "version": __version__,
            "config": config,
            "seeds": seeds,
            "inputs": inputs,
            "artifacts": list(self.paths),
            "timing": {"started": started, "elapsed_seconds": round(time.perf_counter() - t0, 3)},
        }
        path = os.path.join(self.outdir, "manifest.json")
        print(f"wrote {path}")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _default_out() -> str:
    return os.environ.get(OUT_ENV, "splinegee_out")


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args, argv) -> int:
    t0, started = time.perf_counter(), datetime.now(timezone.utc).isoformat()
    schema = CsvSchema(cluster=args.cluster, response=args.response, x=_csv_list(args.x), t=_csv_list(args.t),
                       order=args.order, intercept=args.intercept)
    try:
        data = read_csv(args.input, schema)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: cannot read {args.input}: {exc}", file=sys.stderr)
        return 1
    for finding in validate(data):
        log.warning("%s", finding.message)

    structure = Structure.parse(args.corr)
    cfg = FitConfig(max_iter=args.max_iter, tol=args.tol, corr_update_rounds=args.corr_rounds)
    notes: list[str] = []
    if structure is not Structure.WI and data.sizes.max() < 2:
        msg = f"no clusters with two or more observations; cannot estimate {structure.value} correlation, using wi"
        log.warning(msg)
        notes.append(msg)
        structure = Structure.WI

    art = _Artifacts(args.out)
    config_snapshot = {k: v for k, v in vars(args).items() if k != "func"}
    inputs = {args.input: _sha256(args.input)}
    seeds = {"cv_folds": args.seed}
    exit_code = 0
    try:
        try:
            if args.cv:
                plan = CvPlan(folds=args.folds, knot_grid=parse_knot_grid(args.knot_grid, data.D), seed=args.seed,
                              rule=args.knot_rule)
                cv = cross_validate(data, args.link, structure, plan, args.degree, cfg, jobs=args.jobs)
                knots = cv.chosen
                art.table("cv_scores.csv", ["knots", "score", "valid", "error"],
                          [["/".join(map(str, r["knots"])), r["score"], int(r["valid"]), r["error"]] for r in cv.table])
            else:
                knots = _int_list(args.knots) if args.knots else [3] * data.D
                if len(knots) == 1 and data.D > 1:
                    knots = knots * data.D
                if len(knots) != data.D:
                    raise ValueError(f"--knots gives {len(knots)} counts for {data.D} nonparametric covariates")
            basis = build_additive_basis(data.pooled_T(), knots, args.degree, args.knot_rule)
            try:
                res = fit(data, basis, args.link, structure, cfg, rho=args.rho)
            except CannotEstimateError as exc:
                msg = f"{exc}; falling back to wi"
                log.warning(msg)
                notes.append(msg)
                structure = Structure.WI
                res = fit(data, basis, args.link, structure, cfg)
        except (ValueError, SelectionError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        except NonConvergenceError as exc:
            print(f"error: {exc}", file=sys.stderr)
            beta = exc.theta[: data.K] if exc.theta is not None else np.full(data.K, np.nan)
            art.table("coefficients.csv", ["parameter", "estimate", "se", "z"],
                      [[n, b, np.nan, np.nan] for n, b in zip(data.x_names, beta)])
            art.table("fit_summary.csv", ["key", "value"],
                      [["converged", 0], ["iterations", exc.iterations], ["ee_norm", exc.ee_norm],
                       ["error", str(exc)]])
            exit_code = 2
            return exit_code
        except GeeError as exc:
            print(f"error: {exc}", file=sys.stderr)
            exit_code = 2
            return exit_code

        art.table("coefficients.csv", ["parameter", "estimate", "se", "z"],
                  [[r["parameter"], r["estimate"], r["se"], r["z"]] for r in wald_report(res)])
        curve_rows = []
        for d, (name, b) in enumerate(zip(data.t_names, basis.bases)):
            grid = np.linspace(b.boundary[0], b.boundary[1], 100)
            for t, v in zip(grid, res.component(d, grid)):
                curve_rows.append([name, t, v])
        art.table("curves.csv", ["dimension", "t", "fitted"], curve_rows)
        summary = dataset_summary(data)
        art.table("fit_summary.csv", ["key", "value"], [
            ["link", res.link.kind], ["structure", res.spec.structure.value], ["rho", res.spec.rho],
            ["sigma2", res.spec.sigma2], ["knots", "/".join(map(str, knots))], ["degree", args.degree],
            ["converged", int(res.converged)], ["iterations", res.iterations], ["ee_norm", res.ee_norm],
            ["objective", res.objective], ["n_clusters", summary["n_clusters"]], ["n_obs", summary["n_obs"]],
            ["diagnostics", ";".join(res.diagnostics + notes)],
        ])
        if args.info_matrix:
            art.table("info_inv.csv", ["parameter", *data.x_names],
                      [[n, *row] for n, row in zip(data.x_names, res.info_inv)])
        return exit_code
    finally:
        art.manifest(argv, "fit", config_snapshot, seeds, inputs, started, t0)


# ---------------------------------------------------------------------------
# simulate

SIM_FLAGS = {
    "setup": "setup", "n": "n", "rho": "rho", "reps": "replications", "seed": "seed",
    "structures": "fit_structures", "fixed_knots": "fixed_knots", "knot_grid": "knot_grid", "folds": "folds",
    "error_sd": "error_sd", "degree": "degree", "jobs": "jobs", "tol": "tol", "max_iter": "max_iter",
    "corr_rounds": "corr_update_rounds",
}


def load_config_file(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    if "config" in payload and "subcommand" in payload:
        payload = payload["config"]
    return payload


def simulation_config(args) -> SimulationConfig:
    values: dict = {}
    if args.config:
        values.update(load_config_file(args.config))
    for flag, key in SIM_FLAGS.items():
        v = getattr(args, flag)
        if v is None:
            continue
        if flag == "structures":
            v = _csv_list(v)
        elif flag == "knot_grid":
            v = parse_knot_grid(v, 1)
        values[key] = v
    return SimulationConfig.from_dict(values)


def cmd_simulate(args, argv) -> int:
    t0, started = time.perf_counter(), datetime.now(timezone.utc).isoformat()
    try:
        config = simulation_config(args)
    except (ValueError, OSError, GeeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    art = _Artifacts(args.out)
    code = 0
    try:
        report = run_study(config)
    except StudyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        report, code = exc.report, 2
    art.text("replications.csv", report.replications_csv())
    art.text("aggregate.csv", report.aggregate_csv())
    art.text("aggregate_x1e5.csv", report.scaled_csv())
    inputs = {args.config: _sha256(args.config)} if args.config else {}
    art.manifest(argv, "simulate", config.to_dict(), {"master": config.seed}, inputs, started, t0)
    return code


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splinegee", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a partially linear additive model to a long-format CSV")
    f.add_argument("input")
    f.add_argument("--cluster", default="cluster")
    f.add_argument("--response", default="y")
    f.add_argument("--x", default="", help="comma-separated parametric covariate columns")
    f.add_argument("--t", default="", help="comma-separated nonparametric covariate columns")
    f.add_argument("--order", default=None, help="within-cluster observation index column")
    f.add_argument("--intercept", default=None, help="declared all-ones column among --x")
    f.add_argument("--link", choices=["identity", "log"], default="identity")
    f.add_argument("--corr", choices=["wi", "ex", "ar1"], default="wi")
    f.add_argument("--rho", type=float, default=None, help="fix rho instead of estimating it")
    f.add_argument("--degree", type=int, default=3)
    f.add_argument("--knots", default=None, help="interior knots per dimension, e.g. 3,3")
    f.add_argument("--knot-rule", choices=["quantile", "uniform"], default="quantile")
    f.add_argument("--cv", action="store_true", help="choose knots by delete-cluster-out CV")
    f.add_argument("--knot-grid", default="0:10")
    f.add_argument("--folds", type=int, default=5)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--tol", type=float, default=1e-8)
    f.add_argument("--max-iter", type=int, default=100)
    f.add_argument("--corr-rounds", type=int, default=2)
    f.add_argument("--info-matrix", action="store_true", help="also write (n I_n)^{-1}")
    f.add_argument("--jobs", type=int, default=1)
    f.add_argument("--out", default=None)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run a Monte Carlo study for one setup")
    s.add_argument("--config", default=None, help="JSON config (or manifest) file")
    s.add_argument("--setup", default=None, help="s1..s5")
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--rho", type=float, default=None)
    s.add_argument("--reps", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--structures", default=None, help="e.g. wi,ex,ar1")
    s.add_argument("--fixed-knots", type=int, default=None)
    s.add_argument("--knot-grid", default=None, help="CV range, default 1:7")
    s.add_argument("--folds", type=int, default=None)
    s.add_argument("--error-sd", type=float, default=None)
    s.add_argument("--degree", type=int, default=None)
    s.add_argument("--tol", type=float, default=None)
    s.add_argument("--max-iter", type=int, default=None)
    s.add_argument("--corr-rounds", type=int, default=None)
    s.add_argument("--jobs", type=int, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if args.out is None:
        args.out = _default_out()
    return args.func(args, argv)


if __name__ == "__main__":
    sys.exit(main())
