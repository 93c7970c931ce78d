"""Command-line front end: simulate, estimate, verify, montecarlo.

Exit codes: 0 success, 2 scenario validation error, 3 numerical failure,
4 verification failure. The default output root is $PREOBS_OUT (falling
back to ./preobs-out), with one directory per scenario run.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .errors import (
    IntegrationDivergedError,
    NoConvergenceError,
    ObserverStepError,
    PreobsError,
    RankDeficientError,
    ScenarioError,
)
from .montecarlo import run_montecarlo
from .runner import (
    available_estimators,
    run_estimator,
    simulate_scenario,
    write_report,
    write_simulation,
)
from .scenario import load_scenario
from .verify import format_table, run_verify

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_VERIFY = 4

_NUMERICAL_ERRORS = (
    IntegrationDivergedError,
    RankDeficientError,
    NoConvergenceError,
    ObserverStepError,
    np.linalg.LinAlgError,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="preobs",
        description="Preintegration / PEBO state-estimation scenarios",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("scenario", help="path to a scenario YAML file")
        p.add_argument("--out", default=None, help="output directory for this run")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")

    p_sim = sub.add_parser("simulate", help="generate truth and measurement files")
    common(p_sim)

    p_est = sub.add_parser("estimate", help="run estimators and write reports")
    common(p_est)
    p_est.add_argument("--estimator", default=None, help="run a single named estimator")

    p_ver = sub.add_parser("verify", help="run the cross-module identity checks")
    common(p_ver)
    p_ver.add_argument(
        "--tolerance", type=float, default=None,
        help="override every check tolerance (negative-control use)",
    )

    p_mc = sub.add_parser("montecarlo", help="estimator statistics over repeated trials")
    common(p_mc)
    p_mc.add_argument("--trials", type=int, default=100, help="number of trials (>= 2)")
    p_mc.add_argument(
        "--jobs", type=int, default=os.cpu_count() or 1,
        help="worker processes (default: logical processors)",
    )
    return parser


def _outdir(args, name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("PREOBS_OUT", "preobs-out")
    return Path(root) / name


def _load(args):
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc.seed = int(args.seed)
    return sc


def cmd_simulate(args) -> int:
    sc = _load(args)
    t0 = time.perf_counter()
    data = simulate_scenario(sc)
    outdir = _outdir(args, sc.name)
    written = write_simulation(data, outdir)
    dt = time.perf_counter() - t0
    print(f"{sc.name}: wrote {len(written)} files to {outdir} ({dt:.2f} s)")
    return EXIT_OK


def cmd_estimate(args) -> int:
    sc = _load(args)
    if args.estimator is not None:
        names = [args.estimator]
    elif sc.estimators:
        names = list(sc.estimators)
    else:
        raise ScenarioError(
            "no estimators configured; pass --estimator or add an estimators block "
            f"(valid names: {', '.join(available_estimators(sc))})",
            field="estimators",
        )
    t0 = time.perf_counter()
    data = simulate_scenario(sc)
    outdir = _outdir(args, sc.name)
    write_simulation(data, outdir)
    results = [run_estimator(sc, data, name) for name in names]
    write_report(outdir, sc, results)
    dt = time.perf_counter() - t0
    for res in results:
        worst = float(np.max(res.error_norms)) if res.error_norms is not None else float("nan")
        print(f"{sc.name}/{res.name}: max keyframe error {worst:.3e}")
    print(f"{sc.name}: report written to {outdir} ({dt:.2f} s)")
    return EXIT_OK


def cmd_verify(args) -> int:
    sc = _load(args)
    results = run_verify(sc, tolerance=args.tolerance)
    table = format_table(results)
    outdir = _outdir(args, sc.name)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "verify.txt").write_text(table + "\n")
    print(table)
    for r in results:
        if r.detail and r.name == "weight-sweep-limit":
            print(f"  {r.name}: {r.detail}")
    if all(r.passed for r in results):
        return EXIT_OK
    return EXIT_VERIFY


def cmd_montecarlo(args) -> int:
    sc = _load(args)
    import yaml

    raw_cfg = yaml.safe_load(Path(args.scenario).read_text())
    if args.seed is not None and isinstance(raw_cfg, dict):
        raw_cfg.setdefault("noise", {})["seed"] = int(args.seed)
    t0 = time.perf_counter()
    result = run_montecarlo(sc, trials=args.trials, jobs=max(1, args.jobs), raw_cfg=raw_cfg)
    outdir = _outdir(args, sc.name)
    outdir.mkdir(parents=True, exist_ok=True)
    io.write_csv(outdir / "trials.csv", ["trial", "estimator", "error"], result.rows())
    summary = {
        "scenario": sc.name,
        "trials": result.trials,
        "rmse_theta": result.rmse_theta,
        "keyframe_rmse": result.keyframe_rmse,
        "consistency_ratio": result.consistency_ratio,
        "e_end_cov": result.e_end_cov,
        "Pi_end": result.Pi_end,
        "failed_trials": result.failed,
    }
    io.write_json(outdir / "montecarlo.json", summary)
    dt = time.perf_counter() - t0
    for name, rmse in sorted(result.rmse_theta.items()):
        print(f"{sc.name}/{name}: parameter RMSE {rmse:.4e}")
    print(
        f"{sc.name}: consistency ratio {result.consistency_ratio:.3f}, "
        f"{len(result.failed)} failed, {dt:.2f} s"
    )
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "simulate": cmd_simulate,
        "estimate": cmd_estimate,
        "verify": cmd_verify,
        "montecarlo": cmd_montecarlo,
    }
    try:
        return handlers[args.command](args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PreobsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
