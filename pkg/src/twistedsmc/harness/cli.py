"""Command line interface: ``simulate | run | learn | summarize | oracle-check``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from .checks import run_checks
from .config import ConfigError, load_config, load_params
from .experiments import (
    build_model,
    learn_schedule,
    read_records,
    run_experiment,
    simulate_data,
    write_series,
)
from .summarize import PLOT_COLUMNS, SUMMARY_COLUMNS, plot_rows, reference_from_records, summarize, to_csv


def _cmd_simulate(args):
    params = load_params(args.params, args.model) if args.params else None
    if params is None:
        from .config import LGSSM_DEFAULTS, SV_GENERATE
        params = dict(LGSSM_DEFAULTS) if args.model == "lgssm" else {**SV_GENERATE, "n": 2000}
    y = simulate_data(args.model, params, args.seed, n=args.n)
    write_series(args.out, y, "y" if args.model == "lgssm" else "r")
    return 0


def _cmd_run(args):
    cfg = load_config(args.config)
    if args.repetitions is not None:
        cfg.repetitions = args.repetitions
        cfg.validate()

    def progress(rep, recs):
        if args.verbose:
            print(f"rep {rep}: " + ", ".join(f"{r['method']}={r['log_z']:.4f}" for r in recs),
                  file=sys.stderr)

    run_experiment(cfg, args.out, args.workers, progress)
    return 0


def _cmd_learn(args):
    cfg = load_config(args.config)
    model = build_model(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0, 2]))
    schedule, _, reports = learn_schedule(cfg, model, rng)
    from ..twisting import save_schedule

    save_schedule(schedule, args.out)
    if args.report:
        with open(args.report, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "p", "beta", "alpha_pre", "alpha_post", "rmse", "rho"])
            for it, rows in enumerate(reports):
                for r in rows:
                    w.writerow([it, r["p"], repr(r["beta"]), repr(r["alpha_pre"]),
                                repr(r["alpha_post"]), repr(r["rmse"]), repr(float(r["rho"]))])
    return 0


def _cmd_summarize(args):
    records = read_records(args.records)
    if args.reference in ("records", None):
        ref = reference_from_records(records)
    elif args.reference == "kalman":
        ref = reference_from_records(records, expected="kalman")
    else:
        try:
            ref = float(args.reference)
        except ValueError:
            ref = reference_from_records(records, expected=args.reference)
    text = to_csv(summarize(records, ref, args.baseline), SUMMARY_COLUMNS)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.plot_out:
        with open(args.plot_out, "w") as fh:
            fh.write(to_csv(plot_rows(records, ref), PLOT_COLUMNS))
    return 0


def _cmd_oracle_check(args):
    results = run_checks(args.seed, args.cases)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def build_parser():
    ap = argparse.ArgumentParser(prog="twistedsmc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a data set")
    p.add_argument("--model", choices=("lgssm", "sv"), required=True)
    p.add_argument("--params", help="parameter file (TOML)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, help="override the series length")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("run", help="run an experiment and write records")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="records CSV (default: config output)")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--workers", type=int, help="process pool size (default: $TWISTEDSMC_WORKERS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("learn", help="learn a twist schedule and save it")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="schedule file (TOML)")
    p.add_argument("--report", help="learning report CSV")
    p.set_defaults(func=_cmd_learn)

    p = sub.add_parser("summarize", help="summarise a records file")
    p.add_argument("--records", required=True)
    p.add_argument("--reference", default="records",
                   help="'records', 'kalman', a reference source label or a log Z value")
    p.add_argument("--baseline", default="tpf-opt")
    p.add_argument("--out")
    p.add_argument("--plot-out")
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("oracle-check", help="run the finite-state oracle property suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=100)
    p.set_defaults(func=_cmd_oracle_check)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
