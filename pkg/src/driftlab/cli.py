"""Command line entry point: ``driftlab run|toy|ablate|analyze``.

Exit codes: 0 success, 2 configuration or input error, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .data import default_drift_scenario
from .errors import ConfigError, DriftlabError, InvariantViolation, ParameterError
from .evaluation import read_jsonl, write_histogram_csv
from .experiment import ABLATIONS, load_config, resolve_output_dir, run_ablation, run_experiment
from .toy import DEFAULT_SDC_SIGMA, run_toy

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3


def _out_dir(arg, fallback):
    return Path(arg or os.environ.get("DRIFTLAB_OUT") or fallback)


def cmd_run(args):
    cfg = load_config(args.config)
    res = run_experiment(cfg, output_dir=args.out)
    for row in res.aggregate:
        print(
            f"{row['method']:<20} A_last {100 * row['a_last_mean']:6.2f} ± {100 * row['a_last_std']:5.2f}"
            f"   A_inc {100 * row['a_inc_mean']:6.2f} ± {100 * row['a_inc_std']:5.2f}"
        )
    print(f"wrote {res.output_dir}")
    return EXIT_OK


def cmd_toy(args):
    if args.scale == 0 or not math.isfinite(args.scale):
        raise ParameterError("--scale must be a finite non-zero number")
    if args.sdc_sigma <= 0:
        raise ParameterError("--sdc-sigma must be positive")
    scenario = default_drift_scenario(
        seed=args.seed, theta=args.theta, scale=args.scale, translation=(args.tx, args.ty), n=args.n
    )
    result = run_toy(scenario, target_class=0, sdc_sigma=args.sdc_sigma)
    out = _out_dir(args.out, "driftlab-toy")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "toy-samples.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phase", "class", "x", "y"])
        for phase, xs, ys in (
            ("before", scenario.x_before, scenario.y_before),
            ("after", scenario.x_after, scenario.y_after),
        ):
            for (a, b), c in zip(xs, ys):
                w.writerow([phase, int(c), repr(float(a)), repr(float(b))])
    with open(out / "toy-estimates.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "x", "y", "error"])
        for name, v, err in (
            ("old", result.old_mean, float(np.linalg.norm(result.old_mean - result.true_mean))),
            ("true", result.true_mean, 0.0),
            ("sdc", result.sdc_estimate, result.sdc_error),
            ("ldc", result.ldc_estimate, result.ldc_error),
        ):
            w.writerow([name, repr(float(v[0])), repr(float(v[1])), repr(err)])
    print(f"SDC error {result.sdc_error:.3e}  LDC error {result.ldc_error:.3e}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = load_config(args.config)
    rows, agg = run_ablation(args.kind, cfg, points=args.points, output_dir=args.out)
    for row in agg:
        print(
            f"{args.kind} {row['point']!s:<12} A_last {100 * row['a_last_mean']:6.2f} ± {100 * row['a_last_std']:5.2f}"
        )
    means = [round(r["a_last_mean"], 12) for r in agg]
    if len(means) != len(set(means)):
        print("note: tied sweep points (identical mean A_last)")
    print(f"wrote {resolve_output_dir(cfg, args.out)}")
    return EXIT_OK


def cmd_analyze(args):
    """Cosine-distance histograms per method and task from a ``report.jsonl``."""
    try:
        rows = read_jsonl(args.report)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read report: {exc}") from exc
    by_task = defaultdict(lambda: defaultdict(list))
    for row in rows:
        if row.get("cosine"):
            by_task[row["task"]][row["method"]].extend(row["cosine"].values())
    if not by_task:
        raise ConfigError("report has no cosine distances (needs at least two tasks)")
    out = _out_dir(args.out, Path(args.report).parent)
    out.mkdir(parents=True, exist_ok=True)
    summary = [["method", "task", "n", "mean", "std"]]
    for task in sorted(by_task):
        methods = by_task[task]
        upper = max(max(v) for v in methods.values())
        edges = np.linspace(0.0, max(upper, 1e-12), args.bins + 1)
        for method in sorted(methods):
            d = np.asarray(methods[method])
            counts, _ = np.histogram(d, bins=edges)
            safe = method.replace("[", "-").replace("]", "")
            write_histogram_csv(counts, edges, out / f"cosine-{safe}-task{task}.csv")
            summary.append([method, task, len(d), repr(float(d.mean())), repr(float(d.std()))])
    with open(out / "cosine-summary.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(summary)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="driftlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a continual prototype experiment from a JSON config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides config and DRIFTLAB_OUT)")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("toy", help="2D drift toy: SDC vs learned projector")
    t.add_argument("--theta", type=float, default=0.0, help="rotation in radians")
    t.add_argument("--scale", type=float, default=1.0)
    t.add_argument("--tx", type=float, default=0.0)
    t.add_argument("--ty", type=float, default=0.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--sdc-sigma", type=float, default=DEFAULT_SDC_SIGMA)
    t.add_argument("--n", type=int, default=200, help="samples per class")
    t.add_argument("--out")
    t.set_defaults(func=cmd_toy)

    a = sub.add_parser("ablate", help="sweep one axis of an experiment")
    a.add_argument("kind", help=f"one of {', '.join(ABLATIONS)}")
    a.add_argument("config")
    a.add_argument("--points", nargs="+", help="override the sweep points")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    z = sub.add_parser("analyze", help="cosine-distance histograms from report.jsonl")
    z.add_argument("report")
    z.add_argument("--bins", type=int, default=20)
    z.add_argument("--out")
    z.set_defaults(func=cmd_analyze)
    return p


def _coerce_points(kind, points):
    if points is None:
        return None
    try:
        if kind == "projector-arch":
            return points
        if kind == "label-fraction":
            return [float(p) for p in points]
        return [int(p) for p in points]
    except ValueError as exc:
        raise ConfigError(f"bad sweep point: {exc}") from exc


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "ablate":
            if args.kind not in ABLATIONS:
                raise ConfigError(f"unknown ablation kind {args.kind!r}; choose from {', '.join(ABLATIONS)}")
            args.points = _coerce_points(args.kind, args.points)
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except DriftlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
