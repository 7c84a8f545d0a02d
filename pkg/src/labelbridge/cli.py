"""Command-line entry point: run, sweep, verify, gen-data."""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import data, harness, verify


def _load_config(args):
    cfg = harness.ExperimentConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.reps is not None:
        changes["repetitions"] = args.reps
    return dataclasses.replace(cfg, **changes).validate() if changes else cfg


def _summary(report):
    for row in report.rows:
        label = "" if report.axis is None else f"{report.axis}={row.axis_value}  "
        print(f"{label}InsAcc {row.ins_acc_mean:.4f} ± {row.ins_acc_std:.4f}  "
              f"ClsAcc {row.cls_acc_mean:.4f} ± {row.cls_acc_std:.4f}  (R={len(row.trials)})")


def cmd_run(args):
    report = harness.run(_load_config(args))
    _summary(report)
    if args.out:
        for path in report.write(args.out):
            print(f"wrote {path}")
    return 0


def cmd_sweep(args):
    values = harness.parse_axis_values(args.axis, args.values)
    report = harness.run_sweep(_load_config(args), args.axis, values)
    _summary(report)
    if args.out:
        for path in report.write(args.out, stem=f"sweep_{args.axis}"):
            print(f"wrote {path}")
    return 0


def cmd_verify(args):
    results = verify.run_all()
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def cmd_gen_data(args):
    with open(args.spec, encoding="utf-8") as f:
        spec = json.load(f)
    allowed = {"n_classes", "per_class_count", "input_shape", "separation", "seed"}
    unknown = set(spec) - allowed
    if unknown:
        raise harness.ConfigError(f"unknown dataset keys: {sorted(unknown)}")
    ds = data.gen_synthetic_dataset(
        spec["n_classes"], spec["per_class_count"], spec["input_shape"],
        spec.get("separation", 3.0), spec.get("seed", 0),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, inputs=ds.inputs, labels=ds.labels, n_classes=ds.n_classes)
    print(f"wrote {len(ds)} samples to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="labelbridge", description="Gradient-bridge label leakage lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def overrides(p):
        p.add_argument("--seed", type=int, help="override master seed")
        p.add_argument("--reps", type=int, help="override repetitions")
        p.add_argument("--out", help="directory for JSON and CSV reports")

    p = sub.add_parser("run", help="run one configuration")
    p.add_argument("config")
    overrides(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep one axis of a configuration")
    p.add_argument("config")
    p.add_argument("--axis", required=True, choices=harness.AXES)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    overrides(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="check the gradient identities numerically")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-data", help="write a synthetic dataset to .npz")
    p.add_argument("spec", help="JSON file with n_classes, per_class_count, input_shape, ...")
    p.add_argument("out")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
