"""Command-line entry points: ``evgraph <command> --config run.yaml --set key=value ...``."""
from __future__ import annotations

import argparse
import json
import sys

import yaml

from . import harness


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evgraph", description="Event-graph learning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", help="YAML run config (defaults apply to missing keys)")
        c.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, e.g. --set distill.lam=0.5")
        return c

    c = command("gen-data", "write synthetic event files and split manifests")
    c.add_argument("--out", help="dataset directory (default: content-addressed under the run root)")

    for name in ("train-teacher", "train-student"):
        c = command(name, f"{name.split('-')[1]} training run(s)")
        c.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to run")
        if name == "train-student":
            c.add_argument("--check-attention", action="store_true",
                           help="assert every attention row sums to 1 at every step")

    c = command("evaluate", "score saved weights on a manifest")
    c.add_argument("--weights", required=True, help="weight file prefix (without .bin/.json)")
    c.add_argument("--manifest", required=True)
    c.add_argument("--time-span", type=float, default=1.0, help="keep only this leading fraction of each stream")
    c.add_argument("--latency-repeats", type=int, default=100)
    c.add_argument("--out", help="directory for report.json and timing.json")

    c = command("export-embeddings", "write per-sample head embeddings as CSV")
    c.add_argument("--weights", required=True)
    c.add_argument("--manifest", required=True)
    c.add_argument("--out", required=True, help="CSV path")

    c = command("ablation-grid", "run an ablation grid over EDAL or distillation variants")
    c.add_argument("--axis", required=True, choices=("edal", "distill"))
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--datasets", help="YAML mapping of dataset name -> dataset overrides")

    c = command("benchmark", "single-sample latency including representation building")
    c.add_argument("--weights", help="weights to time (default: freshly initialised student and teacher)")
    c.add_argument("--repeats", type=int, default=100)
    c.add_argument("--out")
    return p


def run(args) -> object:
    cfg = harness.RunConfig.load(args.config, args.overrides)
    if args.command == "gen-data":
        return harness.cmd_gen_data(cfg, args.out)
    if args.command == "train-teacher":
        return harness.cmd_train_teacher(cfg, args.seeds)
    if args.command == "train-student":
        return harness.cmd_train_student(cfg, args.seeds, args.check_attention)
    if args.command == "evaluate":
        report = harness.cmd_evaluate(cfg, args.weights, args.manifest, args.time_span, args.out,
                                      args.latency_repeats)
        return report.to_json()
    if args.command == "export-embeddings":
        return harness.cmd_export_embeddings(cfg, args.weights, args.manifest, args.out)
    if args.command == "ablation-grid":
        datasets = yaml.safe_load(open(args.datasets).read()) if args.datasets else None
        run_dir = harness.cmd_ablation_grid(cfg, args.axis, args.seeds, datasets)
        return (run_dir / "summary.md").read_text().rstrip()
    if args.command == "benchmark":
        return json.dumps(harness.cmd_benchmark(cfg, args.weights, args.repeats, args.out), indent=2)
    raise harness.ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        out = run(args)
    except Exception as exc:  # every failure maps to a nonzero exit with a one-line reason
        print(f"evgraph {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
