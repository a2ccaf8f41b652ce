"""Command-line entry point.

Subcommands mirror the pipeline phases:

    diffadv train       --config cfg.yaml        # dataset + model training only
    diffadv attack      --config cfg.yaml        # through the attack phase
    diffadv defend-eval --config cfg.yaml        # defense + evaluation, prints the table
    diffadv ablate      --config cfg.yaml --axis L --values 1 5 10 20
    diffadv report      --run-dir runs/runs/<hash>   # re-print + audit a finished run

Without --config the built-in default experiment is used. Exit codes: 0 on
success, 2 on training-gate or config failures, 1 on other errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import ConfigError, ExperimentConfig, RunConflictError, audit_run, run_pipeline
from .metrics import format_report_table
from .models import TrainingDiverged, TrainingGateError

GATE_EXIT = 2


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
    else:
        cfg = ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "output_root", None):
        overrides["output_root"] = args.output_root
    if getattr(args, "output_dir", None):
        overrides["output_dir"] = args.output_dir
    if getattr(args, "eval_images", None):
        overrides["eval_images"] = args.eval_images
    if getattr(args, "axis", None):
        overrides["ablation_axis"] = args.axis
        overrides["ablation_values"] = tuple(args.values or ())
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    return cfg.validate()


def _print_summary(result: dict) -> None:
    print(f"run dir: {result['run_dir']}")
    for phase, status in result["phases"].items():
        print(f"  phase {phase}: {status}")
    print(format_report_table(result["reports"]))


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="diffadv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output-root", type=str, default=None)
        p.add_argument("--output-dir", type=str, default=None)
        p.add_argument("--eval-images", type=int, default=None)
        p.add_argument("--force", action="store_true", help="overwrite outputs from a different config")

    for name, help_ in (
        ("train", "generate the dataset and train all models"),
        ("attack", "run the attack grid (training first if needed)"),
        ("defend-eval", "defended evaluation and report generation"),
    ):
        p = sub.add_parser(name, help=help_)
        common(p)

    p = sub.add_parser("ablate", help="run the grid over an ablation axis")
    common(p)
    p.add_argument("--axis", choices=("epsilon", "iterations", "L", "tau"), required=True)
    p.add_argument("--values", type=float, nargs="+", required=True)

    p = sub.add_parser("report", help="print the metrics table and audit a run")
    p.add_argument("--run-dir", type=str, required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            root = Path(args.run_dir)
            rows = json.loads((root / "reports" / "metrics.json").read_text())
            print((root / "reports" / "metrics.txt").read_text())
            audit = audit_run(root)
            print(f"audit: {audit['verified']}/{audit['rows']} rows verified, {audit['orphans']} orphans")
            return 0 if audit["orphans"] == 0 else 1

        cfg = _load_config(args)
        if args.command == "ablate" and cfg.ablation_axis in ("iterations", "L", "tau"):
            from dataclasses import replace

            cfg = replace(cfg, ablation_values=tuple(int(v) for v in cfg.ablation_values)).validate()
        through = {"train": "train", "attack": "attack"}.get(args.command, "evaluate")
        result = run_pipeline(cfg, force=args.force, through=through)
        if through in ("train", "attack"):
            print(f"run dir: {result['run_dir']}")
            for phase, status in result["phases"].items():
                print(f"  phase {phase}: {status}")
        else:
            _print_summary(result)
        return 0
    except (ConfigError, TrainingGateError, TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return GATE_EXIT
    except RunConflictError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
