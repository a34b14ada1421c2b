"""Command-line entry point: ``promptmix <stage> --config run.toml``.

Exit codes: 0 success, 2 validation error, 3 stage-order error,
4 numeric or training failure, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import load_config
from .errors import (BankCorruptError, BankVersionError, NumericError, PromptMixError, StageOrderError,
                     ValidationError)
from .toy import write_toy

EXIT_OK, EXIT_OTHER, EXIT_VALIDATION, EXIT_STAGE_ORDER, EXIT_NUMERIC = 0, 1, 2, 3, 4

ABLATIONS = ("no-denoise", "no-instruction", "no-metadata", "no-attribute-prompt", "no-exemplars", "no-syn")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--run-dir", help="override run_dir")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set tune.max_steps=50")
    for flag in ABLATIONS:
        p.add_argument(f"--{flag}", action="store_true", help=f"ablation: set ablation.{flag.replace('-', '_')}")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptmix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("tune", "generate", "denoise", "train-student", "evaluate", "run-all"):
        p = sub.add_parser(name)
        _add_common(p)
        if name in ("generate", "run-all"):
            p.add_argument("--bank", help="use this checkpoint instead of the tune artifact")
    toy = sub.add_parser("init-toy", help="write the constructed toy task and a smoke config")
    toy.add_argument("directory")
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument("--max-steps", type=int, default=20)
    return parser


def _overrides(args) -> list[str]:
    items = list(args.set)
    if args.run_dir:
        items.append(f"run_dir={args.run_dir}")
    if args.seed is not None:
        items.append(f"seed={args.seed}")
    for flag in ABLATIONS:
        if getattr(args, flag.replace("-", "_")):
            items.append(f"ablation.{flag.replace('-', '_')}=true")
    return items


def _student_table(metrics: dict) -> str:
    rows = sorted(metrics.get("metrics", {}).items())
    rows += [(f"count:{k}", v) for k, v in sorted(metrics["counts"].items())]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v:.4f}" if isinstance(v, float) else f"{k.ljust(width)}  {v}"
                     for k, v in rows)


def run(args) -> int:
    if args.command == "init-toy":
        print(write_toy(args.directory, args.seed, args.max_steps))
        return EXIT_OK
    cfg = load_config(args.config, _overrides(args))
    ctx = pipeline.prepare(cfg)
    bank = getattr(args, "bank", None)
    if args.command == "tune":
        report = pipeline.cmd_tune(ctx)
        print(f"steps {report['steps_run']}  best_step {report['best_step']}  "
              f"final_loss {report['loss_curve'][-1][1]:.4f}" if report["loss_curve"] else "no steps run")
    elif args.command == "generate":
        print(f"{len(pipeline.cmd_generate(ctx, bank))} candidates")
    elif args.command == "denoise":
        print(f"{len(pipeline.cmd_denoise(ctx))} synthesized examples")
    elif args.command == "train-student":
        print(_student_table(pipeline.cmd_train_student(ctx)))
    elif args.command == "evaluate":
        print(pipeline.cmd_evaluate(ctx).table())
    elif args.command == "run-all":
        report = pipeline.cmd_run_all(ctx, bank)
        if report is None:
            with open(ctx.path("student", "metrics.json"), encoding="utf-8") as fh:
                print(_student_table(json.load(fh)))
        else:
            print(report.table())
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except StageOrderError as exc:
        print(f"stage-order error: {exc}", file=sys.stderr)
        return EXIT_STAGE_ORDER
    except (ValidationError, BankCorruptError, BankVersionError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PromptMixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
