"""Command-line entry point.

Subcommands: run, train, ablate, sweep, inspect-checkpoint, report.
Exit codes: 0 ok, 2 configuration error, 3 data error, 4 checkpoint
error, 1 anything else. Failures print one `error[category]: message`
line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, parse_config
from .datasets import IdxError
from .experiments import (
    CheckpointError,
    DataError,
    describe_checkpoint,
    run_ablation,
    run_fl,
    run_sweep,
    train_dearfsac,
)


def _add_config_out(sub, default_out):
    sub.add_argument("--config", required=True, help="key = value file")
    sub.add_argument("--out", default=default_out,
                     help=f"output directory (default {default_out})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deskfed",
        description="Federated-learning simulator with a learned "
                    "aggregation policy.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log at INFO level")
    cmds = parser.add_subparsers(dest="command", required=True)

    p = cmds.add_parser("run", help="federated runs with a fixed strategy")
    _add_config_out(p, "runs/run")
    p.set_defaults(func=cmd_run)

    p = cmds.add_parser("train", help="train the aggregation agent")
    _add_config_out(p, "runs/train")
    p.add_argument("--variant", default="full",
                   choices=("full", "embedding", "original"))
    p.set_defaults(func=cmd_train)

    p = cmds.add_parser("ablate",
                        help="train all three agent variants, same seeds")
    _add_config_out(p, "runs/ablation")
    p.set_defaults(func=cmd_ablate)

    p = cmds.add_parser("sweep", help="repeat runs across a defect axis")
    _add_config_out(p, "runs/sweep")
    p.add_argument("--axis", required=True,
                   choices=("defect_m", "defect_degree"))
    p.add_argument("--values", required=True,
                   help="comma-separated axis values, e.g. 0.1,0.5,0.9")
    p.add_argument("--strategies", default="fedavg,rule_based",
                   help="comma-separated strategies (default "
                        "fedavg,rule_based)")
    p.set_defaults(func=cmd_sweep)

    p = cmds.add_parser("inspect-checkpoint",
                        help="print a checkpoint's header and section stats")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    p = cmds.add_parser("report",
                        help="render PNG figures next to a run's CSV files")
    p.add_argument("directory")
    p.set_defaults(func=cmd_report)
    return parser


def cmd_run(args) -> int:
    cfg = parse_config(args.config)
    metrics = run_fl(cfg, args.out)
    print(f"wrote {metrics}")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    paths = train_dearfsac(cfg, args.out, variant=args.variant)
    for name, path in sorted(paths.items()):
        print(f"wrote {name}: {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = parse_config(args.config)
    results = run_ablation(cfg, args.out)
    print(f"wrote {results['combined']}")
    return 0


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    summary = run_sweep(cfg, args.axis, values, strategies, args.out)
    print(f"wrote {summary}")
    return 0


def cmd_inspect(args) -> int:
    print(json.dumps(describe_checkpoint(args.path), indent=2,
                     sort_keys=True))
    return 0


def cmd_report(args) -> int:
    from .reporting import render_report  # defer matplotlib import

    for path in render_report(args.directory):
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 2
    except (DataError, IdxError, NotADirectoryError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"error[checkpoint]: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # pragma: no cover - last resort
        print(f"error[internal]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
