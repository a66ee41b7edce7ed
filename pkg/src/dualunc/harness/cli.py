"""Command line: ``dualunc {prepare,train,evaluate,report,gradcheck}``.

Every config key is also a flag (``--beta 0.5``) overriding the file given
with ``--config``. Exit codes: 0 success, 1 validation error, 2 runtime or
numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from ..data import ContainerFormatError, IdxFormatError
from ..model import ArchitectureMismatchError, NonFiniteLossError
from .config import KEYS, ConfigError, ExperimentConfig, load_config, parse_value
from .runs import cmd_evaluate, cmd_gradcheck, cmd_prepare, cmd_report, cmd_train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors (exit 1), not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualunc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="key = value config file")
        for key in KEYS:
            p.add_argument(f"--{key}", dest=f"opt_{key}", metavar="VALUE")
        return p

    def with_method(p):
        mode = p.add_mutually_exclusive_group()
        mode.add_argument("--baseline", action="store_true", help="classifier only, beta=0")
        mode.add_argument("--ours", action="store_true", help="classifier + annotator latent")
        return p

    with_config(sub.add_parser("prepare", help="simulate experts and write dataset containers"))
    with_method(with_config(sub.add_parser("train", help="train a model on a prepared run directory")))
    e = with_method(with_config(sub.add_parser("evaluate", help="uncertainty reports for a checkpoint")))
    e.add_argument("--checkpoint", help="defaults to <out>/checkpoint.ducp")
    r = sub.add_parser("report", help="compare completed runs")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", default="report")
    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for key in KEYS:
        raw = getattr(args, f"opt_{key}", None)
        if raw is not None:
            overrides[key] = parse_value(key, raw)
    if getattr(args, "baseline", False):
        overrides["method"] = "baseline"
    elif getattr(args, "ours", False):
        overrides["method"] = "ours"
    return cfg.replace(**overrides)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            results = cmd_gradcheck(corrupt=args.corrupt, seed=args.seed)
            for r in results:
                print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:50s} max_rel_err={r.max_rel_error:.2e}")
            failed = [r for r in results if not r.passed]
            print(f"{len(results) - len(failed)}/{len(results)} checks passed")
            return EXIT_RUNTIME if failed else EXIT_OK
        if args.command == "report":
            result = cmd_report(args.runs, args.out)
            for w in result["warnings"]:
                print(f"warning: {w}", file=sys.stderr)
            print(f"wrote {args.out}/comparison.md and comparison.csv ({len(result['rows'])} runs)")
            return EXIT_OK
        cfg = resolve_config(args)
        if args.command == "prepare":
            for name, path in cmd_prepare(cfg).items():
                print(f"{name}: {path}")
        elif args.command == "train":
            record = cmd_train(cfg)
            print(f"final accuracy {record.final_accuracy:.4f} in {record.wall_clock:.1f}s")
        elif args.command == "evaluate":
            result = cmd_evaluate(cfg, args.checkpoint)
            print(open(f"{cfg.out}/summary.md").read(), end="")
            print(f"accuracy (LU predictive mean): {result['accuracy_lu_mean']}")
        return EXIT_OK
    except (ConfigError, IdxFormatError, ContainerFormatError, ArchitectureMismatchError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NonFiniteLossError, FloatingPointError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(run())
