# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

import argparse
import json
import logging
import sys

import pandas as pd

from . import analysis, theory
from .adapters import AdapterSpec, table_specs
from .archs import ArchRegistry
from .config import load_experiment, validate
from .core.utils import expand_paths
from .errors import ConfigError, ContractError, DimensionError, NumericError, UnknownArchError

LOG = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3

FORMATS = ["text", "csv", "json"]


def _add_common(p):
    p.add_argument("--format", choices=FORMATS, default="text")
    p.add_argument("--output", default=None, help="write to this file instead of stdout")


def _add_method(p):
    p.add_argument("--method", default=None, help="a single method, all table methods when omitted")
    p.add_argument("--rank", type=int, default=None, dest="rank_r")
    p.add_argument("--lora-alpha", type=float, default=None, dest="lora_alpha")
    p.add_argument("--virtual-tokens", type=int, default=None, dest="virtual_tokens_V")
    p.add_argument("--extra-states", type=int, default=None, dest="extra_states")


def make_parser():
    parser = argparse.ArgumentParser(prog="ssmpeft")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--arch-file", default=None, help="JSON file of arch records merged over the builtin ones")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("verify", help="run the equivalence and gradient checks")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-gradients", action="store_true")
    _add_common(p)

    p = sub.add_parser("count-params", help="trainable parameter share of the methods")
    p.add_argument("--arch", default="mamba-130m")
    _add_method(p)
    _add_common(p)

    p = sub.add_parser("flops", help="MAC counts of a forward pass")
    p.add_argument("--arch", default="mamba-130m")
    p.add_argument("--seq", type=int, default=128)
    p.add_argument("--convention", choices=analysis.CONVENTIONS, default="analytic")
    _add_method(p)
    _add_common(p)

    p = sub.add_parser("train", help="run an experiment config")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--method", default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--output-dir", default=None)
    _add_common(p)

    p = sub.add_parser("report", help="aggregate metrics files of finished runs")
    p.add_argument("paths", nargs="+", help="files, directories or glob patterns")
    _add_common(p)
    return parser


def _specs(args):
    if args.method is None:
        return table_specs()
    return [
        AdapterSpec.with_defaults(
            args.method,
            rank_r=args.rank_r,
            lora_alpha=args.lora_alpha,
            virtual_tokens_V=args.virtual_tokens_V,
            extra_states=args.extra_states,
        )
    ]


def _emit(text, args):
    if args.output:
        with open(args.output, "w") as f:
            f.write(text)
            if not text.endswith("\n"):
                f.write("\n")
        LOG.info(f"output written to {args.output}")
    else:
        print(text)


def _table(df, args, schema):
    if args.format == "json":
        validate(json.loads(analysis.render_table(df, "json")), schema)
    return analysis.render_table(df, args.format)


def cmd_verify(args):
    reports = theory.run_all_checks(
        n_instances=args.instances,
        seed=args.seed,
        workers=args.workers,
        gradients=not args.no_gradients,
    )
    if args.format == "json":
        data = [r.to_dict() for r in reports]
        validate(data, "verify_report")
        _emit(json.dumps(data, indent=2), args)
    else:
        df = pd.DataFrame([r.to_dict() for r in reports])
        _emit(df.to_csv(index=False) if args.format == "csv" else df.to_string(index=False), args)
    failed = [r.name for r in reports if not r.passed]
    if failed:
        LOG.error(f"verify: failed checks {failed}")
        return EXIT_FAILED
    return EXIT_OK


def cmd_count_params(args):
    specs = _specs(args)
    if args.method is not None and args.format == "text":
        _, _, pct = analysis.count_params(args.arch, specs[0])
        _emit(f"{pct:.4f}%", args)
        return EXIT_OK
    df = analysis.compare_methods(args.arch, specs)
    _emit(_table(df, args, "method_table"), args)
    return EXIT_OK


def cmd_flops(args):
    df = analysis.flops_table(args.arch, _specs(args), args.seq, args.convention)
    text = _table(df, args, "flops_table")
    if args.format == "text":
        base = df["base_macs"].iloc[0] / 1e9
        text = f"base: {base:.2f} G MACs ({args.convention}, seq_len={args.seq})\n" + text
    _emit(text, args)
    return EXIT_OK


def cmd_train(args):
    from .trainer import run_experiment

    overrides = {
        "seed": args.seed,
        "method": args.method,
        "lr": args.lr,
        "epochs": args.epochs,
        "output_dir": args.output_dir,
    }
    exp = load_experiment(args.config, overrides)
    metrics = run_experiment(exp)
    d = metrics.to_dict()
    if args.format == "json":
        validate(d, "run_metrics")
        _emit(json.dumps(d, indent=2, sort_keys=True), args)
    else:
        df = pd.DataFrame(
            [
                {
                    "method": d["method"],
                    "lr": d["lr"],
                    "params_pct": d["params_pct"],
                    "best_epoch": d["best_epoch"],
                    "best_val_accuracy": d["best_val_accuracy"],
                    "best_val_loss": d["best_val_loss"],
                }
            ]
        )
        _emit(analysis.render_table(df, args.format), args)
    return EXIT_OK


def cmd_report(args):
    files = expand_paths(args.paths)
    if not files:
        raise ContractError(f"report: no metrics files found in {args.paths}")
    metrics = []
    for f in files:
        try:
            with open(f) as fp:
                d = json.load(fp)
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read metrics: {e}", path=f)
        try:
            validate(d, "run_metrics")
        except ConfigError as e:
            LOG.warning(f"report: skipping {f}, not a metrics file ({e})")
            continue
        metrics.append(d)
    if not metrics:
        raise ContractError(f"report: none of {len(files)} files holds run metrics")
    df = analysis.aggregate_runs(metrics)
    _emit(_table(df, args, "report_table"), args)
    return EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "count-params": cmd_count_params,
    "flops": cmd_flops,
    "train": cmd_train,
    "report": cmd_report,
}


def main(argv=None):
    parser = make_parser()
    try:
        args = parser.parse_args(args=argv)
    except SystemExit as e:
        return e.code

    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s - %(message)s")
    try:
        if args.arch_file:
            ArchRegistry.load_file(args.arch_file)
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, DimensionError, UnknownArchError) as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"{parser.prog} {args.command}: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
