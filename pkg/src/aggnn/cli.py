"""Command-line entry point: gen-net, train, eval, transfer, perm-test, plots.

Every subcommand consumes one config file plus optional ``--set`` overrides
and writes CSV/JSON artifacts.  Errors go to stderr as a JSON envelope with a
machine-readable category; exit codes: 0 success, 1 failed check, 2 bad
config or arguments, 3 missing artifact, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .harness import (
    MissingArtifactError,
    channel_config,
    emit_plot_data,
    network_for,
    run_evaluation,
    run_permutation_test,
    run_training,
    run_transfer,
)
from .network import channel_trace_csv
from .trainer import TrainingDiverged

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4


def _error(category: str, message: str, code: int) -> int:
    json.dump({"error": {"category": category, "message": message}}, sys.stderr)
    sys.stderr.write("\n")
    return code


def _add_common(sub):
    sub.add_argument("--config", required=True, help="experiment config JSON file")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config entry (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aggnn",
        description="asynchronous wireless power allocation: simulate, train, compare",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-net", help="generate and save a network topology")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--trace-steps",
        type=int,
        default=0,
        help="also dump this many channel draws to channel_trace.csv",
    )
    p.set_defaults(func=_cmd_gen_net)

    p = subs.add_parser("train", help="train a policy on one fixed network")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = subs.add_parser("eval", help="evaluate a saved model against the baselines")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = subs.add_parser("transfer", help="evaluate a saved model on fresh networks")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_transfer)

    p = subs.add_parser("perm-test", help="node-relabeling consistency check")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--m", type=int, default=None, help="network size for the check")
    p.add_argument("--out", default=None, help="optional report JSON path")
    p.set_defaults(func=_cmd_perm_test)

    p = subs.add_parser("plots", help="emit per-figure CSV data from a finished run")
    p.add_argument("--run", required=True, help="run directory with artifacts")
    p.add_argument("--out", default=None, help="output directory (default RUN/plots)")
    p.set_defaults(func=_cmd_plots)

    return parser


def _cmd_gen_net(args) -> int:
    cfg = load_config(args.config, args.overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    topology, _ = network_for(cfg, cfg.network.m, 0)
    topology.save(out / "topology.json")
    print(json.dumps({"topology": str(out / "topology.json"), "m": cfg.network.m}))
    if args.trace_steps > 0:
        channel_trace_csv(
            topology, channel_config(cfg), cfg.seed, args.trace_steps,
            out / "channel_trace.csv",
        )
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    artifacts = run_training(cfg, args.out)
    print(json.dumps(artifacts))
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = load_config(args.config, args.overrides)
    artifacts = run_evaluation(cfg, args.model, args.out)
    print(json.dumps(artifacts))
    return EXIT_OK


def _cmd_transfer(args) -> int:
    cfg = load_config(args.config, args.overrides)
    artifacts = run_transfer(cfg, args.model, args.out)
    print(json.dumps(artifacts))
    return EXIT_OK


def _cmd_perm_test(args) -> int:
    cfg = load_config(args.config, args.overrides)
    report = run_permutation_test(cfg, args.model, args.trials, args.m)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
    print(json.dumps(report))
    return EXIT_OK if report["passed"] else EXIT_CHECK_FAILED


def _cmd_plots(args) -> int:
    written = emit_plot_data(args.run, args.out)
    print(json.dumps(written))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _error("config", str(exc), EXIT_CONFIG)
    except TrainingDiverged as exc:
        return _error("divergence", str(exc), EXIT_DIVERGED)
    except MissingArtifactError as exc:
        return _error("missing-artifact", str(exc), EXIT_MISSING)
    except FileNotFoundError as exc:
        return _error("missing-artifact", str(exc), EXIT_MISSING)
    except FileExistsError as exc:
        return _error("invalid-argument", str(exc), EXIT_CONFIG)
    except ValueError as exc:
        return _error("invalid-argument", str(exc), EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
