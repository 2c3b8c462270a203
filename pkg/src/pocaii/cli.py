"""Command line entry point: ``pocaii {run,compare,resume}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from pocaii.experiment import (
    ConfigError,
    Interrupted,
    LogError,
    cmd_compare,
    cmd_resume,
    cmd_run,
    load_config,
)
from pocaii.objective import ObjectiveError

EXIT_CONFIG = 2
EXIT_INTERRUPTED = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pocaii", description="Multi-fidelity hyperparameter optimization")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one optimization")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None, help="defaults to the first seed in the config")
    run.add_argument("--out", default=None)
    run.add_argument("--worker-cmd", default=None, help="subprocess worker command overriding the config objective")
    run.add_argument("--stop-after", type=int, default=None, help=argparse.SUPPRESS)

    cmp = sub.add_parser("compare", help="macro-replicated comparison of several algorithms")
    cmp.add_argument("--config", required=True)
    cmp.add_argument("--seed", type=int, nargs="+", default=None, help="override the config seeds")
    cmp.add_argument("--out", default=None)
    cmp.add_argument("--worker-cmd", default=None)
    cmp.add_argument("--parallel", type=int, default=1, help="number of runs executed concurrently")

    res = sub.add_parser("resume", help="continue an interrupted run from its trial log")
    res.add_argument("log")
    res.add_argument("--worker-cmd", default=None)
    res.add_argument("--stop-after", type=int, default=None, help=argparse.SUPPRESS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            seed = cfg.seeds[0] if args.seed is None else args.seed
            result = cmd_run(cfg, seed, args.out, args.worker_cmd, args.stop_after)
            print(json.dumps(result.summary, indent=2, sort_keys=True))
            print(f"log: {result.log_path}")
        elif args.command == "compare":
            cfg = load_config(args.config)
            result = cmd_compare(cfg, args.out, args.worker_cmd, args.parallel, args.seed)
            final = max(r["budget"] for r in result["trajectory"])
            for row in result["trajectory"]:
                if row["budget"] == final:
                    print(f"{row['algorithm']:>20}  mean={row['mean_score']:.4f}  se={row['stderr']:.4f}")
            for t in result["sign_tests"]:
                print(f"pocaii vs {t['baseline']}: {t['wins']}-{t['losses']} (ties {t['ties']}), p={t['p_value']:.3g}")
        else:
            result = cmd_resume(args.log, args.worker_cmd, args.stop_after)
            if result is None:
                print("run already complete; nothing to do")
            else:
                print(json.dumps(result.summary, indent=2, sort_keys=True))
    except (ConfigError, LogError, ObjectiveError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Interrupted as exc:
        print(f"interrupted: {exc}", file=sys.stderr)
        return EXIT_INTERRUPTED
    return 0


if __name__ == "__main__":
    sys.exit(main())
