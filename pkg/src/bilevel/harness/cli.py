"""Command line entry point: ``bilevel <subcommand> --config run.json --out DIR``.

Exit codes: 0 success, 1 configuration error, 2 numeric failure,
3 a run's built-in check failed.
"""

from __future__ import annotations

import argparse
import json
import sys

from ..exceptions import NumericError
from .config import RunConfig, load_config
from .runs import execute

SUBCOMMANDS = {
    "check-grad": "check_grad", "ho": "ho", "meta-train": "meta_train", "meta-eval": "meta_eval",
    "sweep-t": "sweep_T", "pretrain": "pretrain_baseline", "report": "report",
}
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bilevel", description="Hypergradient experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=True, help="run directory")
        if name == "report":
            p.add_argument("logs", nargs="*", help="result files, run directories or metrics logs")
        if name in ("meta-eval", "sweep-t"):
            p.add_argument("--checkpoint", help="checkpoint directory")
    return parser


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {"mode": SUBCOMMANDS[args.command]}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "logs", None):
        changes["logs"] = tuple(args.logs)
    if getattr(args, "checkpoint", None):
        changes["checkpoint"] = args.checkpoint
    return cfg.replace(**changes)


def _summary(mode, result) -> str:
    if mode == "report":
        return result
    if mode == "sweep_T":
        return "\n".join(f"T={r['T']} acc={r['acc']:.4f} ci={r['ci']:.4f}{' *' if r['selected'] else ''}"
                         for r in result)
    if mode == "check_grad":
        worst_fd = max(r["fd_max_rel_error"] for r in result["problems"])
        worst_mode = max(r["mode_max_rel_error"] for r in result["problems"])
        return (f"{len(result['problems'])} problems, max FD rel error {worst_fd:.2e}, "
                f"max forward/reverse rel error {worst_mode:.2e}: {'PASS' if result['passed'] else 'FAIL'}")
    return json.dumps(result, indent=2, sort_keys=True)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        result = execute(cfg, args.out)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        # ConfigurationError, ShapeError and PreconditionError are ValueErrors
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(_summary(cfg.mode, result))
    if isinstance(result, dict) and result.get("passed") is False:
        print("check failed", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
