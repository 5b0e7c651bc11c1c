"""Command-line interface: train / eval / ablate / verify-checkpoint.

Exit code 0 on success. On failure the last stderr line is a single
machine-parsable `ErrorClass: message` diagnostic and the exit code is 1
(argparse usage errors exit 2 as usual). The default output root is the
CONCORDRL_OUT environment variable, falling back to ./runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import runner
from .config import ConfigError, load_run_config
from .runner import OUTPUT_ROOT_ENV


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part.strip()) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated integer list, got '{text}'") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="concordrl",
        description="Consensus-augmented cooperative multi-agent RL experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train per seed, emit metrics + checkpoints")
    train.add_argument("--config", required=True, help="run config file")
    train.add_argument("--seed", type=int, default=None,
                       help="override the config with a single seed")
    train.add_argument("--seeds", default=None,
                       help="override the config seed list, e.g. 0,1,2")
    train.add_argument("--out", default=None, help="output directory")
    train.add_argument("--resume", action="store_true",
                       help="continue from checkpoints left in the output directory")

    ev = sub.add_parser("eval", help="evaluate a checkpoint over fresh episodes")
    ev.add_argument("checkpoint", help="checkpoint file to evaluate")
    ev.add_argument("--episodes", type=int, default=20)
    ev.add_argument("--greedy", action=argparse.BooleanOptionalAction, default=True,
                    help="greedy actions (default) or sampled with --no-greedy")
    ev.add_argument("--seed", type=int, default=None, help="evaluation seed")
    ev.add_argument("--out", default=None, help="optional report file (JSON)")

    ab = sub.add_parser("ablate", help="sweep consensus categories (k) or window (m)")
    ab.add_argument("--config", required=True, help="base run config file")
    ab.add_argument("--axis", required=True, choices=sorted(runner.ABLATION_AXES))
    ab.add_argument("--values", default=None,
                    help="override sweep values, e.g. 1,4,8,16")
    ab.add_argument("--seed", type=int, default=None,
                    help="override the config with a single seed")
    ab.add_argument("--seeds", default=None, help="override the config seed list")
    ab.add_argument("--out", default=None, help="output directory")

    ver = sub.add_parser("verify-checkpoint",
                         help="integrity-check a checkpoint file")
    ver.add_argument("checkpoint", help="checkpoint file to verify")
    return parser


def _apply_seed_overrides(cfg, seed, seeds):
    if seed is not None and seeds is not None:
        raise ConfigError("--seed and --seeds are mutually exclusive")
    if seed is not None:
        return dataclasses.replace(cfg, seeds=(seed,))
    if seeds is not None:
        return dataclasses.replace(cfg, seeds=_parse_int_list(seeds))
    return cfg


def _cmd_train(args) -> int:
    cfg = _apply_seed_overrides(load_run_config(args.config), args.seed, args.seeds)
    out_dir = runner.resolve_out_dir(args.out, cfg.out, Path(args.config).stem)
    outcome = runner.run_train(cfg, out_dir, resume=args.resume)
    print(f"trained {len(cfg.seeds)} seed(s) for {cfg.iterations} iteration(s)")
    print(f"aggregate: {outcome.aggregate_path}")
    if outcome.figure_path is not None:
        print(f"figure: {outcome.figure_path}")
    return 0


def _cmd_eval(args) -> int:
    report = runner.run_eval(
        args.checkpoint, episodes=args.episodes, greedy=args.greedy, seed=args.seed
    )
    text = json.dumps(report, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _apply_seed_overrides(load_run_config(args.config), args.seed, args.seeds)
    values = _parse_int_list(args.values) if args.values else None
    out_dir = runner.resolve_out_dir(
        args.out, cfg.out, f"{Path(args.config).stem}_ablate_{args.axis}"
    )
    outcome = runner.run_ablation(cfg, args.axis, values=values, out_dir=out_dir)
    print(f"ablation over {args.axis}: {len(outcome.rows)} summary row(s)")
    print(f"summary: {outcome.summary_path}")
    print(f"figure: {outcome.figure_path}")
    return 0


def _cmd_verify(args) -> int:
    info = runner.verify_checkpoint(args.checkpoint)
    print(json.dumps(info, sort_keys=True))
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "verify-checkpoint": _cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 — the CLI boundary reports, not raises
        message = " ".join(str(exc).split())
        print(f"{type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
