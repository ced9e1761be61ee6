"""Command line: ``vagram <subcommand> --config <path> [--out <dir>] [--seed <u64>]``.

Exit codes: 0 success, 1 config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .config import ConfigError, parse_config, write_resolved
from .experiments import RUNNERS

SUBCOMMANDS = {
    "mf-snapshots": "mf_snapshots",
    "loss-study": "model_loss_study",
    "loss-surface": "loss_surface",
    "dyna-compare": "dyna_compare",
    "smoke": "smoke",
}

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
U64_MAX = 2 ** 64 - 1


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vagram", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, experiment in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {experiment} experiment")
        p.add_argument("--config", required=True, type=Path, help="config file")
        p.add_argument("--out", type=Path, default=None, help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=_u64, default=None, help="base seed (overrides the config)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    experiment = SUBCOMMANDS[args.command]
    try:
        cfg = parse_config(args.config)
        if cfg.experiment.experiment != experiment:
            raise ConfigError(f"config is for {cfg.experiment.experiment!r}, "
                              f"subcommand {args.command} runs {experiment!r}", path=args.config)
        exp = cfg.experiment
        if args.seed is not None:
            exp = dataclasses.replace(exp, seed=args.seed)
        if args.out is not None:
            exp = dataclasses.replace(exp, out_dir=str(args.out))
        cfg = dataclasses.replace(cfg, experiment=exp)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.experiment.out_dir)
    try:
        write_resolved(cfg, out)
        result = RUNNERS[experiment](cfg, out)
    except Exception as e:  # noqa: BLE001 - surfaced as an exit code
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
