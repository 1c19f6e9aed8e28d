"""``dynalm`` command-line entry point.

Exit codes: 0 success, 2 configuration/usage error, 3 numerical abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Dict, List, Sequence

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .lm import NumericalError
from .metatrain import CheckpointCorruption, MetaDivergence

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

COMMANDS = {
    "gen-corpus": pipeline.cmd_gen_corpus,
    "pretrain": pipeline.cmd_pretrain,
    "consolidate": pipeline.cmd_consolidate,
    "metatrain": pipeline.cmd_metatrain,
    "eval": pipeline.cmd_eval,
    "compare": pipeline.cmd_compare,
}


def parse_overrides(extra: Sequence[str]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise ConfigError(f"missing value for --{key}")
        out[key.replace("-", "_")] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynalm",
        description="Dynamical LM with a meta-learned weight-update rule.",
        epilog="Any configuration key can be overridden with --key value. Keys: " + ", ".join(RunConfig.keys()),
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: List[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, parse_overrides(extra))
        result = COMMANDS[args.command](cfg)
    except (ConfigError, CheckpointError) as exc:
        print(f"dynalm: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, MetaDivergence, CheckpointCorruption) as exc:
        print(f"dynalm: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"dynalm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    paths = result if isinstance(result, list) else [result]
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
