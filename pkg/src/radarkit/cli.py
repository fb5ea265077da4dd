"""Command-line runner: ``radarkit <subcommand> --config FILE [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(missing prerequisite, unreadable checkpoint or dataset, diverged training).
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from .config import ConfigError, load_config
from .data import DatasetFormatError
from .experiment import STAGES, MissingInputError
from .nets import CheckpointError
from .radar import TrainingDivergedError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

RUNTIME_ERRORS = (MissingInputError, CheckpointError, DatasetFormatError, TrainingDivergedError,
                  FileNotFoundError, OSError)


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; this tool reserves 2 for runtime failures
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="radarkit", description="Train, attack and evaluate adversarial-example detectors.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "train-classifier": "train the classifier on clean data",
        "train-detector": "train the detector on PGD examples against the frozen classifier",
        "finetune-radar": "adversarially finetune the detector against adaptive attacks",
        "attack": "run one attack on the test split and save the batch and its loss trajectory",
        "evaluate": "evaluate every detector checkpoint present and write report.csv / report.txt",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, help="INI-style experiment config")
        p.add_argument("--seed", type=_seed, default=None, help="overrides [run] seed")
        p.add_argument("--out", default=None, help="output directory; overrides [run] out")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.seed, args.out)
    except ConfigError as exc:
        print(f"radarkit: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        STAGES[args.command](cfg)
    except RUNTIME_ERRORS as exc:
        print(f"radarkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
