"""Command-line entry point: ``ltfsl <command> --config PATH --out DIR``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from ltfsl import __version__, kernels
from ltfsl.config import ExperimentConfig, load_config
from ltfsl.errors import ConfigError, LtfslError
from ltfsl.pipeline import COMMAND_STAGES, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("ltfsl")

HELP = {
    "synth": "generate (or ingest) the dataset and write data.csv",
    "split": "temporal dev/test split plus the class registry",
    "train-csl": "train every csl.* model",
    "meta-train": "train every fsl.* model on the real-world class pools",
    "eval-standard": "N-way k-shot episodes on disjoint standard class pools",
    "eval-realworld": "all-way evaluation of every trained model",
    "ensemble": "all-way evaluation including ensemble.* entries",
    "report": "rewrite metrics.csv and plots/ from an existing report.json",
    "run": "the full pipeline",
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ltfsl", description="Long-tailed and few-shot classification experiments.")
    parser.add_argument("--version", action="version",
                        version=f"ltfsl {__version__} ({kernels.BACKEND} kernels)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMAND_STAGES:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", required=name != "report", metavar="PATH")
        p.add_argument("--out", required=True, metavar="DIR")
        p.add_argument("--seed", type=int, default=None, help="overrides experiment.seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads for episode evaluation")
        p.add_argument("-q", "--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        config = ExperimentConfig() if args.config is None else load_config(args.config)
        if args.seed is not None:
            config = config.with_seed(args.seed)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    try:
        run_experiment(config, args.out, COMMAND_STAGES[args.command], args.threads, log.info)
    except (LtfslError, OSError) as exc:
        log.error("error: %s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
