"""Command-line entry point.

Verbs mirror the pipeline stages; every verb takes --config and an optional
--seed override.  Exit codes: 0 success, 2 config error, 3 data/format
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline as pl
from .errors import ConfigError, DataFormatError, NumericalError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otrec",
        description="Cross-domain cold-start rating prediction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, domain: bool = False):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to the key = value config file")
        cmd.add_argument("--seed", type=int, default=None, help="override the config seed")
        if domain:
            cmd.add_argument("--domain", choices=pl.DOMAINS, required=True)
        return cmd

    add("split", "build the cross-domain train/valid/test split")
    add("train-ae", "train the shared autoencoder and encode all tables")
    add("encode", "re-encode the raw tables with the stored autoencoder")
    add("fit-gmm", "fit a domain's Gaussian components", domain=True)
    add("train-domain", "train a domain's weight learner and rating predictor", domain=True)
    add("transport", "align the two domains' components via Sinkhorn")
    add("predict", "predict target test ratings for source users")
    evaluate = add("evaluate", "score the predictions against the test split")
    evaluate.add_argument("--per-user", action="store_true", help="include a per-user breakdown")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    config = pl.parse_config(args.config, seed_override=args.seed)

    if args.command == "split":
        out = pl.cmd_split(config)
        print(f"split written to {out}")
    elif args.command == "train-ae":
        out = pl.cmd_train_ae(config)
        print(f"autoencoder written to {out}; encoded tables updated")
    elif args.command == "encode":
        for path in pl.cmd_encode(config):
            print(f"encoded table written to {path}")
    elif args.command == "fit-gmm":
        out = pl.cmd_fit_gmm(config, args.domain)
        print(f"mixture written to {out}")
    elif args.command == "train-domain":
        out = pl.cmd_train_domain(config, args.domain)
        print(f"domain model written to {out}")
    elif args.command == "transport":
        out = pl.cmd_transport(config)
        print(f"transport plan written to {out}")
    elif args.command == "predict":
        out = pl.cmd_predict(config)
        print(f"predictions written to {out}")
    elif args.command == "evaluate":
        report = pl.cmd_evaluate(config, per_user=args.per_user)
        print(f"RMSE {report.rmse:.6g}  MAE {report.mae:.6g}  ({report.count} interactions)")
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
