"""CLI: export span features from a frozen encoder."""

from __future__ import annotations

import argparse
import logging
import sys

from .corpus import CorpusError
from .export import ExportJob, export_dataset
from .vocab import VocabError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ledot-export",
        description="Export frozen-encoder span features to the ledot dataset format",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="run the encoder over a JSONL corpus")
    p.add_argument("--corpus", required=True, help="JSON Lines corpus path")
    p.add_argument("--model", required=True, help="model id or local directory")
    p.add_argument("--verbs", help="newline-delimited verb list")
    p.add_argument("--extra-tokens", nargs="*", default=[],
                   help="additional candidate tokens")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--name", default="export", help="dataset file prefix")
    p.add_argument("--batch-size", type=int, default=8)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    job = ExportJob(
        corpus_path=args.corpus, model_id=args.model,
        verb_list_path=args.verbs, extra_tokens=tuple(args.extra_tokens),
        out_dir=args.out, name=args.name, batch_size=args.batch_size)
    try:
        report = export_dataset(job)
    except (CorpusError, VocabError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"exported {report.exported} instances to {report.prefix} "
          f"({len(report.skipped)} skipped)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
