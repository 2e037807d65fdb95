"""CLI: raw review corpus -> filtered interactions + user/item DUPE files."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .corpus import CorpusError, collect_reviews, five_core_filter, load_corpus
from .embed import encode_documents, write_interactions_csv
from .encoders import DEFAULT_ENCODER, ModelUnavailableError


def run(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="reviewembed",
        description="Extract per-user and per-item review embeddings from a raw corpus",
    )
    parser.add_argument("--input", required=True, help="NDJSON (reviewerID/asin/overall/reviewText) or CSV (user_id,item_id,rating,review)")
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--model-name", default=DEFAULT_ENCODER,
                        help=f"sentence encoder; default {DEFAULT_ENCODER}, use hashing-768 for an offline run")
    parser.add_argument("--min-core", type=int, default=5)
    parser.add_argument("--min-user-interactions", type=int, default=10)
    args = parser.parse_args(argv)

    records = load_corpus(args.input)
    print(f"loaded {len(records)} raw interactions")
    records = five_core_filter(records, args.min_core, args.min_user_interactions)
    print(f"{len(records)} interactions after filtering")

    docs = collect_reviews(records)
    user_docs = [d for d in docs if d.entity_kind == "user"]
    item_docs = [d for d in docs if d.entity_kind == "item"]

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    encode_documents(user_docs, args.model_name).write_dupe(out / "users.dupe")
    encode_documents(item_docs, args.model_name).write_dupe(out / "items.dupe")
    write_interactions_csv(records, out / "interactions.csv")
    print(f"wrote {len(user_docs)} user and {len(item_docs)} item embeddings to {out}")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except CorpusError as exc:
        print(f"corpus error: {exc}", file=sys.stderr)
        return 3
    except ModelUnavailableError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
