"""Raw review corpus handling: parsing, k-core filtering, review aggregation."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence


class CorpusError(Exception):
    """Unusable corpus: parse failure or an empty filter result."""


@dataclass(frozen=True)
class RawReview:
    user_id: str
    item_id: str
    rating: float
    text: str


@dataclass(frozen=True)
class ReviewDocument:
    entity_id: str
    entity_kind: str  # "user" or "item"
    review_texts: tuple[str, ...]

    def __post_init__(self):
        if not self.entity_id:
            raise ValueError("entity_id must be non-empty")
        if self.entity_kind not in ("user", "item"):
            raise ValueError(f"unknown entity kind {self.entity_kind!r}")
        if not self.review_texts:
            raise ValueError("a review document needs at least one text")


def load_ndjson(path: str | Path) -> list[RawReview]:
    """Amazon-style newline-delimited JSON: reviewerID, asin, overall, reviewText."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: bad JSON: {exc}") from None
            try:
                records.append(
                    RawReview(
                        user_id=str(doc["reviewerID"]),
                        item_id=str(doc["asin"]),
                        rating=float(doc["overall"]),
                        text=str(doc.get("reviewText", "") or ""),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"{path}:{lineno}: bad record: {exc}") from None
    return records


def load_csv(path: str | Path) -> list[RawReview]:
    """Project CSV schema plus a review column: user_id,item_id,rating,review."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header not in (["user_id", "item_id", "rating", "review"],):
            raise CorpusError(f"{path}: expected header user_id,item_id,rating,review, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise CorpusError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                records.append(RawReview(row[0], row[1], float(row[2]), row[3]))
            except ValueError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return records


def load_corpus(path: str | Path) -> list[RawReview]:
    path = Path(path)
    if path.suffix.lower() in (".json", ".ndjson", ".jsonl"):
        return load_ndjson(path)
    return load_csv(path)


def five_core_filter(
    records: Sequence[RawReview], min_core: int = 5, min_user_interactions: int = 10
) -> list[RawReview]:
    """Iterate (k-core, minimum-user-activity) removal until nothing changes.

    The core step removes users and items with fewer than `min_core`
    interactions until both sides are stable; the activity step then drops
    users below `min_user_interactions` with all their records.  The two
    steps repeat until jointly stable, so re-running the filter on its own
    output is the identity.
    """
    current = list(records)
    while True:
        before = len(current)
        current = _core_fixpoint(current, min_core)
        counts: dict[str, int] = {}
        for rec in current:
            counts[rec.user_id] = counts.get(rec.user_id, 0) + 1
        current = [r for r in current if counts[r.user_id] >= min_user_interactions]
        if len(current) == before:
            break
    if not current:
        raise CorpusError(
            f"filtering left no interactions (min_core={min_core}, "
            f"min_user_interactions={min_user_interactions})"
        )
    return current


def _core_fixpoint(records: list[RawReview], min_core: int) -> list[RawReview]:
    current = records
    while True:
        users: dict[str, int] = {}
        items: dict[str, int] = {}
        for rec in current:
            users[rec.user_id] = users.get(rec.user_id, 0) + 1
            items[rec.item_id] = items.get(rec.item_id, 0) + 1
        kept = [
            r for r in current if users[r.user_id] >= min_core and items[r.item_id] >= min_core
        ]
        if len(kept) == len(current):
            return kept
        current = kept


def collect_reviews(records: Iterable[RawReview]) -> list[ReviewDocument]:
    """One document per user and per item, pooling all non-empty review texts.

    Entities whose reviews are all empty are omitted with a warning.
    """
    user_texts: dict[str, list[str]] = {}
    item_texts: dict[str, list[str]] = {}
    seen_users: list[str] = []
    seen_items: list[str] = []
    for rec in records:
        if rec.user_id not in user_texts:
            user_texts[rec.user_id] = []
            seen_users.append(rec.user_id)
        if rec.item_id not in item_texts:
            item_texts[rec.item_id] = []
            seen_items.append(rec.item_id)
        if rec.text.strip():
            user_texts[rec.user_id].append(rec.text)
            item_texts[rec.item_id].append(rec.text)

    docs = []
    for kind, order, texts in (
        ("user", seen_users, user_texts),
        ("item", seen_items, item_texts),
    ):
        for entity in order:
            if texts[entity]:
                docs.append(ReviewDocument(entity, kind, tuple(texts[entity])))
            else:
                warnings.warn(f"{kind} {entity!r} has no non-empty reviews; omitted")
    return docs
