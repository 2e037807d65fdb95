"""Per-entity embedding extraction and the DUPE output format.

Every document's texts are split into sentences, encoded in deterministic
batches, and average-pooled.  The pooled sum runs in sorted-sentence order
so any permutation of the same sentences yields the identical vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ReviewDocument
from .encoders import OUTPUT_DIM, SentenceEncoder, get_encoder
from .sentences import split_sentences

MAX_SENTENCES_PER_DOC = 512  # keep the earliest; bounds prolific reviewers
ENCODE_BATCH = 64


@dataclass
class EmbeddingMatrix:
    """Ordered id -> vector block, ready to serialize as a DUPE file."""

    dim: int
    ids: list[str]
    vectors: np.ndarray  # (n, dim) float32

    def write_dupe(self, path: str | Path) -> None:
        """DUPE format: magic "DUPE", u16 version=1, u32 count, u32 dim,
        then per record u16 id byte-length, UTF-8 id, dim float32 (LE)."""
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sHII", b"DUPE", 1, len(self.ids), self.dim))
            for eid, vec in zip(self.ids, self.vectors):
                raw = eid.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(vec.astype("<f4").tobytes())


def document_sentences(doc: ReviewDocument, cap: int = MAX_SENTENCES_PER_DOC) -> list[str]:
    sentences: list[str] = []
    for text in doc.review_texts:
        sentences.extend(split_sentences(text))
        if len(sentences) >= cap:
            return sentences[:cap]
    return sentences


def encode_documents(
    docs: Sequence[ReviewDocument],
    encoder_name: str,
    batch_size: int = ENCODE_BATCH,
    max_sentences: int = MAX_SENTENCES_PER_DOC,
) -> EmbeddingMatrix:
    """Average-pooled sentence embeddings, one 768-d vector per document."""
    encoder: SentenceEncoder = get_encoder(encoder_name)
    per_doc: list[list[str]] = []
    flat: list[str] = []
    for doc in docs:
        sentences = document_sentences(doc, cap=max_sentences)
        if not sentences:
            raise ValueError(f"document {doc.entity_id!r} produced no sentences")
        per_doc.append(sentences)
        flat.extend(sentences)

    encoded = np.zeros((len(flat), OUTPUT_DIM), dtype=np.float64)
    for start in range(0, len(flat), batch_size):
        encoded[start : start + batch_size] = encoder.encode_batch(flat[start : start + batch_size])

    vectors = np.zeros((len(docs), OUTPUT_DIM), dtype=np.float64)
    cursor = 0
    for row, sentences in enumerate(per_doc):
        block = encoded[cursor : cursor + len(sentences)]
        cursor += len(sentences)
        # canonical summation order: sort by sentence text, ties by position
        order = sorted(range(len(sentences)), key=lambda i: (sentences[i], i))
        vectors[row] = block[order].sum(axis=0) / len(sentences)
    return EmbeddingMatrix(OUTPUT_DIM, [d.entity_id for d in docs], vectors.astype(np.float32))


def write_interactions_csv(records, path: str | Path) -> None:
    """Interaction CSV consumed by the rating pipeline: user_id,item_id,rating."""
    lines = ["user_id,item_id,rating"]
    for rec in records:
        if "," in rec.user_id or "," in rec.item_id:
            raise ValueError(f"ids may not contain commas: {rec.user_id!r}/{rec.item_id!r}")
        lines.append(f"{rec.user_id},{rec.item_id},{rec.rating!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
