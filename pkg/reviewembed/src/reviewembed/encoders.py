"""Sentence encoder registry.

`sentence-t5-base` (or any sentence-transformers model name) requires the
pretrained weights to be available locally or downloadable.  The built-in
`hashing-768` encoder is a deterministic, dependency-free stand-in with the
same 768-d interface, for offline pipelines and tests.
"""

from __future__ import annotations

import hashlib
import re
from typing import Protocol, Sequence

import numpy as np

OUTPUT_DIM = 768
HASHING_ENCODER = "hashing-768"
DEFAULT_ENCODER = "sentence-t5-base"


class ModelUnavailableError(Exception):
    """The requested sentence-embedding model cannot be loaded."""


class SentenceEncoder(Protocol):
    def encode_batch(self, sentences: Sequence[str]) -> np.ndarray: ...


class HashingEncoder:
    """Deterministic bag-of-tokens embedding via stable token hashing.

    Each token is hashed (md5, platform-independent) to a coordinate and a
    sign; token vectors are averaged and L2-normalized.  No semantics, but
    identical texts map to identical vectors on every machine.
    """

    dim = OUTPUT_DIM
    _token_re = re.compile(r"[a-z0-9']+")

    def encode_batch(self, sentences: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(sentences), self.dim), dtype=np.float64)
        for row, sentence in enumerate(sentences):
            tokens = self._token_re.findall(sentence.lower())
            for token in tokens:
                digest = hashlib.md5(token.encode("utf-8")).digest()
                index = int.from_bytes(digest[:4], "little") % self.dim
                sign = 1.0 if digest[4] & 1 else -1.0
                out[row, index] += sign
            norm = np.linalg.norm(out[row])
            if norm > 0:
                out[row] /= norm
        return out


class SentenceTransformerEncoder:
    dim = OUTPUT_DIM

    def __init__(self, model_name: str):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise ModelUnavailableError(
                f"sentence-transformers is not installed; cannot load {model_name!r}"
            ) from exc
        try:
            self._model = SentenceTransformer(model_name)
        except Exception as exc:
            raise ModelUnavailableError(f"could not load model {model_name!r}: {exc}") from exc

    def encode_batch(self, sentences: Sequence[str]) -> np.ndarray:
        vectors = np.asarray(
            self._model.encode(list(sentences), convert_to_numpy=True, show_progress_bar=False),
            dtype=np.float64,
        )
        if vectors.ndim != 2 or vectors.shape[1] != self.dim:
            raise ModelUnavailableError(
                f"model output dim {vectors.shape[-1]} != required {self.dim}"
            )
        return vectors


def get_encoder(name: str) -> SentenceEncoder:
    if name == HASHING_ENCODER:
        return HashingEncoder()
    return SentenceTransformerEncoder(name)
