"""Interchange data types, file formats and the cross-domain split protocol.

Embedding tables travel in the binary DUPE format (see `load_embeddings`),
interactions in plain CSV.  All randomness is driven by NumPy's PCG64
generator (`numpy.random.default_rng`) seeded with a single explicit 64-bit
seed, so splits reproduce across machines.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataFormatError

RATING_MIN = 1.0
RATING_MAX = 5.0

DUPE_MAGIC = b"DUPE"
DUPE_VERSION = 1
DUPE_HEADER = struct.Struct("<4sHII")  # magic, version, record count, dim


class EmbeddingTable:
    """Ordered id -> dense vector map for one domain's users or items.

    Vectors are stored as float32 (the on-disk precision) so that a
    save/load round trip is bit-exact; convert to float64 at compute
    boundaries via `matrix()`.
    """

    def __init__(self, dim: int, ids: Sequence[str], vectors: np.ndarray):
        if not isinstance(dim, int) or dim < 1:
            raise ValueError(f"dim must be a positive integer, got {dim!r}")
        vectors = np.asarray(vectors, dtype=np.float32).reshape(len(ids), dim)
        if not np.all(np.isfinite(vectors)):
            raise ValueError("embedding vectors must be finite (after float32 cast)")
        self.dim = dim
        self.ids = [str(i) for i in ids]
        for i in self.ids:
            if not i:
                raise ValueError("entity ids must be non-empty strings")
        self._index = {eid: row for row, eid in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise ValueError("duplicate entity id in embedding table")
        self.vectors = vectors
        self.vectors.setflags(write=False)

    @classmethod
    def empty(cls, dim: int) -> "EmbeddingTable":
        return cls(dim, [], np.zeros((0, dim), dtype=np.float32))

    @classmethod
    def from_pairs(cls, dim: int, pairs: Iterable[tuple[str, Sequence[float]]]) -> "EmbeddingTable":
        ids, rows = [], []
        for eid, vec in pairs:
            ids.append(eid)
            rows.append(np.asarray(vec, dtype=np.float32))
        mat = np.vstack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
        return cls(dim, ids, mat)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, eid: str) -> bool:
        return eid in self._index

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.ids == other.ids
            and self.vectors.shape == other.vectors.shape
            and np.array_equal(self.vectors, other.vectors)
        )

    def vector(self, eid: str) -> np.ndarray:
        """Float64 copy of one entity's vector."""
        try:
            row = self._index[eid]
        except KeyError:
            raise DataFormatError(f"unknown entity id {eid!r}") from None
        return self.vectors[row].astype(np.float64)

    def matrix(self) -> np.ndarray:
        """All vectors as an (n, dim) float64 array, file order preserved."""
        return self.vectors.astype(np.float64)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for eid, row in zip(self.ids, self.vectors):
            yield eid, row


@dataclass(frozen=True)
class InteractionRecord:
    """One (user, item, rating) observation."""

    user_id: str
    item_id: str
    rating: float

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be non-empty")
        if not (RATING_MIN <= self.rating <= RATING_MAX):
            raise ValueError(
                f"rating {self.rating} outside [{RATING_MIN}, {RATING_MAX}]"
            )


@dataclass
class DomainDataset:
    """One domain's embedding tables plus its interaction log."""

    users: EmbeddingTable
    items: EmbeddingTable
    interactions: list[InteractionRecord]

    def validate(self) -> None:
        for rec in self.interactions:
            if rec.user_id not in self.users:
                raise DataFormatError(f"interaction user {rec.user_id!r} missing from user table")
            if rec.item_id not in self.items:
                raise DataFormatError(f"interaction item {rec.item_id!r} missing from item table")


@dataclass
class CrossDomainSplit:
    """Train/valid/test partition for one source->target experiment."""

    train_source: list[InteractionRecord]
    train_target: list[InteractionRecord]
    valid: list[InteractionRecord]
    test: list[InteractionRecord]
    seed: int


# --------------------------------------------------------------------------
# DUPE binary embedding files
#
# Little-endian layout:
#   magic "DUPE" (4 bytes) | u16 version=1 | u32 record count | u32 dim
# then per record:
#   u16 id byte-length | id (UTF-8) | dim * f32
# The header is exactly 14 bytes.
# --------------------------------------------------------------------------


def save_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    """Write `table` in DUPE format; `load_embeddings` round-trips bit-exactly."""
    if not isinstance(table.dim, int) or table.dim < 1:
        raise ValueError(f"refusing to write table with invalid dim {table.dim!r}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(DUPE_HEADER.pack(DUPE_MAGIC, DUPE_VERSION, len(table), table.dim))
        for eid, vec in table.items():
            raw_id = eid.encode("utf-8")
            if len(raw_id) > 0xFFFF:
                raise ValueError(f"id too long for format: {eid[:32]!r}...")
            fh.write(struct.pack("<H", len(raw_id)))
            fh.write(raw_id)
            fh.write(vec.astype("<f4").tobytes())


def load_embeddings(path: str | Path) -> EmbeddingTable:
    """Read a DUPE embedding file, preserving record order.

    Raises DataFormatError naming the byte offset on bad magic, truncation,
    non-finite floats or duplicate ids.
    """
    path = Path(path)
    data = path.read_bytes()

    def fail(offset: int, msg: str):
        raise DataFormatError(f"{path}: {msg} at byte offset {offset}")

    if len(data) < DUPE_HEADER.size:
        fail(len(data), f"truncated header ({len(data)} bytes, need {DUPE_HEADER.size})")
    magic, version, count, dim = DUPE_HEADER.unpack_from(data, 0)
    if magic != DUPE_MAGIC:
        fail(0, f"bad magic {magic!r}")
    if version != DUPE_VERSION:
        fail(4, f"unsupported version {version}")
    if dim < 1:
        fail(10, f"invalid dim {dim}")

    offset = DUPE_HEADER.size
    ids: list[str] = []
    seen: set[str] = set()
    vectors = np.empty((count, dim), dtype=np.float32)
    vec_bytes = 4 * dim
    for rec in range(count):
        if offset + 2 > len(data):
            fail(offset, f"truncated record {rec}: missing id length")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + id_len > len(data):
            fail(offset, f"truncated record {rec}: id needs {id_len} bytes")
        try:
            eid = data[offset : offset + id_len].decode("utf-8")
        except UnicodeDecodeError:
            fail(offset, f"record {rec}: id is not valid UTF-8")
        if not eid:
            fail(offset, f"record {rec}: empty id")
        if eid in seen:
            fail(offset, f"record {rec}: duplicate id {eid!r}")
        seen.add(eid)
        offset += id_len
        if offset + vec_bytes > len(data):
            fail(offset, f"truncated record {rec}: vector needs {vec_bytes} bytes")
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
        bad = ~np.isfinite(vec)
        if bad.any():
            fail(offset + 4 * int(np.argmax(bad)), f"record {rec}: non-finite float")
        vectors[rec] = vec
        ids.append(eid)
        offset += vec_bytes
    if offset != len(data):
        fail(offset, f"{len(data) - offset} trailing bytes after last record")
    return EmbeddingTable(dim, ids, vectors)


# --------------------------------------------------------------------------
# Interaction CSV files: header "user_id,item_id,rating"
# --------------------------------------------------------------------------

INTERACTION_HEADER = ["user_id", "item_id", "rating"]


def save_interactions(records: Sequence[InteractionRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(INTERACTION_HEADER)
        for rec in records:
            if "," in rec.user_id or "," in rec.item_id:
                raise ValueError(f"ids may not contain commas: {rec.user_id!r}/{rec.item_id!r}")
            writer.writerow([rec.user_id, rec.item_id, repr(rec.rating)])


def load_interactions(path: str | Path) -> list[InteractionRecord]:
    path = Path(path)
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != INTERACTION_HEADER:
            raise DataFormatError(f"{path}: expected header {INTERACTION_HEADER}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                rating = float(row[2])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad rating {row[2]!r}") from None
            try:
                records.append(InteractionRecord(row[0], row[1], rating))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    return records


def filter_min_interactions(
    records: Sequence[InteractionRecord], min_count: int
) -> list[InteractionRecord]:
    """Keep only records of users with at least `min_count` records; order preserved."""
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts: dict[str, int] = {}
    for rec in records:
        counts[rec.user_id] = counts.get(rec.user_id, 0) + 1
    return [rec for rec in records if counts[rec.user_id] >= min_count]


# --------------------------------------------------------------------------
# Cross-domain split
# --------------------------------------------------------------------------


def make_cross_domain_split(
    source: DomainDataset, target: DomainDataset, seed: int
) -> CrossDomainSplit:
    """Partition interactions for a source->target transfer experiment.

    Overlap is exact string equality of user ids across the two domains.
    For every overlapping user, in lexicographic user-id order, the user's
    target-domain interactions (in input order) are permuted once with
    PCG64(seed); the first goes to train_target, the next
    floor(0.4*(n-1)) to test, the next floor(0.4*(n-1)) to valid, and the
    remainder to train_target.  All other target interactions and every
    source interaction stay in the respective train sets.
    """
    source.validate()
    target.validate()
    source_users = set(source.users.ids)
    by_user: dict[str, list[int]] = {}
    for idx, rec in enumerate(target.interactions):
        if rec.user_id in source_users:
            by_user.setdefault(rec.user_id, []).append(idx)
    if not by_user:
        raise DataFormatError("no overlapping users between domains; cannot build evaluation split")

    rng = np.random.default_rng(seed)
    assignment = np.zeros(len(target.interactions), dtype=np.uint8)  # 0=train, 1=test, 2=valid
    for user in sorted(by_user):
        idxs = by_user[user]
        order = rng.permutation(len(idxs))
        held = len(idxs) - 1
        n_eval = int(np.floor(0.4 * held))
        for pos in order[1 : 1 + n_eval]:
            assignment[idxs[pos]] = 1
        for pos in order[1 + n_eval : 1 + 2 * n_eval]:
            assignment[idxs[pos]] = 2

    train_target = [r for r, a in zip(target.interactions, assignment) if a == 0]
    test = [r for r, a in zip(target.interactions, assignment) if a == 1]
    valid = [r for r, a in zip(target.interactions, assignment) if a == 2]
    return CrossDomainSplit(
        train_source=list(source.interactions),
        train_target=train_target,
        valid=valid,
        test=test,
        seed=seed,
    )


SPLIT_FILES = {
    "train_source": "train_source.csv",
    "train_target": "train_target.csv",
    "valid": "valid.csv",
    "test": "test.csv",
}


def write_split(split: CrossDomainSplit, out_dir: str | Path) -> None:
    """Write the four interaction CSVs plus a manifest recording seed and counts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name, filename in SPLIT_FILES.items():
        records = getattr(split, name)
        save_interactions(records, out_dir / filename)
        counts[name] = len(records)
    manifest = {"seed": split.seed, "counts": counts}
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_split(in_dir: str | Path) -> CrossDomainSplit:
    in_dir = Path(in_dir)
    manifest_path = in_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"missing split manifest {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    parts = {
        name: load_interactions(in_dir / filename) for name, filename in SPLIT_FILES.items()
    }
    for name, records in parts.items():
        expected = manifest["counts"][name]
        if len(records) != expected:
            raise DataFormatError(
                f"{in_dir / SPLIT_FILES[name]}: manifest says {expected} records, found {len(records)}"
            )
    return CrossDomainSplit(seed=manifest["seed"], **parts)
