"""Corpus records, on-disk formats, and sequence packing.

Formats owned by this module:

* Embedding file (``.emb``): magic ``EMB1``, little-endian uint32 row count,
  little-endian uint32 dimension, then ``n * d`` little-endian float32 values
  in row-major order.
* Metadata file (``.jsonl``): one JSON object per line with fields ``id``
  (unique non-negative int), ``source`` (str), ``token_count`` (int >= 1) and
  optionally ``losses`` (map from checkpoint step, as a string key, to a
  finite float).

Packed-sequence layout: documents are streamed greedily in input order, each
document followed by exactly one end-of-document token; a document that does
not fit in the remaining space continues in the next sequence; only the final
sequence is right-padded with the pad token.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

EMB_MAGIC = b"EMB1"
_EMB_HEADER = struct.Struct("<4sII")


class CorpusFormatError(ValueError):
    """Raised for malformed corpus files or inconsistent record sets."""


def write_embeddings(path, matrix) -> None:
    """Write an n x d float32 matrix in the EMB1 layout."""
    arr = np.ascontiguousarray(matrix, dtype="<f4")
    if arr.ndim != 2:
        raise CorpusFormatError(f"embedding matrix must be 2-d, got shape {arr.shape}")
    n, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, n, d))
        fh.write(arr.tobytes())


def read_embeddings(path) -> np.ndarray:
    """Read an EMB1 file, validating the header, payload size, and finiteness."""
    with open(path, "rb") as fh:
        header = fh.read(_EMB_HEADER.size)
        if len(header) < _EMB_HEADER.size:
            raise CorpusFormatError(f"{path}: malformed header (file too short)")
        magic, n, d = _EMB_HEADER.unpack(header)
        if magic != EMB_MAGIC:
            raise CorpusFormatError(f"{path}: malformed header (bad magic {magic!r})")
        payload = fh.read()
    expected = n * d * 4
    if len(payload) != expected:
        raise CorpusFormatError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    bad = ~np.isfinite(arr)
    if bad.any():
        row = int(np.nonzero(bad.any(axis=1))[0][0])
        raise CorpusFormatError(f"{path}: non-finite entry at row {row}")
    return np.ascontiguousarray(arr.astype(np.float32, copy=False))


@dataclass
class ExampleRecord:
    id: int
    source: str
    token_count: int
    losses: dict[int, float] = field(default_factory=dict)


def write_metadata(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "id": int(rec.id),
                "source": rec.source,
                "token_count": int(rec.token_count),
            }
            if rec.losses:
                obj["losses"] = {str(step): float(v) for step, v in sorted(rec.losses.items())}
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def read_metadata(path) -> list[ExampleRecord]:
    """Parse a metadata JSONL file into records, validating every row."""
    records: list[ExampleRecord] = []
    seen: set[int] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for row, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}: row {row}: invalid JSON ({exc})") from exc
            for key in ("id", "source", "token_count"):
                if key not in obj:
                    raise CorpusFormatError(f"{path}: row {row}: missing field {key!r}")
            rid = int(obj["id"])
            if rid < 0:
                raise CorpusFormatError(f"{path}: row {row}: negative id {rid}")
            if rid in seen:
                raise CorpusFormatError(f"{path}: row {row}: duplicate id {rid}")
            seen.add(rid)
            count = int(obj["token_count"])
            if count < 1:
                raise CorpusFormatError(f"{path}: row {row}: token_count must be >= 1, got {count}")
            losses: dict[int, float] = {}
            for step, value in (obj.get("losses") or {}).items():
                value = float(value)
                if not np.isfinite(value):
                    raise CorpusFormatError(
                        f"{path}: row {row}: non-finite loss at step {step}"
                    )
                losses[int(step)] = value
            records.append(ExampleRecord(id=rid, source=str(obj["source"]),
                                         token_count=count, losses=losses))
    return records


@dataclass
class Corpus:
    """Aligned example records plus one embedding matrix per model tag.

    Row ``i`` of every embedding matrix corresponds to ``records[i]``.
    """

    records: list[ExampleRecord]
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.records)
        for tag, mat in self.embeddings.items():
            if mat.shape[0] != n:
                raise CorpusFormatError(
                    f"embedding table {tag!r} has {mat.shape[0]} rows for {n} records"
                )
        steps = None
        for rec in self.records:
            if rec.losses:
                got = tuple(sorted(rec.losses))
                if steps is None:
                    steps = got
                elif got != steps:
                    raise CorpusFormatError(
                        f"record {rec.id}: checkpoint steps {got} differ from {steps}"
                    )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def checkpoint_steps(self) -> list[int]:
        for rec in self.records:
            if rec.losses:
                return sorted(rec.losses)
        return []

    def loss_table(self, step: int) -> np.ndarray:
        out = np.empty(len(self.records), dtype=np.float64)
        for i, rec in enumerate(self.records):
            if step not in rec.losses:
                raise KeyError(f"record {rec.id} has no loss at step {step}")
            out[i] = rec.losses[step]
        return out

    def sources(self) -> np.ndarray:
        return np.array([rec.source for rec in self.records])

    def token_counts(self) -> np.ndarray:
        return np.array([rec.token_count for rec in self.records], dtype=np.int64)

    def ids(self) -> np.ndarray:
        return np.array([rec.id for rec in self.records], dtype=np.int64)


@dataclass
class PackedSequence:
    tokens: np.ndarray
    # (start, end, document index) spans of document tokens within this
    # sequence; spans never cover the eod or pad positions.
    doc_spans: list[tuple[int, int, int]] = field(default_factory=list)


def pack_documents(docs, seq_len: int, eod_token: int, pad_token: int) -> list[PackedSequence]:
    """Pack token documents into fixed-length sequences.

    Greedy streaming in input order: each document's tokens are followed by
    one ``eod_token``; content that overflows a sequence continues in the
    next one; the final sequence is right-padded with ``pad_token``.
    """
    if seq_len < 2:
        raise ValueError(f"seq_len must be >= 2, got {seq_len}")
    if eod_token == pad_token:
        raise ValueError("eod_token and pad_token must differ")

    sequences: list[PackedSequence] = []
    buf: list[int] = []
    spans: list[tuple[int, int, int]] = []

    def flush():
        sequences.append(PackedSequence(np.array(buf, dtype=np.int64), list(spans)))
        buf.clear()
        spans.clear()

    for doc_idx, doc in enumerate(docs):
        doc = list(doc)
        if not doc:
            raise ValueError(f"document {doc_idx} is empty")
        if eod_token in doc:
            raise ValueError(f"document {doc_idx} contains the eod token id {eod_token}")
        if pad_token in doc:
            raise ValueError(f"document {doc_idx} contains the pad token id {pad_token}")
        pos = 0
        while pos < len(doc):
            take = min(seq_len - len(buf), len(doc) - pos)
            spans.append((len(buf), len(buf) + take, doc_idx))
            buf.extend(doc[pos:pos + take])
            pos += take
            if len(buf) == seq_len:
                flush()
        buf.append(eod_token)
        if len(buf) == seq_len:
            flush()
    if buf:
        buf.extend([pad_token] * (seq_len - len(buf)))
        flush()
    return sequences


def unpack_documents(sequences, eod_token: int, pad_token: int) -> list[list[int]]:
    """Inverse of pack_documents for round-trip checks."""
    docs: list[list[int]] = []
    cur: list[int] = []
    for seq in sequences:
        for tok in seq.tokens.tolist():
            if tok == pad_token:
                continue
            if tok == eod_token:
                docs.append(cur)
                cur = []
            else:
                cur.append(tok)
    if cur:
        docs.append(cur)
    return docs
