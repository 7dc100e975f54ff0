"""Token-table and activation embedders."""

from __future__ import annotations

import numpy as np

from .parallel import chunk_ranges, thread_count, thread_map


def embed_bag_of_tokens(tokens, table: np.ndarray, exclude=None) -> np.ndarray:
    """Mean of the table rows for a token multiset.

    Token ids are sorted before summation so any permutation of the same
    multiset produces a bit-identical vector. ``exclude`` optionally drops
    marker ids (for example eod and pad) from the average.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("token sequence must be non-empty and 1-d")
    if exclude:
        keep = ~np.isin(ids, np.fromiter(exclude, dtype=np.int64))
        ids = ids[keep]
        if ids.size == 0:
            raise ValueError("all tokens excluded from the average")
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        bad = int(ids[(ids < 0) | (ids >= table.shape[0])][0])
        raise ValueError(f"token id {bad} outside table of size {table.shape[0]}")
    rows = table[np.sort(ids)]
    return (rows.sum(axis=0, dtype=np.float64) / ids.size).astype(np.float32)


def pool_activations(acts: np.ndarray, mask=None) -> np.ndarray:
    """Mean-pool a seq_len x dim activation block, optionally masked."""
    acts = np.asarray(acts)
    if acts.ndim != 2 or acts.shape[0] == 0:
        raise ValueError(f"activations must be a non-empty 2-d array, got {acts.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (acts.shape[0],):
            raise ValueError("mask length must match the sequence length")
        acts = acts[mask]
        if acts.shape[0] == 0:
            raise ValueError("mask removes every position")
    return (acts.sum(axis=0, dtype=np.float64) / acts.shape[0]).astype(np.float32)


def embed_corpus(sequences, table: np.ndarray, exclude=None, threads=None) -> np.ndarray:
    """Embed each token sequence into one row; row order follows input order."""
    sequences = list(sequences)
    if not sequences:
        raise ValueError("no sequences to embed")
    out = np.empty((len(sequences), table.shape[1]), dtype=np.float32)

    def work(span):
        lo, hi = span
        for i in range(lo, hi):
            out[i] = embed_bag_of_tokens(sequences[i], table, exclude=exclude)

    spans = chunk_ranges(len(sequences), 1024)
    thread_map(work, spans, thread_count(threads))
    return out
