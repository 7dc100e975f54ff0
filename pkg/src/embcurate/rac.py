"""Complete-linkage agglomerative clustering bounded by a distance threshold.

All distances are squared L2. The dendrogram is built by repeatedly merging
the globally closest pair of clusters (which is always a reciprocal
nearest-neighbor pair) whose complete-linkage distance is at most
``epsilon_max``; candidates above the bound are never evaluated. Cutting the
dendrogram at ``eps <= epsilon_max`` yields clusters whose maximum
intra-cluster pairwise squared distance is at most ``eps``.

Scalability comes from the bound: a blocked distance pass collects only the
pairs within ``epsilon_max`` (with float32 slack), those edges split the data
into connected components, and the exact float64 linkage runs densely inside
each component. Merges can never cross components, so the quadratic work is
limited to the largest component rather than the full input.

Dendrogram file format (``.dnd``): magic ``DND1``, little-endian uint32 leaf
count, uint32 merge count, float64 epsilon_max, then one (uint32 child a,
uint32 child b, float64 height) record per merge. Leaves are ids
``0 .. n-1``; merge ``t`` creates id ``n + t``; heights are non-decreasing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse
from scipy.sparse.csgraph import connected_components

from .clustering import Clustering
from .parallel import chunk_ranges, thread_count, thread_map

DND_MAGIC = b"DND1"
_DND_HEADER = struct.Struct("<4sIId")
_MERGE_DTYPE = np.dtype([("a", "<u4"), ("b", "<u4"), ("h", "<f8")])

_EDGE_BLOCK = 4096
_EXACT_BLOCK = 256
# Dense per-component linkage needs O(c^2) memory; refuse pathological bounds.
MAX_COMPONENT = 12000


class DendrogramFormatError(ValueError):
    pass


class GridExhaustedError(ValueError):
    pass


@dataclass
class Dendrogram:
    n: int
    merges: np.ndarray   # (M, 2) int64 child node ids
    heights: np.ndarray  # (M,) float64, non-decreasing
    epsilon_max: float

    def __post_init__(self):
        self.merges = np.asarray(self.merges, dtype=np.int64).reshape(-1, 2)
        self.heights = np.asarray(self.heights, dtype=np.float64)
        m = self.merges.shape[0]
        if self.heights.shape != (m,):
            raise DendrogramFormatError("merge and height counts differ")
        if m > max(0, self.n - 1):
            raise DendrogramFormatError(f"{m} merges for {self.n} leaves")
        if m and (np.diff(self.heights) < 0).any():
            raise DendrogramFormatError("merge heights must be non-decreasing")
        if m and (self.heights > self.epsilon_max).any():
            raise DendrogramFormatError("merge height exceeds epsilon_max")

    def num_clusters_at(self, eps: float) -> int:
        return self.n - int(np.searchsorted(self.heights, eps, side="right"))

    def cut(self, eps: float) -> Clustering:
        """Partition obtained by applying every merge with height <= eps."""
        k = int(np.searchsorted(self.heights, eps, side="right"))
        root = np.arange(self.n + k, dtype=np.int64)
        # Nodes only ever point to higher-numbered parents, so one sweep from
        # the top resolves every root.
        for t in range(k - 1, -1, -1):
            r = root[self.n + t]
            root[self.merges[t, 0]] = r
            root[self.merges[t, 1]] = r
        return Clustering.from_labels(
            root[: self.n], {"algorithm": "rac", "epsilon": float(eps)}
        )

    def save(self, path) -> None:
        rec = np.empty(self.merges.shape[0], dtype=_MERGE_DTYPE)
        rec["a"] = self.merges[:, 0]
        rec["b"] = self.merges[:, 1]
        rec["h"] = self.heights
        with open(path, "wb") as fh:
            fh.write(_DND_HEADER.pack(DND_MAGIC, self.n, rec.shape[0],
                                      float(self.epsilon_max)))
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path) -> "Dendrogram":
        with open(path, "rb") as fh:
            header = fh.read(_DND_HEADER.size)
            if len(header) < _DND_HEADER.size:
                raise DendrogramFormatError(f"{path}: malformed header")
            magic, n, m, eps_max = _DND_HEADER.unpack(header)
            if magic != DND_MAGIC:
                raise DendrogramFormatError(f"{path}: bad magic {magic!r}")
            payload = fh.read()
        if len(payload) != m * _MERGE_DTYPE.itemsize:
            raise DendrogramFormatError(f"{path}: truncated payload")
        rec = np.frombuffer(payload, dtype=_MERGE_DTYPE)
        merges = np.stack([rec["a"].astype(np.int64),
                           rec["b"].astype(np.int64)], axis=1)
        return cls(n=n, merges=merges, heights=rec["h"].astype(np.float64),
                   epsilon_max=eps_max)


def _candidate_pairs(x: np.ndarray, epsilon_max: float, threads=None):
    """All (i < j) pairs whose squared distance can be <= epsilon_max.

    Computed blockwise in float32 with a slack margin, so the result may
    include a few pairs slightly beyond the bound; the exact float64 pass
    inside each component discards them. Used only to find components.
    """
    n = x.shape[0]
    x32 = np.ascontiguousarray(x, dtype=np.float32)
    sq = (x.astype(np.float64) ** 2).sum(axis=1)
    slack = epsilon_max + 1e-4 * max(1.0, float(sq.max(initial=0.0)))
    sq32 = sq.astype(np.float32)
    blocks = chunk_ranges(n, _EDGE_BLOCK)
    tasks = [(bi, bj) for bi in range(len(blocks)) for bj in range(bi, len(blocks))]

    def work(task):
        bi, bj = task
        ilo, ihi = blocks[bi]
        jlo, jhi = blocks[bj]
        g = x32[ilo:ihi] @ x32[jlo:jhi].T
        d2 = sq32[ilo:ihi, None] + sq32[None, jlo:jhi] - 2.0 * g
        mask = d2 <= slack
        if bi == bj:
            mask &= np.triu(np.ones_like(mask), k=1)
        ii, jj = np.nonzero(mask)
        return ii.astype(np.int64) + ilo, jj.astype(np.int64) + jlo

    results = thread_map(work, tasks, thread_count(threads))
    if results:
        ei = np.concatenate([r[0] for r in results])
        ej = np.concatenate([r[1] for r in results])
    else:
        ei = ej = np.empty(0, dtype=np.int64)
    return ei, ej


def _exact_sqdist(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Direct (a - b)^2 sums in float64, blockwise.

    No dot-product shortcut, and the reduction is a plain last-axis sum so
    the result is bit-identical to evaluating ((a - b) ** 2).sum() pairwise;
    threshold comparisons at exactly-realized distances stay exact.
    """
    out = np.empty((xa.shape[0], xb.shape[0]), dtype=np.float64)
    d = xa.shape[1]
    col_block = max(1, (1 << 22) // (_EXACT_BLOCK * d))
    for rlo, rhi in chunk_ranges(xa.shape[0], _EXACT_BLOCK):
        for clo, chi in chunk_ranges(xb.shape[0], col_block):
            diff = xa[rlo:rhi, None, :] - xb[None, clo:chi, :]
            out[rlo:rhi, clo:chi] = (diff * diff).sum(axis=2)
    return out


def _component_merges(x64: np.ndarray, members: np.ndarray, epsilon_max: float):
    """Complete-linkage merges within one component.

    Returns (child_a, child_b, height) triples using component-local ids:
    leaves are 0 .. c-1 in ascending global-id order, merge t creates c + t.
    Ties between equal-height candidates resolve lexicographically by
    (smaller cluster id, larger cluster id).
    """
    c = members.shape[0]
    xm = x64[members]
    dist = _exact_sqdist(xm, xm)
    np.fill_diagonal(dist, np.inf)
    dist[dist > epsilon_max] = np.inf

    local_id = np.arange(c, dtype=np.int64)
    active = np.ones(c, dtype=bool)
    nn_val = np.full(c, np.inf)
    nn_slot = np.full(c, -1, dtype=np.int64)

    def refresh(slot: int) -> None:
        row = dist[slot]
        val = row.min()
        if not np.isfinite(val):
            nn_val[slot], nn_slot[slot] = np.inf, -1
            return
        ties = np.nonzero(row == val)[0]
        nn_val[slot] = val
        nn_slot[slot] = ties[np.argmin(local_id[ties])]

    for s in range(c):
        refresh(s)

    merges = []
    while True:
        best = np.inf if not active.any() else nn_val[active].min()
        if not np.isfinite(best):
            break
        cand_slots = np.nonzero(active & (nn_val == best))[0]
        best_pair = None
        best_key = None
        for s in cand_slots.tolist():
            t = int(nn_slot[s])
            key = (min(local_id[s], local_id[t]), max(local_id[s], local_id[t]))
            if best_key is None or key < best_key:
                best_key = key
                best_pair = (s, t) if local_id[s] < local_id[t] else (t, s)
        u, v = best_pair
        merges.append((int(local_id[u]), int(local_id[v]), float(best)))

        # Lance-Williams for complete linkage: the merged row is the
        # entrywise max, which stays within the epsilon_max / inf structure.
        row = np.maximum(dist[u], dist[v])
        dist[u, :] = row
        dist[:, u] = row
        dist[u, u] = np.inf
        dist[v, :] = np.inf
        dist[:, v] = np.inf
        active[v] = False
        nn_val[v], nn_slot[v] = np.inf, -1
        local_id[u] = c + len(merges) - 1

        refresh(u)
        stale = np.nonzero(active & ((nn_slot == u) | (nn_slot == v)))[0]
        for s in stale.tolist():
            if s != u:
                refresh(s)
    return merges


def build_dendrogram(x, epsilon_max: float, threads=None) -> Dendrogram:
    """Build the bounded complete-linkage dendrogram for the rows of x."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"x must be a non-empty 2-d array, got shape {x.shape}")
    if not (np.isfinite(epsilon_max) and epsilon_max >= 0):
        raise ValueError(f"epsilon_max must be finite and >= 0, got {epsilon_max}")
    n = x.shape[0]
    x64 = np.ascontiguousarray(x, dtype=np.float64)

    ei, ej = _candidate_pairs(x64, epsilon_max, threads)
    if ei.size:
        graph = scipy.sparse.coo_matrix(
            (np.ones(ei.size, dtype=np.int8), (ei, ej)), shape=(n, n)
        )
        _, labels = connected_components(graph, directed=False)
    else:
        labels = np.arange(n)

    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(labels.max() + 1))
    events = []  # (height, leader global id, local index, component, local merge)
    for ci in range(len(bounds)):
        lo = bounds[ci]
        hi = bounds[ci + 1] if ci + 1 < len(bounds) else n
        members = np.sort(order[lo:hi])
        if members.size < 2:
            continue
        if members.size > MAX_COMPONENT:
            raise ValueError(
                f"connected component of size {members.size} exceeds the dense "
                f"linkage limit {MAX_COMPONENT}; lower epsilon_max"
            )
        for t, (a, b, h) in enumerate(_component_merges(x64, members, epsilon_max)):
            events.append((h, int(members[0]), t, members, (a, b)))

    events.sort(key=lambda e: (e[0], e[1], e[2]))
    merges = np.empty((len(events), 2), dtype=np.int64)
    heights = np.empty(len(events), dtype=np.float64)
    # Map each component's local ids to global ids now that the global merge
    # order (and therefore the id of every internal node) is fixed.
    node_of: dict[tuple[int, int], int] = {}
    for gidx, (h, leader, t, members, (a, b)) in enumerate(events):
        c = members.shape[0]

        def to_global(local: int) -> int:
            if local < c:
                return int(members[local])
            return node_of[(leader, local - c)]

        merges[gidx, 0] = to_global(a)
        merges[gidx, 1] = to_global(b)
        heights[gidx] = h
        node_of[(leader, t)] = n + gidx
    return Dendrogram(n=n, merges=merges, heights=heights,
                      epsilon_max=float(epsilon_max))


def rac_cluster(x, epsilon: float, threads=None) -> Clustering:
    """Cluster rows of x so every intra-cluster squared distance is <= epsilon."""
    if not (np.isfinite(epsilon) and epsilon > 0):
        raise ValueError(f"epsilon must be finite and > 0, got {epsilon}")
    dendro = build_dendrogram(x, epsilon, threads=threads)
    return dendro.cut(epsilon)


def validate_grid(grid) -> list[float]:
    values = [float(v) for v in grid]
    if not values:
        raise ValueError("epsilon grid is empty")
    if any(not np.isfinite(v) or v <= 0 for v in values):
        raise ValueError(f"epsilon grid values must be positive and finite: {values}")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError(f"epsilon grid must be strictly ascending: {values}")
    return values


def epsilon_sweep(dendrogram: Dendrogram, grid,
                  required_clusters: int) -> tuple[float, Clustering]:
    """Largest grid epsilon whose cut has at least ``required_clusters``.

    Returns the chosen epsilon together with its cut.
    """
    values = validate_grid(grid)
    if values[-1] > dendrogram.epsilon_max:
        raise ValueError(
            f"grid value {values[-1]} exceeds dendrogram epsilon_max "
            f"{dendrogram.epsilon_max}"
        )
    if required_clusters < 1:
        raise ValueError("required_clusters must be >= 1")
    for eps in reversed(values):
        if dendrogram.num_clusters_at(eps) >= required_clusters:
            return eps, dendrogram.cut(eps)
    raise GridExhaustedError(
        f"no grid epsilon yields {required_clusters} clusters "
        f"(smallest tried: {values[0]})"
    )
