"""Balanced K-means with hard cluster-size bounds.

The cluster count is m = round(n / avg_size). Sizes are bounded by
ceil(min_factor * avg_size) and floor(max_factor * avg_size), clamped to
[1, n]. Assignment is greedy and capacity-constrained: points are ordered by
how much they lose if denied their best centroid (best minus second-best
squared distance, most negative first) and each takes its nearest centroid
with remaining capacity. Clusters that end below the minimum size after
convergence are repaired by stealing their nearest points from clusters that
are above the minimum. All ties resolve to the lower cluster id or the lower
point index, so runs are deterministic for a given seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .clustering import Clustering

log = logging.getLogger(__name__)

_SHORTLIST = 8
_BLOCK = 8192


class InfeasibleConstraintError(ValueError):
    pass


@dataclass
class BalanceConfig:
    avg_size: int
    min_factor: float = 0.2
    max_factor: float = 5.0
    max_iters: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.avg_size < 1:
            raise ValueError(f"avg_size must be >= 1, got {self.avg_size}")
        if not 0 < self.min_factor <= 1 <= self.max_factor:
            raise ValueError(
                f"need 0 < min_factor <= 1 <= max_factor, got "
                f"{self.min_factor}, {self.max_factor}"
            )
        if self.min_factor * self.avg_size < 1:
            raise ValueError(
                f"min_factor * avg_size must be >= 1, got "
                f"{self.min_factor * self.avg_size:g}"
            )
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def bounds(self, n: int) -> tuple[int, int, int]:
        """Return (m, min_size, max_size) for an n-point input."""
        m = int(round(n / self.avg_size))
        m = max(m, 1)
        min_size = max(1, min(n, math.ceil(self.min_factor * self.avg_size)))
        max_size = max(1, min(n, math.floor(self.max_factor * self.avg_size)))
        if m * min_size > n:
            raise InfeasibleConstraintError(
                f"infeasible bounds: {m} clusters * min size {min_size} > {n} points"
            )
        if m * max_size < n:
            raise InfeasibleConstraintError(
                f"infeasible bounds: {m} clusters * max size {max_size} < {n} points"
            )
        return m, min_size, max_size


def _plusplus_init(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Standard k-means++ seeding (squared-distance weighted)."""
    n = x.shape[0]
    centers = np.empty((m, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, m):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r))
            idx = min(idx, n - 1)
        centers[j] = x[idx]
        np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1), out=d2)
    return centers


def _shortlists(x32: np.ndarray, c32: np.ndarray, top: int):
    """Per-point nearest-centroid shortlist and assignment margins.

    Distances omit the constant ||x||^2 term (it does not affect per-point
    ranking or margins). Shortlists are ordered by (distance, cluster id).
    """
    n = x32.shape[0]
    m = c32.shape[0]
    top = min(top, m)
    cn = (c32.astype(np.float64) ** 2).sum(axis=1).astype(np.float32)
    best_i = np.empty((n, top), dtype=np.int64)
    best_d = np.empty((n, top), dtype=np.float32)
    for lo in range(0, n, _BLOCK):
        hi = min(lo + _BLOCK, n)
        dist = cn[None, :] - 2.0 * (x32[lo:hi] @ c32.T)
        if top < m:
            part = np.argpartition(dist, top - 1, axis=1)[:, :top]
        else:
            part = np.broadcast_to(np.arange(m), (hi - lo, m)).copy()
        vals = np.take_along_axis(dist, part, axis=1)
        order = np.lexsort((part, vals), axis=1)
        best_i[lo:hi] = np.take_along_axis(part, order, axis=1)
        best_d[lo:hi] = np.take_along_axis(vals, order, axis=1)
    if top > 1:
        margins = best_d[:, 0].astype(np.float64) - best_d[:, 1].astype(np.float64)
    else:
        margins = np.zeros(n, dtype=np.float64)
    return best_i, best_d, margins


def _greedy_assign(x32, c32, max_size: int) -> np.ndarray:
    n = x32.shape[0]
    m = c32.shape[0]
    best_i, _, margins = _shortlists(x32, c32, _SHORTLIST)
    order = np.argsort(margins, kind="stable")
    caps = np.full(m, max_size, dtype=np.int64)
    assign = np.full(n, -1, dtype=np.int64)
    cn = None
    for p in order.tolist():
        placed = False
        for c in best_i[p]:
            if caps[c] > 0:
                assign[p] = c
                caps[c] -= 1
                placed = True
                break
        if not placed:
            # Shortlist saturated: rank every centroid for this point.
            if cn is None:
                cn = (c32.astype(np.float64) ** 2).sum(axis=1).astype(np.float32)
            row = cn - 2.0 * (c32 @ x32[p])
            for c in np.lexsort((np.arange(m), row)):
                if caps[c] > 0:
                    assign[p] = c
                    caps[c] -= 1
                    break
    return assign


def _centroids(x: np.ndarray, assign: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(assign, minlength=m)
    sums = np.zeros((m, x.shape[1]), dtype=np.float64)
    order = np.argsort(assign, kind="stable")
    xs = x[order].astype(np.float64)
    bounds = np.searchsorted(assign[order], np.arange(m))
    filled = np.add.reduceat(xs, bounds, axis=0)
    sums[counts > 0] = filled[counts > 0]
    centers = np.zeros_like(sums)
    nz = counts > 0
    centers[nz] = sums[nz] / counts[nz, None]
    return centers, counts


def _objective(x: np.ndarray, centers: np.ndarray, assign: np.ndarray) -> float:
    total = 0.0
    for lo in range(0, x.shape[0], _BLOCK):
        hi = min(lo + _BLOCK, x.shape[0])
        diff = x[lo:hi].astype(np.float64) - centers[assign[lo:hi]]
        total += float((diff * diff).sum())
    return total


def _reseed_empty(x, centers, counts, assign) -> bool:
    """Move the point farthest from its centroid into each empty cluster."""
    changed = False
    for c in np.nonzero(counts == 0)[0]:
        dist = ((x.astype(np.float64) - centers[assign]) ** 2).sum(axis=1)
        donor_ok = counts[assign] > 1
        dist[~donor_ok] = -1.0
        p = int(np.argmax(dist))
        if dist[p] < 0:
            continue
        counts[assign[p]] -= 1
        assign[p] = c
        counts[c] = 1
        centers[c] = x[p]
        changed = True
    return changed


def _repair_min_size(x, assign, centers, m: int, min_size: int) -> None:
    """Steal nearest points from over-min clusters until bounds hold.

    Centroids are held fixed during repair so the pass is deterministic and
    single-sweep; feasibility is guaranteed by the m * min_size <= n check.
    """
    counts = np.bincount(assign, minlength=m)
    for c in range(m):
        while counts[c] < min_size:
            dist = ((x.astype(np.float64) - centers[c]) ** 2).sum(axis=1)
            eligible = (counts[assign] > min_size) & (assign != c)
            if not eligible.any():
                raise InfeasibleConstraintError(
                    f"cannot repair cluster {c} to min size {min_size}"
                )
            dist[~eligible] = np.inf
            p = int(np.argmin(dist))
            counts[assign[p]] -= 1
            assign[p] = c
            counts[c] += 1


def balanced_kmeans(x, config: BalanceConfig) -> Clustering:
    """Cluster rows of x under the size bounds in ``config``."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"x must be a non-empty 2-d array, got shape {x.shape}")
    n = x.shape[0]
    if n < config.avg_size:
        raise InfeasibleConstraintError(
            f"need at least avg_size={config.avg_size} points, got {n}"
        )
    norms = np.sqrt((x.astype(np.float64) ** 2).sum(axis=1))
    if np.abs(norms - 1.0).max() > 1e-3:
        log.warning("balanced_kmeans input rows are not unit-normalized")

    m, min_size, max_size = config.bounds(n)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    x32 = np.ascontiguousarray(x, dtype=np.float32)
    centers = _plusplus_init(x32.astype(np.float64), m, rng)

    assign = None
    prev_obj = np.inf
    iterations = 0
    for it in range(config.max_iters):
        new_assign = _greedy_assign(x32, centers.astype(np.float32), max_size)
        new_centers, counts = _centroids(x32, new_assign, m)
        if _reseed_empty(x32, new_centers, counts, new_assign):
            new_centers, counts = _centroids(x32, new_assign, m)
        obj = _objective(x32, new_centers, new_assign)
        if obj > prev_obj:
            break  # keep the previous, better assignment
        iterations = it + 1
        converged = assign is not None and np.array_equal(new_assign, assign)
        assign, centers, prev_obj = new_assign, new_centers, obj
        if converged:
            break

    _repair_min_size(x32, assign, centers, m, min_size)
    # The size bounds are part of the output contract: check on every run.
    sizes = np.bincount(assign, minlength=m)
    if sizes.min() < min_size or sizes.max() > max_size:
        raise RuntimeError(
            f"size bounds violated after repair: sizes in "
            f"[{sizes.min()}, {sizes.max()}], bounds [{min_size}, {max_size}]"
        )
    return Clustering(
        assign,
        m,
        {
            "algorithm": "balanced_kmeans",
            "avg_size": config.avg_size,
            "min_size": min_size,
            "max_size": max_size,
            "seed": config.seed,
            "iterations": iterations,
        },
    )


def kmeans_sweep(x, avg_sizes, min_factor=0.2, max_factor=5.0,
                 max_iters=25, seed=0) -> list[Clustering]:
    """Run balanced_kmeans once per average size, with per-size child seeds."""
    sizes = [int(s) for s in avg_sizes]
    if len(set(sizes)) != len(sizes):
        raise ValueError(f"duplicate sweep size in {sizes}")
    out = []
    for s in sizes:
        child = np.random.SeedSequence(entropy=seed, spawn_key=(s,))
        child_seed = int(child.generate_state(1, np.uint64)[0])
        cfg = BalanceConfig(avg_size=s, min_factor=min_factor,
                            max_factor=max_factor, max_iters=max_iters,
                            seed=child_seed)
        out.append(balanced_kmeans(x, cfg))
    return out
