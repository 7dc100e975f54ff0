"""Budgeted curation: one representative per cluster at a chosen granularity.

``curate`` sweeps an epsilon grid from coarse to fine over a prebuilt
dendrogram and picks the largest epsilon whose per-cluster representatives
can fill the token budget (with ``by_count``, the largest epsilon with at
least ``budget // token_count`` clusters, the literal count rule for
fixed-length sequences). When the representatives exceed the budget,
clusters are ranked by size descending (largest redundancy groups first) and
the walk stops at the first representative that would cross the budget; with
``allow_overshoot`` that crossing representative is kept. The selected
representatives are emitted in ascending distance-to-centroid order.

Exact duplicates sit at distance zero, always share a cluster, and can
therefore never both be selected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import Clustering
from .rac import Dendrogram, GridExhaustedError, validate_grid


class BudgetError(ValueError):
    pass


@dataclass
class CurationPlan:
    example_ids: list[int]
    budget_tokens: int
    token_total: int
    epsilon: float | None = None  # None for the random baseline
    policy: dict = field(default_factory=dict)

    def save(self, path) -> None:
        """Write one example id per line plus a JSON sidecar next to it."""
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for eid in self.example_ids:
                fh.write(f"{eid}\n")
        sidecar = {
            "budget_tokens": self.budget_tokens,
            "token_total": self.token_total,
            "epsilon": self.epsilon,
            "num_examples": len(self.example_ids),
            "policy": self.policy,
        }
        with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CurationPlan":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as fh:
            ids = [int(line) for line in fh if line.strip()]
        with open(path.with_suffix(".json"), "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
        return cls(
            example_ids=ids,
            budget_tokens=int(sidecar["budget_tokens"]),
            token_total=int(sidecar["token_total"]),
            epsilon=sidecar.get("epsilon"),
            policy=sidecar.get("policy") or {},
        )


def _centroid_distances(clustering: Clustering, x: np.ndarray) -> np.ndarray:
    """Squared distance from each example to its own cluster centroid."""
    assign = clustering.assignments
    m = clustering.num_clusters
    sizes = np.bincount(assign, minlength=m).astype(np.float64)
    order = np.argsort(assign, kind="stable")
    bounds = np.searchsorted(assign[order], np.arange(m))
    sums = np.add.reduceat(x[order], bounds, axis=0)
    centroids = sums / sizes[:, None]
    diff = x - centroids[assign]
    return (diff * diff).sum(axis=1)


def _representatives(clustering: Clustering, x: np.ndarray):
    dist = _centroid_distances(clustering, x)
    assign = clustering.assignments
    order = np.lexsort((np.arange(len(assign)), dist, assign))
    first = np.searchsorted(assign[order], np.arange(clustering.num_clusters))
    return order[first], dist


def select_representatives(clustering: Clustering, x) -> np.ndarray:
    """Per-cluster example row index nearest to the cluster centroid.

    Returned in cluster-id order; distance ties resolve to the lowest
    example index.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != len(clustering):
        raise ValueError(f"{x.shape[0]} rows for {len(clustering)} assignments")
    reps, _ = _representatives(clustering, x)
    return reps


def _walk_budget(candidates, token_counts, budget: int, allow_overshoot: bool):
    """Take candidates in order until the budget stops the walk."""
    taken = []
    total = 0
    for idx in candidates:
        cost = int(token_counts[idx])
        if total + cost > budget:
            if allow_overshoot:
                taken.append(int(idx))
                total += cost
            break
        taken.append(int(idx))
        total += cost
    return taken, total


def curate(x, token_counts, dendrogram: Dendrogram, grid, budget_tokens: int,
           *, by_count: bool = False, allow_overshoot: bool = False,
           example_ids=None) -> CurationPlan:
    """Select a budgeted representative subset from a dendrogram's grid."""
    values = validate_grid(grid)
    if values[-1] > dendrogram.epsilon_max:
        raise ValueError(
            f"grid value {values[-1]} exceeds dendrogram epsilon_max "
            f"{dendrogram.epsilon_max}"
        )
    token_counts = np.asarray(token_counts, dtype=np.int64)
    if token_counts.shape != (dendrogram.n,):
        raise ValueError("token_counts length must match the dendrogram leaves")
    if (token_counts < 1).any():
        raise ValueError("token counts must be >= 1")
    if budget_tokens < 1:
        raise BudgetError(f"budget must be >= 1 token, got {budget_tokens}")

    if by_count:
        uniq = np.unique(token_counts)
        if uniq.size != 1:
            raise BudgetError(
                "by_count requires a uniform token count per example "
                f"(saw {uniq.size} distinct values)"
            )
        required = budget_tokens // int(uniq[0])
        if required < 1:
            raise BudgetError("budget admits no example at the uniform length")

    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != dendrogram.n:
        raise ValueError("embedding rows must match the dendrogram leaves")

    chosen = None
    for eps in reversed(values):
        clustering = dendrogram.cut(eps)
        reps, dist = _representatives(clustering, x)
        if by_count:
            fillable = clustering.num_clusters >= required
        else:
            fillable = int(token_counts[reps].sum()) >= budget_tokens
        if fillable:
            chosen = (eps, clustering, reps, dist)
            break
    if chosen is None:
        raise GridExhaustedError(
            f"grid exhausted: even epsilon {values[0]} cannot fill the budget"
        )
    eps, clustering, reps, dist = chosen

    sizes = clustering.sizes()
    cluster_order = np.lexsort(
        (np.arange(clustering.num_clusters), -sizes)
    )
    taken, total = _walk_budget(reps[cluster_order], token_counts,
                                budget_tokens, allow_overshoot)

    taken_arr = np.array(taken, dtype=np.int64)
    emit_order = np.lexsort((taken_arr, dist[taken_arr]))
    rows = [taken[i] for i in emit_order]
    ids = rows if example_ids is None else [int(example_ids[i]) for i in rows]
    return CurationPlan(
        example_ids=ids,
        budget_tokens=int(budget_tokens),
        token_total=total,
        epsilon=float(eps),
        policy={
            "by_count": bool(by_count),
            "allow_overshoot": bool(allow_overshoot),
            "num_clusters": int(clustering.num_clusters),
            "baseline": False,
        },
    )


def random_baseline(token_counts, budget_tokens: int, seed: int,
                    *, allow_overshoot: bool = False, example_ids=None) -> CurationPlan:
    """Seeded uniform-permutation prefix under the same budget policy."""
    token_counts = np.asarray(token_counts, dtype=np.int64)
    if token_counts.ndim != 1 or token_counts.size == 0:
        raise ValueError("token_counts must be a non-empty 1-d array")
    if budget_tokens < 1:
        raise BudgetError(f"budget must be >= 1 token, got {budget_tokens}")
    total_tokens = int(token_counts.sum())
    if budget_tokens > total_tokens:
        raise BudgetError(
            f"budget {budget_tokens} exceeds corpus total {total_tokens}"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(token_counts.size)
    taken, total = _walk_budget(perm, token_counts, budget_tokens, allow_overshoot)
    ids = taken if example_ids is None else [int(example_ids[i]) for i in taken]
    return CurationPlan(
        example_ids=ids,
        budget_tokens=int(budget_tokens),
        token_total=total,
        epsilon=None,
        policy={"baseline": True, "seed": int(seed),
                "allow_overshoot": bool(allow_overshoot)},
    )
