"""Synthetic planted-cluster corpora and brute-force metric oracles.

The generator plants ``k_true`` Gaussian blobs. Losses follow a two-level
model: cluster c draws a mean mu_c ~ N(0, sigma_between^2) and example x in
c draws loss mu_c + N(0, sigma_within^2) independently per checkpoint. A
clustering that recovers the planted blobs exactly therefore has an expected
variance reduction of about

    (sigma_between^2 + sigma_within^2) / sigma_within^2

up to O(1/cluster_size) sampling corrections (the classic between/within
decomposition). With a 3:1 sigma ratio the expected value is about 10.

The oracles here are deliberately naive re-derivations (explicit loops, full
distance matrices, no bounding or caching) and share no code with the
production implementations they cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .clustering import Clustering
from .corpus import Corpus, ExampleRecord


@dataclass
class SyntheticSpec:
    n: int
    d: int
    k_true: int
    seed: int = 0
    sigma_between: float = 3.0
    sigma_within: float = 1.0
    blob_sigma: float = 0.02        # per-coordinate embedding noise
    center_rank: int | None = None  # planted centers span this many directions
    num_sources: int = 4
    source_purity: float = 1.0
    duplicate_fraction: float = 0.0
    checkpoint_steps: tuple = (1000,)
    token_range: tuple = (64, 512)  # inclusive bounds; equal values => uniform
    normalize: bool = True

    def __post_init__(self):
        if not 1 <= self.k_true <= self.n:
            raise ValueError("need 1 <= k_true <= n")
        if self.center_rank is not None and not 1 <= self.center_rank <= self.d:
            raise ValueError("center_rank must lie in [1, d]")
        if not 0 <= self.duplicate_fraction < 1:
            raise ValueError("duplicate_fraction must lie in [0, 1)")
        if not 0 <= self.source_purity <= 1:
            raise ValueError("source_purity must lie in [0, 1]")
        if not self.checkpoint_steps:
            raise ValueError("need at least one checkpoint step")


@dataclass
class PlantedCorpus:
    """A generated corpus plus the ground truth the tests need."""

    corpus: Corpus
    labels: np.ndarray                    # planted cluster of each example
    cluster_loss_means: np.ndarray        # (k_true,) the mu_c draws
    duplicate_pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def embeddings(self) -> np.ndarray:
        return self.corpus.embeddings["planted"]


def expected_variance_reduction(spec: SyntheticSpec) -> float:
    """Expected VR when the planted partition is recovered exactly."""
    sb2 = spec.sigma_between ** 2
    sw2 = spec.sigma_within ** 2
    size = spec.n / spec.k_true
    # Within-cluster population variance of a size-s sample underestimates
    # sigma_within^2 by the (s-1)/s factor.
    return (sb2 + sw2) / (sw2 * (size - 1) / size)


def generate(spec: SyntheticSpec) -> PlantedCorpus:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n, d, k = spec.n, spec.d, spec.k_true

    # Cluster sizes as equal as possible, remainder on the low-id clusters.
    base, extra = divmod(n, k)
    sizes = np.full(k, base, dtype=np.int64)
    sizes[:extra] += 1
    labels = np.repeat(np.arange(k), sizes)

    if spec.center_rank is not None:
        basis, _ = np.linalg.qr(rng.normal(size=(d, spec.center_rank)))
        centers = rng.normal(size=(k, spec.center_rank)) @ basis.T
    else:
        centers = rng.normal(size=(k, d))
    centers /= np.sqrt((centers ** 2).sum(axis=1))[:, None]

    x = centers[labels] + spec.blob_sigma * rng.normal(size=(n, d))
    if spec.normalize:
        norms = np.sqrt((x ** 2).sum(axis=1))
        norms[norms == 0] = 1.0
        x /= norms[:, None]

    dominant = labels % spec.num_sources
    flip = rng.random(n) >= spec.source_purity
    random_src = rng.integers(0, spec.num_sources, size=n)
    src = np.where(flip, random_src, dominant)

    lo, hi = spec.token_range
    token_counts = rng.integers(lo, hi + 1, size=n)

    mu = rng.normal(0.0, spec.sigma_between, size=k)
    losses_by_step = {
        int(step): mu[labels] + rng.normal(0.0, spec.sigma_within, size=n)
        for step in spec.checkpoint_steps
    }

    duplicate_pairs: list[tuple[int, int]] = []
    n_dup = int(round(spec.duplicate_fraction * n))
    if n_dup > 0:
        originals = n - n_dup
        if originals < 1:
            raise ValueError("duplicate_fraction leaves no original rows")
        sources_for_dups = rng.integers(0, originals, size=n_dup)
        for offset, src_row in enumerate(sources_for_dups.tolist()):
            dup_row = originals + offset
            x[dup_row] = x[src_row]
            labels[dup_row] = labels[src_row]
            src[dup_row] = src[src_row]
            token_counts[dup_row] = token_counts[src_row]
            for step in losses_by_step:
                losses_by_step[step][dup_row] = losses_by_step[step][src_row]
            duplicate_pairs.append((dup_row, src_row))

    records = [
        ExampleRecord(
            id=i,
            source=f"src{int(src[i])}",
            token_count=int(token_counts[i]),
            losses={step: float(vals[i]) for step, vals in losses_by_step.items()},
        )
        for i in range(n)
    ]
    corpus = Corpus(records=records, embeddings={"planted": x.astype(np.float32)})
    return PlantedCorpus(
        corpus=corpus,
        labels=labels,
        cluster_loss_means=mu,
        duplicate_pairs=duplicate_pairs,
    )


def noise_embeddings(n: int, d: int, seed: int) -> np.ndarray:
    """Structureless unit-norm rows matched in shape to a planted table."""
    rng = np.random.Generator(np.random.PCG64(seed))
    x = rng.normal(size=(n, d))
    x /= np.sqrt((x ** 2).sum(axis=1))[:, None]
    return x.astype(np.float32)


def random_clustering(n: int, num_clusters: int, seed: int) -> Clustering:
    """Uniform random assignment (empty labels dropped by relabeling)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = rng.integers(0, num_clusters, size=n)
    return Clustering.from_labels(
        labels, {"algorithm": "random", "seed": int(seed),
                 "avg_size": n / num_clusters}
    )


# ---------------------------------------------------------------------------
# Oracles. Pure re-derivations: double loops, fsum, full matrices.
# ---------------------------------------------------------------------------

def oracle_variance_reduction(assignments, losses) -> float:
    """Direct evaluation of the variance-reduction formula.

    Returns math.inf when every cluster is loss-constant and raises
    ValueError for a constant loss column, mirroring the production flags.
    """
    values = [float(v) for v in losses]
    n = len(values)
    mean = math.fsum(values) / n
    overall = math.fsum((v - mean) ** 2 for v in values) / n
    if overall == 0.0:
        raise ValueError("constant loss")

    members: dict[int, list[float]] = {}
    for cid, v in zip(assignments, values):
        members.setdefault(int(cid), []).append(v)
    within = []
    for cid in sorted(members):
        vals = members[cid]
        cmean = math.fsum(vals) / len(vals)
        within.append(math.fsum((v - cmean) ** 2 for v in vals) / len(vals))
    denom = math.fsum(within) / len(within)
    if denom == 0.0:
        return math.inf
    return overall / denom


def oracle_cluster_purity(assignments, sources) -> float:
    members: dict[int, list] = {}
    for cid, s in zip(assignments, sources):
        members.setdefault(int(cid), []).append(s)
    fractions = []
    for cid in sorted(members):
        labels = members[cid]
        best = max(labels.count(s) for s in set(labels))
        fractions.append(best / len(labels))
    return math.fsum(fractions) / len(fractions)


def oracle_complete_linkage(x, eps: float) -> np.ndarray:
    """Textbook O(n^3) complete linkage cut at eps.

    Keeps the full distance matrix, scans it for the global minimum each
    round, and merges until the minimum exceeds eps. Ties resolve
    lexicographically by (smaller cluster id, larger cluster id), with
    cluster ids assigned in creation order (leaves first).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    dist = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        diff = x - x[i]
        dist[i] = (diff * diff).sum(axis=1)
    np.fill_diagonal(dist, np.inf)

    cluster_id = list(range(n))            # id currently occupying each slot
    members = [[i] for i in range(n)]      # row indices per slot
    next_id = n
    alive = np.ones(n, dtype=bool)
    while alive.sum() > 1:
        sub = dist[np.ix_(alive, alive)]
        best = sub.min()
        if not np.isfinite(best) or best > eps:
            break
        slots = np.nonzero(alive)[0]
        ii, jj = np.nonzero(sub == best)
        pairs = []
        for a, b in zip(slots[ii], slots[jj]):
            if a < b:
                ka, kb = cluster_id[a], cluster_id[b]
                pairs.append(((min(ka, kb), max(ka, kb)), (int(a), int(b))))
        _, (u, v) = min(pairs)
        row = np.maximum(dist[u], dist[v])
        dist[u, :] = row
        dist[:, u] = row
        dist[u, u] = np.inf
        alive[v] = False
        dist[v, :] = np.inf
        dist[:, v] = np.inf
        members[u] = members[u] + members[v]
        members[v] = []
        cluster_id[u] = next_id
        next_id += 1

    labels = np.empty(n, dtype=np.int64)
    for label, slot in enumerate(np.nonzero(alive)[0]):
        for row in members[slot]:
            labels[row] = label
    return labels


def oracle_pca(sample, k: int):
    """Standardized covariance eigendecomposition built from explicit loops.

    Returns (mean, scale, components, explained_ratio): components as a
    (k, d) array, explained_ratio as the top-k eigenvalue fractions of the
    total standardized variance.
    """
    x = [[float(v) for v in row] for row in np.asarray(sample)]
    n = len(x)
    d = len(x[0])
    mean = [math.fsum(row[j] for row in x) / n for j in range(d)]
    var = [math.fsum((row[j] - mean[j]) ** 2 for row in x) / n for j in range(d)]
    scale = [math.sqrt(v) if v > 0 else 1.0 for v in var]
    z = [[(row[j] - mean[j]) / scale[j] for j in range(d)] for row in x]
    cov = [
        [math.fsum(z[i][a] * z[i][b] for i in range(n)) / n for b in range(d)]
        for a in range(d)
    ]
    eigvals, eigvecs = np.linalg.eigh(np.array(cov))
    order = np.argsort(eigvals)[::-1][:k]
    total = math.fsum(cov[j][j] for j in range(d))
    ratio = np.array([eigvals[i] / total for i in order])
    return np.array(mean), np.array(scale), eigvecs[:, order].T.copy(), ratio
