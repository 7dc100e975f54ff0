"""Loss-variance and purity metrics over clusterings.

Variance reduction of a clustering is the population variance of the loss
over the whole corpus divided by the mean (uniform over clusters, singletons
included) of the within-cluster population variances. A clustering unrelated
to the loss scores about 1; grouping loss-similar examples scores higher.

Degenerate inputs raise typed errors instead of returning misleading
numbers: a constant loss column has no variance to reduce
(ConstantLossError), and a clustering whose every cluster is loss-constant
has an infinite ratio (ZeroWithinVarianceError, the +infinity flag). Sweeps
catch these per cell and carry a flag instead of a value.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .clustering import Clustering

CSV_COLUMNS = ("model", "avg_size_or_eps", "step", "variance_reduction",
               "purity", "num_clusters")

FLAG_CONSTANT_LOSS = "constant_loss"
FLAG_INFINITE = "infinite_variance_reduction"


class ConstantLossError(ValueError):
    """The loss column is constant: zero overall variance."""


class ZeroWithinVarianceError(ValueError):
    """Every cluster is loss-constant: the ratio is a +infinity flag."""


def _check_losses(clustering: Clustering, losses) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape != (len(clustering),):
        raise ValueError(
            f"losses shape {losses.shape} does not match {len(clustering)} examples"
        )
    if not np.isfinite(losses).all():
        bad = int(np.nonzero(~np.isfinite(losses))[0][0])
        raise ValueError(f"non-finite loss at example {bad}")
    return losses


def _sample_cluster_ids(num_clusters, cluster_sample, seed) -> np.ndarray | None:
    if cluster_sample is None or cluster_sample >= num_clusters:
        return None
    if cluster_sample < 1:
        raise ValueError("cluster_sample must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    return np.sort(rng.choice(num_clusters, size=cluster_sample, replace=False))


def variance_reduction(clustering: Clustering, losses, *,
                       cluster_sample=None, seed=0) -> float:
    """Overall loss variance divided by the mean within-cluster variance.

    ``cluster_sample`` optionally estimates the denominator over a uniform
    without-replacement sample of clusters instead of all of them.
    """
    losses = _check_losses(clustering, losses)
    n = losses.size
    mean = math.fsum(losses) / n
    dev = losses - mean
    overall = math.fsum(dev * dev) / n
    if overall == 0.0:
        raise ConstantLossError("degenerate: constant loss")

    assign = clustering.assignments
    m = clustering.num_clusters
    # Exactly-rounded sums keep the within-cluster variances order-independent;
    # with a single all-covering cluster the ratio is then exactly 1.0.
    order = np.argsort(assign, kind="stable")
    grouped = losses[order]
    starts = np.searchsorted(assign[order], np.arange(m))
    ends = np.append(starts[1:], n)
    within_var = np.empty(m, dtype=np.float64)
    for i in range(m):
        vals = grouped[starts[i]:ends[i]]
        cmean = math.fsum(vals) / vals.size
        cdev = vals - cmean
        within_var[i] = math.fsum(cdev * cdev) / vals.size

    chosen = _sample_cluster_ids(m, cluster_sample, seed)
    if chosen is not None:
        within_var = within_var[chosen]
    denom = math.fsum(within_var) / within_var.size
    if denom == 0.0:
        raise ZeroWithinVarianceError("all clusters loss-constant")
    return overall / denom


def cluster_purity(clustering: Clustering, sources, *,
                   cluster_sample=None, seed=0) -> float:
    """Mean (uniform over clusters) of the dominant source fraction."""
    sources = np.asarray(sources)
    if sources.shape != (len(clustering),):
        raise ValueError(
            f"sources shape {sources.shape} does not match {len(clustering)} examples"
        )
    _, src = np.unique(sources, return_inverse=True)
    num_sources = int(src.max()) + 1
    assign = clustering.assignments
    m = clustering.num_clusters
    counts = np.bincount(assign * num_sources + src,
                         minlength=m * num_sources).reshape(m, num_sources)
    fractions = counts.max(axis=1) / counts.sum(axis=1)
    chosen = _sample_cluster_ids(m, cluster_sample, seed)
    if chosen is not None:
        fractions = fractions[chosen]
    return math.fsum(fractions) / fractions.size


@dataclass
class MetricsRow:
    model: str
    avg_size_or_eps: float
    step: int
    variance_reduction: float | None
    flag: str | None
    purity: float | None
    num_clusters: int
    size_histogram: dict[int, int] = field(default_factory=dict)


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for r in self.rows:
                writer.writerow([
                    r.model,
                    repr(float(r.avg_size_or_eps)),
                    r.step,
                    "" if r.variance_reduction is None else repr(float(r.variance_reduction)),
                    "" if r.purity is None else repr(float(r.purity)),
                    r.num_clusters,
                ])

    def to_json(self, path) -> None:
        payload = {
            "rows": [
                {
                    "model": r.model,
                    "avg_size_or_eps": r.avg_size_or_eps,
                    "step": r.step,
                    "variance_reduction": r.variance_reduction,
                    "flag": r.flag,
                    "purity": r.purity,
                    "num_clusters": r.num_clusters,
                    "size_histogram": {str(k): v for k, v in sorted(r.size_histogram.items())},
                }
                for r in self.rows
            ]
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "MetricsReport":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        rows = [
            MetricsRow(
                model=obj["model"],
                avg_size_or_eps=float(obj["avg_size_or_eps"]),
                step=int(obj["step"]),
                variance_reduction=obj.get("variance_reduction"),
                flag=obj.get("flag"),
                purity=obj.get("purity"),
                num_clusters=int(obj["num_clusters"]),
                size_histogram={int(k): int(v)
                                for k, v in (obj.get("size_histogram") or {}).items()},
            )
            for obj in payload["rows"]
        ]
        return cls(rows)


def _granularity(clustering: Clustering) -> float:
    prov = clustering.provenance
    if "avg_size" in prov:
        return float(prov["avg_size"])
    if "epsilon" in prov:
        return float(prov["epsilon"])
    return float(len(clustering)) / clustering.num_clusters


def checkpoint_sweep(clusterings, loss_tables, sources=None) -> MetricsReport:
    """Metrics for every (clustering, checkpoint) cell.

    ``loss_tables`` maps checkpoint step to a per-example loss array. Rows
    are ordered by clustering input order, then by ascending step. Degenerate
    cells keep their flag and an empty value instead of aborting the sweep.
    """
    tables = {int(step): np.asarray(vals) for step, vals in dict(loss_tables).items()}
    steps = sorted(tables)
    if not steps:
        raise ValueError("no loss tables supplied")
    report = MetricsReport()
    for clustering in clusterings:
        purity = None
        if sources is not None:
            purity = cluster_purity(clustering, sources)
        model = str(clustering.provenance.get("model", "default"))
        gran = _granularity(clustering)
        hist = clustering.size_histogram()
        for step in steps:
            flag = None
            try:
                vr = variance_reduction(clustering, tables[step])
            except ConstantLossError:
                vr, flag = None, FLAG_CONSTANT_LOSS
            except ZeroWithinVarianceError:
                vr, flag = None, FLAG_INFINITE
            report.rows.append(MetricsRow(
                model=model,
                avg_size_or_eps=gran,
                step=step,
                variance_reduction=vr,
                flag=flag,
                purity=purity,
                num_clusters=clustering.num_clusters,
                size_histogram=hist,
            ))
    return report
