"""Clustering container and the shared example_id,cluster_id CSV format."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

CSV_HEADER = ("example_id", "cluster_id")


class ClusteringError(ValueError):
    pass


@dataclass
class Clustering:
    """A partition of n examples into num_clusters non-empty clusters.

    Cluster ids are dense in [0, num_clusters). ``provenance`` records how
    the partition was produced (algorithm, granularity, seed, model tag).
    """

    assignments: np.ndarray
    num_clusters: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        if self.assignments.ndim != 1 or self.assignments.size == 0:
            raise ClusteringError("assignments must be a non-empty 1-d array")
        sizes = np.bincount(self.assignments, minlength=self.num_clusters)
        if self.assignments.min() < 0 or self.assignments.max() >= self.num_clusters:
            raise ClusteringError("cluster ids must lie in [0, num_clusters)")
        if len(sizes) != self.num_clusters or (sizes == 0).any():
            raise ClusteringError("cluster ids must be dense with no empty clusters")

    @classmethod
    def from_labels(cls, labels, provenance=None) -> "Clustering":
        """Relabel arbitrary integer labels densely (sorted unique order)."""
        labels = np.asarray(labels)
        uniq, dense = np.unique(labels, return_inverse=True)
        return cls(dense.astype(np.int64), len(uniq), dict(provenance or {}))

    def __len__(self) -> int:
        return self.assignments.size

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.num_clusters)

    def size_histogram(self) -> dict[int, int]:
        vals, counts = np.unique(self.sizes(), return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}


def write_clustering(path, clustering: Clustering, example_ids=None) -> None:
    """Write the two-column CSV; example ids default to row indices."""
    n = len(clustering)
    if example_ids is None:
        example_ids = range(n)
    else:
        example_ids = [int(x) for x in example_ids]
        if len(example_ids) != n:
            raise ClusteringError(f"{len(example_ids)} example ids for {n} assignments")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for eid, cid in zip(example_ids, clustering.assignments.tolist()):
            writer.writerow([eid, cid])


def read_clustering(path, provenance=None) -> tuple[np.ndarray, Clustering]:
    """Read the CSV back as (example_ids, Clustering)."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ClusteringError(f"{path}: expected header {','.join(CSV_HEADER)}")
        ids = []
        labels = []
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise ClusteringError(f"{path}: malformed row {row!r}")
            ids.append(int(row[0]))
            labels.append(int(row[1]))
    if not labels:
        raise ClusteringError(f"{path}: no assignments")
    labels = np.array(labels, dtype=np.int64)
    num = int(labels.max()) + 1
    sizes = np.bincount(labels, minlength=num)
    if (sizes == 0).any() or labels.min() < 0:
        clustering = Clustering.from_labels(labels, provenance)
    else:
        clustering = Clustering(labels, num, dict(provenance or {}))
    return np.array(ids, dtype=np.int64), clustering
