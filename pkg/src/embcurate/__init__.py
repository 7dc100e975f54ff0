"""Embedding-space clustering, curation, and loss-variance evaluation.

The package groups a corpus of document embeddings into fine-grained
clusters (balanced K-means or threshold-bounded agglomerative merging),
scores clusterings by how much they explain per-example training loss,
and selects budgeted representative subsets for curation.
"""

from .clustering import Clustering, ClusteringError, read_clustering, write_clustering
from .corpus import (Corpus, CorpusFormatError, ExampleRecord, PackedSequence,
                     pack_documents, read_embeddings, read_metadata,
                     unpack_documents, write_embeddings, write_metadata)
from .curation import BudgetError, CurationPlan, curate, random_baseline
from .embedders import embed_bag_of_tokens, embed_corpus, pool_activations
from .kmeans import (BalanceConfig, InfeasibleConstraintError, balanced_kmeans,
                     kmeans_sweep)
from .metrics import (ConstantLossError, MetricsReport, MetricsRow,
                      ZeroWithinVarianceError, checkpoint_sweep, cluster_purity,
                      variance_reduction)
from .rac import (Dendrogram, DendrogramFormatError, GridExhaustedError,
                  build_dendrogram, epsilon_sweep, rac_cluster)
from .reducers import (PcaModel, ReducerFormatError, RpModel, apply_pca,
                       apply_rp, fit_pca, fit_rp, load_reducer, save_reducer)

__version__ = "0.1.0"

__all__ = [
    "BalanceConfig",
    "BudgetError",
    "Clustering",
    "ClusteringError",
    "ConstantLossError",
    "Corpus",
    "CorpusFormatError",
    "CurationPlan",
    "Dendrogram",
    "DendrogramFormatError",
    "ExampleRecord",
    "GridExhaustedError",
    "InfeasibleConstraintError",
    "MetricsReport",
    "MetricsRow",
    "PackedSequence",
    "PcaModel",
    "ReducerFormatError",
    "RpModel",
    "ZeroWithinVarianceError",
    "apply_pca",
    "apply_rp",
    "balanced_kmeans",
    "build_dendrogram",
    "checkpoint_sweep",
    "cluster_purity",
    "curate",
    "embed_bag_of_tokens",
    "embed_corpus",
    "epsilon_sweep",
    "fit_pca",
    "fit_rp",
    "kmeans_sweep",
    "load_reducer",
    "pack_documents",
    "pool_activations",
    "rac_cluster",
    "random_baseline",
    "read_clustering",
    "read_embeddings",
    "read_metadata",
    "save_reducer",
    "unpack_documents",
    "variance_reduction",
    "write_clustering",
    "write_embeddings",
    "write_metadata",
    "__version__",
]
