"""Dimensionality reducers: standardized PCA and seeded sparse random projection.

Both reducers project to k dimensions and L2-normalize the output rows.
Rows with exactly zero norm after projection are replaced by the first unit
basis vector e1 and reported (via logging and an optional collector list).

Reducer file format (``.red``): magic ``RED1``, little-endian uint32 scheme
(1 = PCA, 2 = random projection), uint32 input dim, uint32 output dim, then
the scheme payload. PCA stores mean, scale, explained variances, and
components as float64; the projection stores only its int64 seed, since the
matrix is regenerated deterministically from it.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg

log = logging.getLogger(__name__)

RED_MAGIC = b"RED1"
_SCHEME_PCA = 1
_SCHEME_RP = 2
DENSE_SOLVER_MAX_DIM = 1024
_ITERATIVE_TOL = 1e-8


class ReducerFormatError(ValueError):
    pass


@dataclass
class PcaModel:
    mean: np.ndarray                # (d,)
    scale: np.ndarray               # (d,) population std, 1.0 for constant dims
    components: np.ndarray          # (k, d) orthonormal rows, variance-descending
    explained_variance: np.ndarray  # (k,) non-increasing

    @property
    def in_dim(self) -> int:
        return self.components.shape[1]

    @property
    def k(self) -> int:
        return self.components.shape[0]


@dataclass
class RpModel:
    in_dim: int
    k: int
    seed: int
    matrix: np.ndarray  # (k, d) entries in {-sqrt(d/k), 0, +sqrt(d/k)}


def _standardize_params(sample: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(sample, dtype=np.float64)
    mean = x.mean(axis=0)
    var = ((x - mean) ** 2).mean(axis=0)  # population variance
    scale = np.sqrt(var)
    scale[scale == 0.0] = 1.0
    return mean, scale

def fit_pca(sample, k: int) -> PcaModel:
    """Fit standardized PCA on the sample.

    Dimensions are centered and divided by their population std (constant
    dimensions pass through with scale 1). For d <= 1024 the covariance is
    eigendecomposed densely; above that an iterative symmetric top-k solver
    with tolerance 1e-8 is used. Identical inputs give bit-identical models.
    """
    x = np.asarray(sample, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"sample must be 2-d, got shape {x.shape}")
    n, d = x.shape
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
    if n < 2:
        raise ValueError(f"need at least 2 sample rows, got {n}")
    mean, scale = _standardize_params(x)
    z = (x - mean) / scale
    cov = (z.T @ z) / n
    if d <= DENSE_SOLVER_MAX_DIM:
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals, kind="stable")[::-1][:k]
    else:
        v0 = np.full(d, 1.0 / np.sqrt(d))
        eigvals, eigvecs = scipy.sparse.linalg.eigsh(
            cov, k=k, which="LA", v0=v0, tol=_ITERATIVE_TOL
        )
        order = np.argsort(eigvals, kind="stable")[::-1]
    components = eigvecs[:, order].T.copy()
    explained = np.maximum(eigvals[order], 0.0)
    # Fixed sign convention so refits are bit-identical: the largest-magnitude
    # coefficient of each component is made positive.
    for row in components:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return PcaModel(mean=mean, scale=scale, components=components,
                    explained_variance=explained)


def _finalize_rows(y: np.ndarray, degenerate_rows=None) -> np.ndarray:
    """L2-normalize rows; zero rows become e1 and are reported."""
    norms = np.sqrt((y * y).sum(axis=1))
    zero = norms == 0.0
    if zero.any():
        idx = np.nonzero(zero)[0]
        log.warning("replaced %d zero-norm rows with e1 (first rows: %s)",
                    idx.size, idx[:8].tolist())
        if degenerate_rows is not None:
            degenerate_rows.extend(int(i) for i in idx)
        y[zero, :] = 0.0
        y[zero, 0] = 1.0
        norms[zero] = 1.0
    return (y / norms[:, None]).astype(np.float32)


def apply_pca(model: PcaModel, x, degenerate_rows=None) -> np.ndarray:
    """Standardize, project onto the components, and unit-normalize rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ValueError(f"expected shape (n, {model.in_dim}), got {x.shape}")
    y = ((x - model.mean) / model.scale) @ model.components.T
    return _finalize_rows(y, degenerate_rows)


def fit_rp(in_dim: int, k: int, seed: int) -> RpModel:
    """Draw the sparse projection: entries -v, 0, +v with probabilities
    1/4, 1/2, 1/4, where v = sqrt(in_dim) / sqrt(k)."""
    if not 1 <= k <= in_dim:
        raise ValueError(f"need 1 <= k <= in_dim, got k={k}, in_dim={in_dim}")
    rng = np.random.Generator(np.random.PCG64(seed))
    v = np.sqrt(in_dim) / np.sqrt(k)
    u = rng.random((k, in_dim))
    matrix = np.where(u < 0.25, -v, np.where(u < 0.75, 0.0, v))
    return RpModel(in_dim=in_dim, k=k, seed=int(seed), matrix=matrix)


def apply_rp(model: RpModel, x, degenerate_rows=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ValueError(f"expected shape (n, {model.in_dim}), got {x.shape}")
    y = x @ model.matrix.T
    return _finalize_rows(y, degenerate_rows)


def save_reducer(path, model) -> None:
    with open(path, "wb") as fh:
        if isinstance(model, PcaModel):
            d, k = model.in_dim, model.k
            fh.write(struct.pack("<4sIII", RED_MAGIC, _SCHEME_PCA, d, k))
            for arr in (model.mean, model.scale, model.explained_variance,
                        model.components):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        elif isinstance(model, RpModel):
            fh.write(struct.pack("<4sIII", RED_MAGIC, _SCHEME_RP, model.in_dim, model.k))
            fh.write(struct.pack("<q", model.seed))
        else:
            raise TypeError(f"unknown reducer model {type(model).__name__}")


def load_reducer(path):
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sIII"))
        if len(header) < struct.calcsize("<4sIII"):
            raise ReducerFormatError(f"{path}: malformed header")
        magic, scheme, d, k = struct.unpack("<4sIII", header)
        if magic != RED_MAGIC:
            raise ReducerFormatError(f"{path}: bad magic {magic!r}")
        if scheme == _SCHEME_PCA:
            def block(count):
                raw = fh.read(count * 8)
                if len(raw) != count * 8:
                    raise ReducerFormatError(f"{path}: truncated payload")
                return np.frombuffer(raw, dtype="<f8").astype(np.float64)
            mean = block(d)
            scale = block(d)
            explained = block(k)
            components = block(k * d).reshape(k, d)
            return PcaModel(mean, scale, components, explained)
        if scheme == _SCHEME_RP:
            raw = fh.read(8)
            if len(raw) != 8:
                raise ReducerFormatError(f"{path}: truncated payload")
            (seed,) = struct.unpack("<q", raw)
            return fit_rp(d, k, seed)
        raise ReducerFormatError(f"{path}: unknown scheme {scheme}")
