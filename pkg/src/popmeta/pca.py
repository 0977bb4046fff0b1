"""Principal component analysis for compressing concatenated FRF targets.

Centering only, no per-feature scaling: all FRF magnitudes share units and
scaling would distort the resonance-dominated variance structure.
"""

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class PCAModel:
    mean: np.ndarray              # (D,)
    components: np.ndarray        # (k, D), orthonormal rows
    explained_ratios: np.ndarray  # (k,), non-increasing, sum <= 1
    total_dim: int


def pca_fit(data, n_components: int = 3) -> PCAModel:
    """Fit by SVD of the centered data matrix.

    Sign convention: each component's largest-magnitude entry is positive,
    which makes the fit fully deterministic.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("data must be an N x D matrix")
    n, dim = data.shape
    if n <= n_components or dim < n_components:
        raise ValueError(f"need N > {n_components} rows and D >= {n_components} columns")
    mean = data.mean(axis=0)
    centered = data - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    variances = svals**2  # proportional to covariance eigenvalues
    total = variances.sum()
    if total <= 0 or not np.isfinite(total):
        raise ValueError("data has zero variance; nothing to decompose")
    components = vt[:n_components].copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PCAModel(
        mean=mean,
        components=components,
        explained_ratios=variances[:n_components] / total,
        total_dim=dim,
    )


def pca_transform(model: PCAModel, x) -> np.ndarray:
    """Project vectors onto the component subspace: components @ (x - mean)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.total_dim:
        raise ValueError(f"expected dimension {model.total_dim}, got {x.shape[-1]}")
    return (x - model.mean) @ model.components.T


def pca_inverse(model: PCAModel, z) -> np.ndarray:
    """Map latent coordinates back: mean + components^T @ z."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.components.shape[0]:
        raise ValueError(f"expected {model.components.shape[0]} latent coordinates")
    return model.mean + z @ model.components


def pca_to_dict(model: PCAModel) -> dict:
    return {
        "mean": model.mean.tolist(),
        "components": model.components.tolist(),
        "explained_ratios": model.explained_ratios.tolist(),
        "total_dim": model.total_dim,
    }


def pca_from_dict(obj: dict) -> PCAModel:
    return PCAModel(
        mean=np.asarray(obj["mean"], dtype=np.float64),
        components=np.asarray(obj["components"], dtype=np.float64),
        explained_ratios=np.asarray(obj["explained_ratios"], dtype=np.float64),
        total_dim=int(obj["total_dim"]),
    )


def save_pca(model: PCAModel, path):
    with open(path, "w") as fh:
        json.dump(pca_to_dict(model), fh)


def load_pca(path) -> PCAModel:
    with open(path) as fh:
        return pca_from_dict(json.load(fh))
