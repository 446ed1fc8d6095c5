"""Principal component descriptors."""
from __future__ import annotations

import numpy as np

from .base import Embedding, rms_mm, standardize


class EmbeddingError(ValueError):
    pass


def pca_components(Z):
    """Left singular vectors and singular values of centred rows."""
    U, s, _ = np.linalg.svd(Z, full_matrices=False)
    return U, s


def n_for_variance(s, target):
    """Smallest k whose leading components explain ``target`` of the variance."""
    var = s**2
    total = var.sum()
    if total <= 0:
        raise EmbeddingError("zero-variance data: d would be 0")
    frac = np.cumsum(var) / total
    return int(np.searchsorted(frac, target - 1e-12) + 1)


def pca_fit(X, variance_target=0.99, n_components=None, standardize_rows=True):
    """PCA scores of an L x N feature matrix.

    Parameters
    ----------
    X : L x N array or FeatureMatrix
    variance_target : share of variance to keep when ``n_components`` is None
    n_components : fixed d, overriding the variance rule

    Returns
    -------
    Embedding
        ``D`` holds the top-d component scores; ``epsilon`` is the RMS
        reconstruction error in the units of X.
    """
    Z, mean, scale, ids = standardize(X, standardize_rows)
    if Z.shape[1] < 2:
        raise EmbeddingError("PCA needs at least two subjects")
    U, s = pca_components(Z)
    if n_components is None:
        d = n_for_variance(s, variance_target)
    else:
        d = int(n_components)
        if not 1 <= d <= min(Z.shape):
            raise EmbeddingError(f"d={d} outside 1..{min(Z.shape)}")
        if not np.any(s > 0):
            raise EmbeddingError("zero-variance data: d would be 0")
    Uk = U[:, :d]
    D = Uk.T @ Z
    eps = rms_mm(Z - Uk @ D, scale)
    hp = {"variance_target": variance_target, "standardized": standardize_rows,
          "explained_variance": float((s[:d] ** 2).sum() / (s**2).sum())}
    return Embedding(D, "pca", eps, hp, subject_ids=ids)
