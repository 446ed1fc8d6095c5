"""Locally linear embedding and its barycentric reconstruction error."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .base import Embedding, rms_mm, standardize
from .pca import EmbeddingError


@dataclass(frozen=True)
class LleConfig:
    n_neighbors: int = 10
    n_components: int = 2
    reg: float = 1e-3

    def check(self, n_samples):
        if self.n_neighbors < 1:
            raise EmbeddingError("need at least one neighbour")
        if self.n_neighbors >= n_samples:
            raise EmbeddingError(f"s={self.n_neighbors} must be smaller than N={n_samples}")
        if not 1 <= self.n_components < n_samples:
            raise EmbeddingError(f"d={self.n_components} must lie in 1..N-1")
        if self.reg < 0:
            raise EmbeddingError("regularization must be non-negative")


def knn(P, k):
    """Indices of the k nearest other points for each row of P (n, dim)."""
    sq = (P**2).sum(1)
    d2 = sq[:, None] + sq[None, :] - 2 * P @ P.T
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def barycentric_weights(P, nbrs, reg=1e-3):
    """Weights w_i (summing to one) that best rebuild P[i] from P[nbrs[i]].

    The local Gram matrix gets ``reg * trace`` added to its diagonal, which
    also makes the solve well posed when neighbours outnumber dimensions.
    """
    n, k = nbrs.shape
    W = np.empty((n, k))
    ones = np.ones(k)
    for i in range(n):
        Zi = P[nbrs[i]] - P[i]
        C = Zi @ Zi.T
        tr = np.trace(C)
        C.flat[:: k + 1] += reg * tr if tr > 0 else reg
        try:
            w = sla.solve(C, ones, assume_a="pos")
        except (sla.LinAlgError, ValueError):
            w = sla.lstsq(C, ones)[0]
        W[i] = w / w.sum()
    return W


def _check_connected(nbrs):
    n, k = nbrs.shape
    A = csr_matrix((np.ones(n * k), (np.repeat(np.arange(n), k), nbrs.ravel())), shape=(n, n))
    n_comp, lab = connected_components(A, directed=False)
    if n_comp > 1:
        parts = [np.flatnonzero(lab == c)[:5].tolist() for c in range(n_comp)]
        raise EmbeddingError(f"neighbour graph has {n_comp} components; first members {parts}")


def lle_embed(Z, config):
    """Embedding coordinates (N, d) and neighbour indices for columns of Z."""
    P = Z.T
    n = len(P)
    config.check(n)
    nbrs = knn(P, config.n_neighbors)
    _check_connected(nbrs)
    W = barycentric_weights(P, nbrs, config.reg)
    rows = np.repeat(np.arange(n), config.n_neighbors)
    IW = np.eye(n)
    IW[rows, nbrs.ravel()] -= W.ravel()
    M = IW.T @ IW
    d = config.n_components
    _, E = sla.eigh(M, subset_by_index=[0, d])
    # drop the constant direction, whichever eigenvector carries it
    Ec = E - E.mean(0)
    U, s, _ = np.linalg.svd(Ec, full_matrices=False)
    Y = U[:, :d]
    # deterministic sign: largest-magnitude entry positive
    sign = np.sign(Y[np.argmax(np.abs(Y), axis=0), np.arange(d)])
    return Y * sign, nbrs, W


def reconstruct_lle(X, embedding, reg=1e-9):
    """Barycentric reconstruction error (mm) of an LLE embedding.

    Each column is rebuilt from its stored neighbours with weights solved in
    the embedding space; the error is the RMS over all L x N entries after
    undoing the standardization.
    """
    Z, _, scale, _ = standardize(X, embedding.hyperparameters.get("standardized", True))
    nbrs = np.asarray(embedding.hyperparameters["neighbors"])
    Y = embedding.D.T
    W = barycentric_weights(Y, nbrs, reg)
    Zhat = np.einsum("nk,nkl->ln", W, Z.T[nbrs])
    return rms_mm(Z - Zhat, scale)


def lle_fit(X, config=None, standardize_rows=True):
    """LLE descriptors of an L x N feature matrix."""
    config = config or LleConfig()
    Z, _, _, ids = standardize(X, standardize_rows)
    Y, nbrs, _ = lle_embed(Z, config)
    hp = {"n_neighbors": config.n_neighbors, "reg": config.reg,
          "standardized": standardize_rows, "neighbors": nbrs.tolist()}
    emb = Embedding(Y.T, "lle", 0.0, hp, subject_ids=ids)
    emb.epsilon = reconstruct_lle(X, emb)
    return emb
