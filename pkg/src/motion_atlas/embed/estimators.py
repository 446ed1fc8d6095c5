"""scikit-learn style wrappers.

The estimators take the usual samples-by-features layout (N x L, one row
per subject) and hand the transposed matrix to the functional routines.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .features import build_features, row_statistics
from .grid import grid_search_d
from .lle import LleConfig, barycentric_weights, lle_fit
from .pca import pca_fit
from .sda import SdaConfig, sda_fit


class _EmbeddingEstimator(TransformerMixin, BaseEstimator):
    standardize: bool

    def _prepare(self, X):
        X = check_array(X, dtype=float)
        self.mean_, self.scale_ = row_statistics(X.T)
        if not self.standardize:
            self.scale_ = np.ones_like(self.scale_)
        self.n_features_in_ = X.shape[1]
        return X

    def _z(self, X):
        check_is_fitted(self, "embedding_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return (X - self.mean_) / self.scale_

    @property
    def epsilon_(self):
        return self.embedding_.epsilon


class PCAEmbedding(_EmbeddingEstimator):
    """PCA descriptors keeping ``variance_target`` of the variance."""

    def __init__(self, variance_target=0.99, n_components=None, standardize=True):
        self.variance_target = variance_target
        self.n_components = n_components
        self.standardize = standardize

    def fit(self, X, y=None):
        X = self._prepare(X)
        self.embedding_ = pca_fit(X.T, self.variance_target, self.n_components, self.standardize)
        Z = (X - self.mean_) / self.scale_
        U, _, _ = np.linalg.svd(Z.T, full_matrices=False)
        self.components_ = U[:, : self.embedding_.d].T
        return self

    def transform(self, X):
        return self._z(X) @ self.components_.T


class LLEEmbedding(_EmbeddingEstimator):
    """LLE descriptors; ``n_components=None`` selects d by grid search.

    New subjects are placed with barycentric weights over their training
    neighbours.
    """

    def __init__(self, n_neighbors=10, n_components=None, reg=1e-3, standardize=True,
                 n_jobs=1):
        self.n_neighbors = n_neighbors
        self.n_components = n_components
        self.reg = reg
        self.standardize = standardize
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        X = self._prepare(X)
        if self.n_components is None:
            cfg = LleConfig(self.n_neighbors, 2, self.reg)
            self.embedding_, self.curve_ = grid_search_d("lle", X.T, cfg, standardize_rows=self.standardize,
                                                         n_jobs=self.n_jobs)
        else:
            cfg = LleConfig(self.n_neighbors, self.n_components, self.reg)
            self.embedding_ = lle_fit(X.T, cfg, self.standardize)
            self.curve_ = {}
        self.train_ = (X - self.mean_) / self.scale_
        return self

    def transform(self, X):
        Z = self._z(X)
        T = self.train_
        d2 = (Z**2).sum(1)[:, None] + (T**2).sum(1)[None, :] - 2 * Z @ T.T
        nbrs = np.argsort(d2, axis=1, kind="stable")[:, : self.n_neighbors]
        W = np.empty(nbrs.shape)
        for i, row in enumerate(nbrs):
            P = np.vstack([Z[i], T[row]])
            W[i] = barycentric_weights(P, np.arange(1, len(P))[None, :], self.reg)[0]
        Y = self.embedding_.D.T
        return np.einsum("nk,nkd->nd", W, Y[nbrs])

    def fit_transform(self, X, y=None):
        return self.fit(X).embedding_.D.T


class SDAEmbedding(_EmbeddingEstimator):
    """Stacked denoising autoencoder descriptors; ``n_components=None``
    selects the code width by grid search."""

    def __init__(self, n_components=None, widths=(), learning_rate=0.001, corruption=0.5,
                 pretrain_epochs=500, finetune_epochs=500, batch_size=32, seed=0,
                 standardize=True, n_jobs=1):
        self.n_components = n_components
        self.widths = widths
        self.learning_rate = learning_rate
        self.corruption = corruption
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.batch_size = batch_size
        self.seed = seed
        self.standardize = standardize
        self.n_jobs = n_jobs

    def config(self):
        return SdaConfig(tuple(self.widths), self.learning_rate, self.corruption,
                         self.pretrain_epochs, self.finetune_epochs, self.batch_size, self.seed)

    def fit(self, X, y=None):
        X = self._prepare(X)
        if self.n_components is None:
            self.embedding_, self.curve_ = grid_search_d("sda", X.T, self.config(),
                                                         standardize_rows=self.standardize,
                                                         n_jobs=self.n_jobs)
        else:
            self.embedding_ = sda_fit(X.T, self.config(), d=self.n_components,
                                      standardize_rows=self.standardize)
            self.curve_ = {}
        self.model_ = self.embedding_.model
        return self

    def transform(self, X):
        return self.model_.encode(self._z(X))


class RegionalFeatures(TransformerMixin, BaseEstimator):
    """Map per-subject local displacements (T, n, 3) to N x L feature rows."""

    def __init__(self, labels=None, n_frames=None):
        self.labels = labels
        self.n_frames = n_frames

    def fit(self, X=None, y=None):
        if self.labels is None:
            raise ValueError("labels are required")
        return self

    def transform(self, X):
        return build_features(list(X), self.labels, self.n_frames).X.T
