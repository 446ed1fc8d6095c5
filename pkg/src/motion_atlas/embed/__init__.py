"""Regional motion features and low-dimensional descriptors."""
from .base import BUNDLE_FORMAT, METHODS, Embedding, standardize
from .estimators import LLEEmbedding, PCAEmbedding, RegionalFeatures, SDAEmbedding
from .features import (COMPONENTS, FeatureMatrix, build_features, feature_index, feature_key,
                       regional_average)
from .grid import candidate_dims, grid_search_d
from .lle import LleConfig, barycentric_weights, knn, lle_fit, reconstruct_lle
from .pca import EmbeddingError, pca_fit
from .sda import DivergenceError, SdaConfig, default_widths, gradient_check, sda_fit

__all__ = [
    "BUNDLE_FORMAT", "METHODS", "Embedding", "standardize", "LLEEmbedding", "PCAEmbedding",
    "RegionalFeatures", "SDAEmbedding", "COMPONENTS", "FeatureMatrix", "build_features",
    "feature_index", "feature_key", "regional_average", "candidate_dims", "grid_search_d",
    "LleConfig", "barycentric_weights", "knn", "lle_fit", "reconstruct_lle", "EmbeddingError",
    "pca_fit", "DivergenceError", "SdaConfig", "default_widths", "gradient_check", "sda_fit",
]
