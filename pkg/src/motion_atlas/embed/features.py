"""Regional motion features.

Feature rows follow a fixed order: frame-major, then AHA region, then
component (radial, circumferential, longitudinal), so that

    row = (t * n_regions + (region - 1)) * 3 + component
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import N_AHA, AhaLabels, GeometryError

COMPONENTS = ("radial", "circumferential", "longitudinal")


def feature_index(t, region, component, n_regions=N_AHA):
    """Row of ``(frame t, region 1..A, component 0..2)``."""
    return (t * n_regions + (region - 1)) * 3 + component


def feature_key(row, n_regions=N_AHA):
    """Inverse of :func:`feature_index`: ``(t, region, component)``."""
    t, rest = divmod(row, 3 * n_regions)
    a, c = divmod(rest, 3)
    return t, a + 1, c


@dataclass
class FeatureMatrix:
    """L x N matrix of regional displacements, one column per subject.

    ``mean`` and ``scale`` are the per-row standardization statistics.
    """

    X: np.ndarray
    n_frames: int
    n_regions: int = N_AHA
    subject_ids: list = field(default_factory=list)
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, float)
        if self.X.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        if self.X.shape[0] != 3 * self.n_regions * self.n_frames:
            raise ValueError(f"L = {self.X.shape[0]} does not equal 3*A*T = "
                             f"{3 * self.n_regions * self.n_frames}")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("non-finite feature")
        if not self.subject_ids:
            self.subject_ids = [f"S{i:04d}" for i in range(self.X.shape[1])]
        if self.mean is None:
            self.mean, self.scale = row_statistics(self.X)

    @property
    def shape(self):
        return self.X.shape

    def standardized(self):
        return (self.X - self.mean[:, None]) / self.scale[:, None]


def row_statistics(X):
    """Row means and standard deviations; constant rows get scale 1."""
    mean = X.mean(axis=1)
    scale = X.std(axis=1)
    scale[scale <= 1e-12 * max(float(np.abs(X).max()), 1.0)] = 1.0
    return mean, scale


def regional_average(local, labels, n_regions=N_AHA):
    """(T, n, 3) per-vertex values -> (T, A, 3) regional means."""
    lab = labels.labels if isinstance(labels, AhaLabels) else np.asarray(labels)
    local = np.asarray(local, float)
    if local.shape[1] != len(lab):
        raise GeometryError("labels and displacements have different vertex counts")
    counts = np.bincount(lab, minlength=n_regions + 1)[1:]
    if np.any(counts == 0):
        raise GeometryError(f"empty regions: {(np.flatnonzero(counts == 0) + 1).tolist()}")
    onehot = np.zeros((n_regions, len(lab)))
    onehot[lab - 1, np.arange(len(lab))] = 1.0 / counts[lab - 1]
    return np.einsum("an,tnc->tac", onehot, local)


def build_features(local, labels, n_frames=None, subject_ids=None):
    """Stack regional averages of local displacements into an L x N matrix.

    Parameters
    ----------
    local : sequence of (T, n_medial, 3) arrays in (radial, circumferential,
        longitudinal) components, one per subject
    labels : AhaLabels on the medial mesh
    """
    cols = []
    for i, u in enumerate(local):
        u = np.asarray(getattr(u, "values", u), float)
        if n_frames is not None and u.shape[0] != n_frames:
            raise ValueError(f"subject {i}: expected {n_frames} frames, got {u.shape[0]}")
        cols.append(regional_average(u, labels).ravel())
    if not cols:
        raise ValueError("no subjects")
    X = np.stack(cols, axis=1)
    T = X.shape[0] // (3 * N_AHA)
    return FeatureMatrix(X, T, N_AHA, list(subject_ids or []))
