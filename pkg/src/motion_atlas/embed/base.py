"""Embedding container, standardization helpers and the JSON bundle."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMatrix, row_statistics

METHODS = ("pca", "lle", "sda")
BUNDLE_FORMAT = "motion_atlas.embedding/1"


@dataclass
class Embedding:
    """d x N descriptors with the reconstruction error (mm) and settings.

    ``curve`` maps candidate d to the error seen during the grid search.
    """

    D: np.ndarray
    method: str
    epsilon: float
    hyperparameters: dict = field(default_factory=dict)
    curve: dict = field(default_factory=dict)
    subject_ids: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def __post_init__(self):
        self.D = np.atleast_2d(np.asarray(self.D, float))
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    @property
    def d(self):
        return self.D.shape[0]

    @property
    def n_subjects(self):
        return self.D.shape[1]

    def to_dict(self):
        return {
            "format": BUNDLE_FORMAT,
            "method": self.method,
            "d": self.d,
            "epsilon_mm": float(self.epsilon),
            "hyperparameters": _jsonable(self.hyperparameters),
            "curve": [[int(k), float(v)] for k, v in sorted(self.curve.items())],
            "notes": list(self.notes),
            "subject_ids": list(self.subject_ids),
            "D": self.D.tolist(),
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != BUNDLE_FORMAT:
            raise ValueError(f"not an embedding bundle (format={doc.get('format')!r})")
        D = np.array(doc["D"], float).reshape(int(doc["d"]), -1)
        return cls(D, doc["method"], float(doc["epsilon_mm"]), doc.get("hyperparameters", {}),
                   {int(k): float(v) for k, v in doc.get("curve", [])},
                   doc.get("subject_ids", []), doc.get("notes", []))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(doc)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def standardize(X, standardize=True):
    """Return ``(Z, mean, scale, ids)`` for an L x N array or FeatureMatrix.

    Rows are centred; when ``standardize`` is true they are also divided by
    their standard deviation.
    """
    if isinstance(X, FeatureMatrix):
        ids = list(X.subject_ids)
        mean, scale = X.mean, X.scale
        X = X.X
    else:
        X = np.asarray(X, float)
        if X.ndim != 2:
            raise ValueError("X must be an L x N matrix")
        ids = []
        mean, scale = row_statistics(X)
    if not standardize:
        scale = np.ones_like(scale)
    return (X - mean[:, None]) / scale[:, None], mean, scale, ids


def rms_mm(Z_err, scale):
    """RMS of standardized residuals after undoing the row scaling."""
    return float(np.sqrt(np.mean((Z_err * scale[:, None]) ** 2)))
