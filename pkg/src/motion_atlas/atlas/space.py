"""Atlas space: displacement fields, push-forward into the atlas and the
local cylindrical (radial, circumferential, longitudinal) basis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..geometry import AhaLabels, GeometryError, TriSurface

FRAMES = ("subject", "atlas", "local")


class FrameMismatch(ValueError):
    """Displacement field in the wrong coordinate frame."""


@dataclass(frozen=True)
class DisplacementField:
    """Per-vertex displacement vectors over frames, shape (T, n, 3).

    ``frame`` says which coordinates the vectors are expressed in; in the
    ``local`` frame the components are (radial, circumferential,
    longitudinal).
    """

    values: np.ndarray
    frame: str = "subject"

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValueError(f"displacements must have shape (T, n, 3), got {v.shape}")
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame {self.frame!r}")
        object.__setattr__(self, "values", v)

    @property
    def n_frames(self):
        return self.values.shape[0]

    @property
    def n_vertices(self):
        return self.values.shape[1]

    def require(self, frame):
        if self.frame != frame:
            raise FrameMismatch(f"expected a {frame} field, got {self.frame}")
        return self


@dataclass(frozen=True)
class LocalBasis:
    """Unit radial, circumferential and longitudinal vectors per vertex."""

    radial: np.ndarray
    circumferential: np.ndarray
    longitudinal: np.ndarray

    def matrices(self):
        """(n, 3, 3) with rows (radial, circumferential, longitudinal)."""
        return np.stack([self.radial, self.circumferential, self.longitudinal], axis=1)


def pushforward(u, transform, r):
    """Map subject-frame displacements into the atlas: ``J(r) u``.

    The Jacobian of ``transform`` is evaluated once at the end-diastolic
    positions ``r`` and applied to every frame (small-deformation reading).
    ``transform`` needs a ``jacobian(points)`` method returning (n, 3, 3).
    """
    u.require("subject")
    r = np.asarray(r, float)
    if r.shape != (u.n_vertices, 3):
        raise ValueError("reference positions do not match the field")
    J = transform.jacobian(r)
    if J.ndim == 2:
        J = np.broadcast_to(J, (len(r), 3, 3))
    return DisplacementField(np.einsum("nij,tnj->tni", J, u.values), "atlas")


def project_local(u, basis):
    """Components of atlas-frame vectors on the local basis."""
    u.require("atlas")
    M = basis.matrices()
    if len(M) != u.n_vertices:
        raise ValueError("basis and field have different vertex counts")
    return DisplacementField(np.einsum("nij,tnj->tni", M, u.values), "local")


def principal_axis(points, base_point=None):
    """Unit eigenvector of the largest covariance eigenvalue.

    Oriented from ``base_point`` towards the bulk of the points (base to
    apex) when given, otherwise so that its largest component is positive.
    """
    p = np.asarray(points, float)
    c = p.mean(0)
    w, V = np.linalg.eigh(np.cov((p - c).T, bias=True))
    a = V[:, -1]
    if base_point is not None:
        if (c - np.asarray(base_point, float)) @ a < 0:
            a = -a
    elif a[np.argmax(np.abs(a))] < 0:
        a = -a
    return a / np.linalg.norm(a), c


def _vertex_neighbours(faces, n):
    nb = [set() for _ in range(n)]
    for f in faces:
        for i in range(3):
            nb[f[i]].update((f[(i + 1) % 3], f[(i + 2) % 3]))
    return nb


def cylindrical_frames(vertices, faces, long_axis, axis_point, tol=1e-6):
    """Local cylindrical basis about an axis line.

    Vertices within ``tol`` mm of the axis borrow the averaged radial
    direction of their off-axis neighbours; when those cancel out (a vertex
    ringed symmetrically by its neighbours) the lowest-index neighbour's
    radial direction is used.
    """
    v = np.asarray(vertices, float)
    a = np.asarray(long_axis, float)
    a = a / np.linalg.norm(a)
    rel = v - np.asarray(axis_point, float)
    perp = rel - np.outer(rel @ a, a)
    dist = np.linalg.norm(perp, axis=1)
    on = dist <= tol
    radial = np.zeros_like(v)
    radial[~on] = perp[~on] / dist[~on, None]
    if on.any():
        nb = _vertex_neighbours(np.asarray(faces), len(v))
        for i in np.flatnonzero(on):
            good = sorted(j for j in nb[i] if not on[j])
            if not good:
                raise GeometryError(f"vertex {i} lies on the long axis with no off-axis neighbour")
            m = radial[good].mean(0)
            m -= (m @ a) * a
            if np.linalg.norm(m) < 1e-3:
                m = radial[good[0]]
            radial[i] = m / np.linalg.norm(m)
    longitudinal = np.broadcast_to(a, v.shape).copy()
    circ = np.cross(longitudinal, radial)
    return LocalBasis(radial, circ, longitudinal)


@dataclass
class AtlasSpace:
    """Mean medial mesh with its long axis, local bases and AHA labels.

    ``weights`` maps stacked subject wall vertices (endo then epi) to the
    medial vertices; ``reference`` is the mean end-diastolic wall.
    """

    surface: TriSurface
    long_axis: np.ndarray
    axis_point: np.ndarray
    basis: LocalBasis | None = None
    labels: AhaLabels | None = None
    weights: sp.csr_matrix | None = None
    n_endo: int = 0
    rv_landmark: int = 0

    def __post_init__(self):
        a = np.asarray(self.long_axis, float)
        self.long_axis = a / np.linalg.norm(a)
        self.axis_point = np.asarray(self.axis_point, float)
        if self.basis is None:
            self.basis = cylindrical_basis(self)

    @property
    def n_vertices(self):
        return self.surface.n_vertices


def cylindrical_basis(atlas, tol=1e-6):
    """Per-vertex local basis of an :class:`AtlasSpace`."""
    return cylindrical_frames(atlas.surface.vertices, atlas.surface.faces,
                              atlas.long_axis, atlas.axis_point, tol)
