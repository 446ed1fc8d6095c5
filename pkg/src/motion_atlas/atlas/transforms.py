"""Similarity alignment (Procrustes, GPA) and 3D thin-plate-spline warps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation``."""

    scale: float = 1.0
    rotation: np.ndarray = None
    translation: np.ndarray = None

    def __post_init__(self):
        R = np.eye(3) if self.rotation is None else np.asarray(self.rotation, float)
        t = np.zeros(3) if self.translation is None else np.asarray(self.translation, float)
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise AlignmentError("scale must be finite and positive")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-10 or np.linalg.det(R) < 0:
            raise AlignmentError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    def __call__(self, points):
        return self.scale * np.asarray(points, float) @ self.rotation.T + self.translation

    @property
    def linear(self):
        return self.scale * self.rotation

    def jacobian(self, points):
        return np.broadcast_to(self.linear, (len(points), 3, 3)).copy()

    def inverse(self):
        Ri = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, Ri, -(Ri @ self.translation) / self.scale)

    def compose(self, other):
        """``self`` applied after ``other``."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )


def procrustes(source, target, scaling=True):
    """Least-squares similarity mapping ``source`` onto ``target``.

    Closed-form solution from the SVD of the cross-covariance; the smallest
    singular direction is flipped when needed so that the rotation is proper.

    Parameters
    ----------
    source, target : (n, 3) corresponded point sets, n >= 4
    scaling : estimate the isotropic scale (otherwise fixed at 1)

    Returns
    -------
    SimilarityTransform
    """
    a = np.asarray(source, float)
    b = np.asarray(target, float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise AlignmentError("source and target must be matching (n, 3) arrays")
    if len(a) < 4:
        raise AlignmentError("need at least 4 corresponded points")
    ma, mb = a.mean(0), b.mean(0)
    A, B = a - ma, b - mb
    sa = np.linalg.svd(A, compute_uv=False)
    if sa[1] <= 1e-12 * max(sa[0], 1e-300):
        raise AlignmentError("degenerate (collinear) source configuration")
    U, D, Vt = np.linalg.svd(B.T @ A)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[-1] = -1.0
    R = (U * S) @ Vt
    s = float((D * S).sum() / (A**2).sum()) if scaling else 1.0
    if s <= 0:
        raise AlignmentError("degenerate configuration: non-positive scale")
    return SimilarityTransform(s, R, mb - s * R @ ma)


def centroid_size(x):
    x = np.asarray(x, float)
    return float(np.sqrt(((x - x.mean(0)) ** 2).sum()))


def gpa(meshes, tol=1e-10, max_iter=100):
    """Generalized Procrustes analysis.

    The reference starts as the first mesh. Each iteration aligns every mesh
    to the reference, averages, recentres the average at the origin and
    rescales it to the mean centroid size of the inputs (so the mean stays
    in millimetres). The loop stops once the RMS vertex movement of the
    mean drops below ``tol``.

    Returns
    -------
    mean : (n, 3) array
    transforms : list of SimilarityTransform, mesh -> mean
    """
    X = [np.asarray(m, float) for m in meshes]
    if len(X) < 2:
        raise AlignmentError("GPA needs at least two meshes")
    if any(x.shape != X[0].shape for x in X):
        raise AlignmentError("meshes must have equal vertex counts")
    size = float(np.mean([centroid_size(x) for x in X]))
    mean = X[0] - X[0].mean(0)
    mean *= size / centroid_size(mean)
    delta = np.inf
    for _ in range(max_iter):
        tfs = [procrustes(x, mean) for x in X]
        new = np.mean([t(x) for t, x in zip(tfs, X)], axis=0)
        new -= new.mean(0)
        new *= size / centroid_size(new)
        # keep the reference orientation from drifting
        new = procrustes(new, mean, scaling=False)(new)
        delta = float(np.sqrt(((new - mean) ** 2).sum(1).mean()))
        mean = new
        if delta < tol:
            return mean, [procrustes(x, mean) for x in X]
    raise AlignmentError(f"GPA did not converge in {max_iter} iterations (last delta {delta:.3g})")


@dataclass(frozen=True)
class TpsWarp:
    """3D thin-plate spline ``f(x) = a0 + A x + sum_i c_i |x - p_i|``.

    ``affine`` holds ``[a0; A^T]`` as a (4, 3) array acting on ``[1, x]``;
    ``coefficients`` holds the kernel weights ``c_i`` as rows.
    """

    landmarks: np.ndarray
    coefficients: np.ndarray
    affine: np.ndarray
    regularization: float = 0.0

    @property
    def affine_matrix(self):
        """Affine part as a 3x4 ``[A | a0]``."""
        return np.column_stack([self.affine[1:].T, self.affine[0]])

    def __call__(self, points):
        x = np.atleast_2d(np.asarray(points, float))
        out = self.affine[0] + x @ self.affine[1:] + _kernel(x, self.landmarks) @ self.coefficients
        return out[0] if np.ndim(points) == 1 else out


def _kernel(a, b):
    return cdist(a, b)


def tps_fit(src, dst, regularization=0.0):
    """Thin-plate spline with kernel ``r`` mapping ``src`` onto ``dst``.

    Solves ``[K + lam I, P; P^T, 0] [c; a] = [dst; 0]`` with
    ``P = [1, src]``. With ``lam = 0`` the warp interpolates the landmarks.
    """
    p = np.asarray(src, float)
    q = np.asarray(dst, float)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3:
        raise AlignmentError("landmark sets must be matching (n, 3) arrays")
    n = len(p)
    if n < 5:
        raise AlignmentError("need at least 5 landmarks")
    if regularization < 0:
        raise AlignmentError("regularization must be non-negative")
    P = np.column_stack([np.ones(n), p])
    sv = np.linalg.svd(P - np.r_[0.0, p.mean(0)], compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        if regularization == 0:
            raise AlignmentError("coplanar landmarks make the fit ill-conditioned; use regularization > 0")
    M = np.zeros((n + 4, n + 4))
    M[:n, :n] = _kernel(p, p) + regularization * np.eye(n)
    M[:n, n:] = P
    M[n:, :n] = P.T
    rhs = np.zeros((n + 4, 3))
    rhs[:n] = q
    try:
        lu = sla.lu_factor(M, check_finite=False)
    except sla.LinAlgError as exc:
        raise AlignmentError(f"singular TPS system: {exc}") from exc
    sol = sla.lu_solve(lu, rhs, check_finite=False)
    sol += sla.lu_solve(lu, rhs - M @ sol, check_finite=False)
    if not np.all(np.isfinite(sol)):
        raise AlignmentError("singular TPS system; use regularization > 0")
    return TpsWarp(p.copy(), sol[:n], sol[n:], float(regularization))


def tps_jacobian(warp, points):
    """Analytic Jacobian ``A + sum_i c_i (x - p_i)^T / |x - p_i|``.

    The kernel gradient is taken as zero where ``x`` coincides with a
    landmark. Accepts one point (returns 3x3) or (m, 3) points.
    """
    x = np.atleast_2d(np.asarray(points, float))
    r = _kernel(x, warp.landmarks)
    inv = np.divide(1.0, r, out=np.zeros_like(r), where=r > 0)
    c, p = warp.coefficients, warp.landmarks
    # sum_l c_li (x_j - p_lj) / r_l, expanded into two matrix products
    cp = (c[:, :, None] * p[:, None, :]).reshape(len(p), 9)
    J = (np.einsum("mi,mj->mij", inv @ c, x) - (inv @ cp).reshape(-1, 3, 3)
         + warp.affine[1:].T[None])
    return J[0] if np.ndim(points) == 1 else J


@dataclass(frozen=True)
class SubjectToAtlasTransform:
    """Map from subject coordinates to atlas space: ``warp(similarity(x))``."""

    similarity: SimilarityTransform
    warp: TpsWarp | None = None

    def __call__(self, points):
        y = self.similarity(points)
        return y if self.warp is None else self.warp(y)

    def jacobian(self, points):
        """(m, 3, 3) Jacobians via the chain rule, the similarity contributing s R."""
        x = np.atleast_2d(np.asarray(points, float))
        L = self.similarity.linear
        if self.warp is None:
            J = np.broadcast_to(L, (len(x), 3, 3)).copy()
        else:
            J = tps_jacobian(self.warp, self.similarity(x)) @ L
        return J[0] if np.ndim(points) == 1 else J
