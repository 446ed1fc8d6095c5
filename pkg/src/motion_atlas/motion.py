"""Cubic B-spline transforms: free-form deformations fitted to vertex
displacements, composition of inter-frame transforms and the space-time
(3D+t) B-spline used to summarise a full cycle.

Control point ``i`` of an axis sits at ``origin + i * spacing``. A point with
local coordinate ``s = (x - origin) / spacing`` is influenced by control
points ``floor(s) - 1 .. floor(s) + 2``, so the supported region is
``1 <= floor(s) <= n - 3`` along every axis. Nothing is extrapolated.
"""
from __future__ import annotations

import struct
from functools import lru_cache
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp


class SupportError(ValueError):
    """Evaluation point outside the control grid's support."""


def bspline_weights(u):
    """Uniform cubic B-spline weights for fractional positions ``u`` in [0, 1).

    Returns an array of shape ``u.shape + (4,)``; rows sum to one.
    """
    u = np.asarray(u, float)
    u2, u3 = u * u, u * u * u
    return np.stack([
        (1 - u) ** 3 / 6.0,
        (3 * u3 - 6 * u2 + 4) / 6.0,
        (-3 * u3 + 3 * u2 + 3 * u + 1) / 6.0,
        u3 / 6.0,
    ], axis=-1)


def bspline_weight_derivatives(u):
    u = np.asarray(u, float)
    u2 = u * u
    return np.stack([
        -0.5 * (1 - u) ** 2,
        1.5 * u2 - 2 * u,
        -1.5 * u2 + u + 0.5,
        0.5 * u2,
    ], axis=-1)


def _locate(coords, origin, spacing, shape, what="point"):
    """Cell index and fraction per axis, raising outside the support."""
    s = (np.atleast_2d(coords) - origin) / spacing
    idx = np.floor(s).astype(np.int64)
    frac = s - idx
    # a point exactly on the last supported knot belongs to the cell below
    top = np.asarray(shape) - 3
    edge = (idx == top + 1) & (frac == 0)
    idx = np.where(edge, top, idx)
    frac = np.where(edge, 1.0, frac)
    bad = np.any((idx < 1) | (idx > top), axis=1) | ~np.all(np.isfinite(s), axis=1)
    if bad.any():
        first = int(np.flatnonzero(bad)[0])
        raise SupportError(f"{what} {first} outside the control grid support")
    return idx, frac


def grid_for_extent(lo, hi, spacing):
    """Origin and shape of a grid covering [lo, hi] with one control point
    of margin on each side."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    spacing = np.broadcast_to(np.asarray(spacing, float), lo.shape).copy()
    if not np.all(np.isfinite(spacing)) or np.any(spacing <= 0):
        raise ValueError("grid spacing must be finite and positive")
    extent = hi - lo
    if extent.max() > 0 and np.any(spacing > 1e6 * extent.max()):
        raise ValueError("grid spacing is degenerate for the sampled extent")
    # a hair of extra margin keeps rounding from pushing end points out
    origin = lo - spacing * (1 + 1e-9)
    shape = np.floor((hi - origin) / spacing).astype(int) + 3
    return origin, spacing, tuple(int(n) for n in shape)


def _second_difference(n):
    if n < 3:
        return sp.csr_matrix((0, n))
    return sp.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(n - 2, n), format="csr")


def bending_operator(shape):
    """Stacked second differences along each grid axis.

    Multilinear coefficient fields (and therefore constant and linear
    displacement fields) are in its null space.
    """
    return _bending_cached(tuple(int(n) for n in shape))


@lru_cache(maxsize=32)
def _bending_cached(shape):
    blocks = []
    for ax in range(len(shape)):
        mats = [sp.identity(n, format="csr") for n in shape]
        mats[ax] = _second_difference(shape[ax])
        op = mats[0]
        for m in mats[1:]:
            op = sp.kron(op, m, format="csr")
        blocks.append(op)
    return sp.vstack(blocks, format="csr")


@lru_cache(maxsize=32)
def _bending_gram(shape):
    L = _bending_cached(shape)
    return (L.T @ L).toarray()


def _solve_regularized(A, B, L, ridge, gram=None):
    """Least squares ``min |A X - B|^2 + ridge |L X|^2``.

    ``ridge == 0`` gives the minimum-norm solution. Otherwise the normal
    equations are solved by Cholesky with one refinement step; singular
    systems fall back to the minimum-norm solver.
    """
    if ridge > 0:
        G = (L.T @ L) if gram is None else gram
        G = G.toarray() if sp.issparse(G) else np.asarray(G)
        AtA = A.T @ A
        M = (AtA.toarray() if sp.issparse(AtA) else np.asarray(AtA)) + ridge * G
        rhs = A.T @ B
        try:
            cf = sla.cho_factor(M, check_finite=False)
            X = sla.cho_solve(cf, rhs, check_finite=False)
            X += sla.cho_solve(cf, rhs - M @ X, check_finite=False)
            if np.all(np.isfinite(X)):
                return X
        except np.linalg.LinAlgError:
            pass
        Ad = A.toarray() if sp.issparse(A) else A
        Ld = L.toarray() if sp.issparse(L) else L
        stacked = np.vstack([Ad, np.sqrt(ridge) * Ld])
        rhs = np.vstack([B, np.zeros((Ld.shape[0], B.shape[1]))])
        return sla.lstsq(stacked, rhs, lapack_driver="gelsd")[0]
    Ad = A.toarray() if sp.issparse(A) else A
    return sla.lstsq(Ad, B, lapack_driver="gelsd")[0]


@dataclass
class BsplineFfd3d:
    """Cubic B-spline displacement field on a regular 3D control grid."""

    coefficients: np.ndarray  # (nx, ny, nz, 3)
    origin: np.ndarray
    spacing: np.ndarray
    residual_rms: float = 0.0

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, float)
        self.origin = np.asarray(self.origin, float)
        self.spacing = np.broadcast_to(np.asarray(self.spacing, float), (3,)).copy()
        if np.any(self.spacing <= 0):
            raise ValueError("spacing must be positive")

    @property
    def shape(self):
        return self.coefficients.shape[:3]

    @classmethod
    def zeros(cls, origin, spacing, shape):
        return cls(np.zeros(tuple(shape) + (3,)), origin, spacing)

    def design_matrix(self, points):
        return design_matrix_3d(points, self.origin, self.spacing, self.shape)

    def __call__(self, points):
        return evaluate_ffd(self, points)

    def save(self, path):
        save_grid(path, self.coefficients, self.origin, self.spacing)

    @classmethod
    def load(cls, path):
        coef, origin, spacing = load_grid(path)
        return cls(coef, origin, spacing)


def _weights_and_indices(points, origin, spacing, shape):
    idx, frac = _locate(points, origin, spacing, shape)
    w = bspline_weights(frac)  # (n, 3, 4)
    n = len(idx)
    ww = (w[:, 0, :, None, None] * w[:, 1, None, :, None] * w[:, 2, None, None, :]).reshape(n, 64)
    off = np.arange(-1, 3)
    ix = idx[:, 0, None] + off
    iy = idx[:, 1, None] + off
    iz = idx[:, 2, None] + off
    ny, nz = shape[1], shape[2]
    flat = ((ix[:, :, None, None] * ny + iy[:, None, :, None]) * nz + iz[:, None, None, :]).reshape(n, 64)
    return ww, flat


def design_matrix_3d(points, origin, spacing, shape):
    """Sparse (n_points, n_controls) matrix of tensor B-spline weights."""
    ww, flat = _weights_and_indices(points, origin, spacing, shape)
    n = len(ww)
    rows = np.repeat(np.arange(n), 64)
    return sp.csr_matrix((ww.ravel(), (rows, flat.ravel())), shape=(n, int(np.prod(shape))))


def fit_ffd(points, displacements, spacing, ridge=None, grid=None):
    """Fit a cubic B-spline FFD to sampled displacements.

    Parameters
    ----------
    points, displacements : (n, 3) arrays
    spacing : control-point spacing in mm (scalar or per axis)
    ridge : weight of the bending (second-difference) penalty on the
        control grid; defaults to ``1e-8 * n``. Zero gives the minimum-norm
        least-squares solution.
    grid : optional ``(origin, spacing, shape)`` to reuse a grid

    Returns
    -------
    BsplineFfd3d
        With ``residual_rms`` set to the RMS fit residual in mm.
    """
    points = np.atleast_2d(np.asarray(points, float))
    disp = np.atleast_2d(np.asarray(displacements, float))
    if len(points) < 1 or points.shape != disp.shape:
        raise ValueError("need matching (n, 3) points and displacements, n >= 1")
    if ridge is None:
        ridge = 1e-8 * len(points)
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    origin, spacing, shape = grid or grid_for_extent(points.min(0), points.max(0), spacing)
    A = design_matrix_3d(points, origin, spacing, shape)
    key = tuple(int(n) for n in shape)
    coef = _solve_regularized(A, disp, _bending_cached(key), ridge, _bending_gram(key))
    resid = A @ coef - disp
    rms = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    return BsplineFfd3d(coef.reshape(tuple(shape) + (3,)), origin, spacing, rms)


def evaluate_ffd(ffd, points):
    """Displacement at each point; raises SupportError outside the grid."""
    pts = np.atleast_2d(np.asarray(points, float))
    ww, flat = _weights_and_indices(pts, ffd.origin, ffd.spacing, ffd.shape)
    c = ffd.coefficients.reshape(-1, 3)
    out = np.einsum("nk,nkd->nd", ww, c[flat])
    return out[0] if np.ndim(points) == 1 else out


@dataclass
class VertexTrajectorySet:
    """Vertex positions over a cycle, shape (T, n, 3); frame 0 is the reference."""

    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, float)
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise ValueError("positions must have shape (T, n, 3)")

    @property
    def reference(self):
        return self.positions[0]

    @property
    def displacements(self):
        """u_{0->t}(r) with shape (T, n, 3); zero at frame 0."""
        return self.positions - self.positions[0]

    @property
    def n_frames(self):
        return self.positions.shape[0]


def compose_interframe(ffds, reference):
    """Follow reference points through consecutive inter-frame FFDs.

    ``p_0 = r`` and ``p_t = p_{t-1} + ffd_{t-1}(p_{t-1})``.
    """
    p = np.atleast_2d(np.asarray(reference, float)).copy()
    out = [p.copy()]
    for t, ffd in enumerate(ffds):
        try:
            p = p + evaluate_ffd(ffd, p)
        except SupportError as exc:
            raise SupportError(f"frame {t + 1}: {exc}".replace("point", "vertex")) from exc
        out.append(p.copy())
    return VertexTrajectorySet(np.stack(out))


def track_sequence(wall_positions, spacing, ridge=None):
    """Inter-frame FFDs fitted to corresponded wall vertices (T, n, 3).

    All frames share one grid covering every frame, so compositions never
    leave the support for points inside the wall.
    """
    pos = np.asarray(wall_positions, float)
    lo, hi = pos.min(axis=(0, 1)), pos.max(axis=(0, 1))
    grid = grid_for_extent(lo, hi, spacing)
    return [fit_ffd(pos[t - 1], pos[t] - pos[t - 1], spacing, ridge, grid=grid)
            for t in range(1, len(pos))]


@dataclass
class Bspline4d:
    """Space-time cubic B-spline displacement u(r, t); u(., 0) = 0."""

    coefficients: np.ndarray  # (nx, ny, nz, nt, 3)
    origin: np.ndarray
    spacing: np.ndarray
    t_origin: float
    t_spacing: float
    residual_rms: float = 0.0
    n_frames: int = field(default=0)

    @property
    def spatial_shape(self):
        return self.coefficients.shape[:3]

    @property
    def n_temporal(self):
        return self.coefficients.shape[3]

    def temporal_weights(self, t):
        t = np.atleast_1d(np.asarray(t, float))
        idx, frac = _locate(t[:, None], np.array([self.t_origin]), np.array([self.t_spacing]),
                            (self.n_temporal,), what="time")
        W = np.zeros((len(t), self.n_temporal))
        w = bspline_weights(frac[:, 0])
        for a in range(4):
            W[np.arange(len(t)), idx[:, 0] - 1 + a] = w[:, a]
        return W

    def evaluate(self, points, t):
        """Displacement at ``points`` (n, 3) for scalar frame ``t``."""
        A = design_matrix_3d(points, self.origin, self.spacing, self.spatial_shape)
        wt = self.temporal_weights([t])[0]
        c = np.tensordot(self.coefficients, wt, axes=([3], [0])).reshape(-1, 3)
        return A @ c

    def evaluate_all(self, points, n_frames=None):
        """(T, n, 3) displacements at integer frames 0..T-1."""
        T = n_frames or self.n_frames
        A = design_matrix_3d(points, self.origin, self.spacing, self.spatial_shape)
        Wt = self.temporal_weights(np.arange(T))
        ns = int(np.prod(self.spatial_shape))
        C = self.coefficients.reshape(ns, self.n_temporal, 3)
        return np.stack([A @ np.tensordot(C, Wt[t], axes=([1], [0])) for t in range(T)])

    def save(self, path):
        save_grid(path, self.coefficients, np.append(self.origin, self.t_origin),
                  np.append(self.spacing, self.t_spacing))

    @classmethod
    def load(cls, path):
        coef, origin, spacing = load_grid(path)
        return cls(coef, origin[:3], spacing[:3], float(origin[3]), float(spacing[3]),
                   n_frames=0)


def _temporal_basis(n_frames, t_spacing):
    t_origin, _, (nt,) = grid_for_extent([0.0], [float(n_frames - 1)], t_spacing)
    W = np.zeros((n_frames, nt))
    idx, frac = _locate(np.arange(n_frames, dtype=float)[:, None], t_origin, np.array([t_spacing]), (nt,))
    w = bspline_weights(frac[:, 0])
    for a in range(4):
        W[np.arange(n_frames), idx[:, 0] - 1 + a] = w[:, a]
    return float(t_origin[0]), W


def fit_4dt(traj, spatial_spacing, temporal_spacing, ridge=None):
    """Fit u(r, t) to trajectory displacements u_{0->t}(r).

    Samples lie on the product of the reference positions and the frame
    indices, so the least-squares problem separates into a spatial and a
    temporal factor. The temporal coefficients are restricted to the null
    space of the t=0 weights, which makes u(., 0) vanish identically.
    ``ridge`` weights second-difference penalties on both factors
    (default ``1e-8 * n_samples``; zero gives the minimum-norm solution).
    """
    if not isinstance(traj, VertexTrajectorySet):
        traj = VertexTrajectorySet(traj)
    r = traj.reference
    U = traj.displacements  # (T, n, 3)
    T, n = U.shape[:2]
    if n == 0:
        raise ValueError("empty trajectory set")
    if T < 2:
        raise ValueError("need at least two frames")
    if ridge is None:
        ridge = 1e-8 * n * T
    origin, spacing, shape = grid_for_extent(r.min(0), r.max(0), spatial_spacing)
    As = design_matrix_3d(r, origin, spacing, shape).toarray()
    t_origin, At = _temporal_basis(T, temporal_spacing)
    # temporal coefficients c = N z with b0 . N = 0
    b0 = At[0]
    N = sla.null_space(b0[None, :])
    Atn = At @ N
    Ls = bending_operator(shape)
    Lt = bending_operator((At.shape[1],)) @ N
    # Xs solves the spatial factor for all (frame, component) columns at once
    Ymat = U.transpose(1, 0, 2).reshape(n, T * 3)
    Xs = _solve_regularized(As, Ymat, Ls, ridge)  # (ns, T*3)
    Xs = Xs.reshape(-1, T, 3)
    ns = Xs.shape[0]
    rhs = Xs.transpose(1, 0, 2).reshape(T, ns * 3)
    Z = _solve_regularized(Atn, rhs, Lt, ridge / n)
    coef_t = N @ Z  # (nt, ns*3)
    coef = coef_t.reshape(-1, ns, 3).transpose(1, 0, 2).reshape(tuple(shape) + (-1, 3))
    model = Bspline4d(coef, origin, spacing, t_origin, float(temporal_spacing), n_frames=T)
    fitted = model.evaluate_all(r, T)
    resid = fitted - U
    model.residual_rms = float(np.sqrt(np.mean(np.sum(resid**2, axis=2))))
    return model


_MAGIC = b"BSPL"


def save_grid(path, coefficients, origin, spacing):
    """Binary control-grid dump.

    Layout (little-endian): magic ``BSPL``; uint32 version (1); uint32 number
    of grid axes ``k``; ``k`` uint32 axis sizes; ``k`` float64 origins;
    ``k`` float64 spacings; uint32 components per control point; then the
    coefficients as float64 in row-major order with the component axis last.
    """
    coef = np.ascontiguousarray(coefficients, dtype="<f8")
    k = coef.ndim - 1
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", 1, k))
        fh.write(struct.pack(f"<{k}I", *coef.shape[:k]))
        fh.write(np.asarray(origin, "<f8").tobytes())
        fh.write(np.asarray(spacing, "<f8").tobytes())
        fh.write(struct.pack("<I", coef.shape[-1]))
        fh.write(coef.tobytes())


def load_grid(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a control-grid file")
    version, k = struct.unpack_from("<II", data, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 12
    shape = struct.unpack_from(f"<{k}I", data, off)
    off += 4 * k
    origin = np.frombuffer(data, "<f8", k, off)
    off += 8 * k
    spacing = np.frombuffer(data, "<f8", k, off)
    off += 8 * k
    (ncomp,) = struct.unpack_from("<I", data, off)
    off += 4
    coef = np.frombuffer(data, "<f8", int(np.prod(shape)) * ncomp, off)
    return coef.reshape(tuple(shape) + (ncomp,)).copy(), origin.copy(), spacing.copy()
