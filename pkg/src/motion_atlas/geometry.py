"""Mesh and volume primitives for left-ventricle sequences.

Coordinates are in millimetres; volumes are reported in millilitres
(1 ml = 1000 mm^3).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

N_AHA = 17
MM3_PER_ML = 1000.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class TriSurface:
    """Triangle surface with fixed connectivity.

    Parameters
    ----------
    vertices : (n, 3) array of float
    faces : (m, 3) array of int, counter-clockwise seen from outside
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise GeometryError(f"vertices must be (n, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise GeometryError("non-finite vertex coordinate")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self):
        return len(self.vertices)

    def face_normals(self, normalize=False):
        p = self.vertices[self.faces]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        if normalize:
            n = n / np.linalg.norm(n, axis=1, keepdims=True)
        return n

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def vertex_normals(self):
        """Area-weighted unit vertex normals."""
        fn = self.face_normals()
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        return vn / norm

    def vertex_areas(self):
        """One third of the incident face areas per vertex."""
        a = self.face_areas() / 3.0
        va = np.zeros(self.n_vertices)
        for k in range(3):
            np.add.at(va, self.faces[:, k], a)
        return va

    def edges(self):
        """Unique undirected edges as a sorted (e, 2) array."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def boundary_loops(self):
        """Ordered boundary loops, each following the face orientation."""
        directed = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        key = np.sort(directed, axis=1)
        _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        border = directed[counts[inverse.ravel()] == 1]
        nxt = {}
        for a, b in border:
            if a in nxt:
                raise GeometryError(f"non-manifold boundary at vertex {a}")
            nxt[int(a)] = int(b)
        loops = []
        while nxt:
            start = next(iter(nxt))
            loop = [start]
            cur = nxt.pop(start)
            while cur != start:
                loop.append(cur)
                if cur not in nxt:
                    raise GeometryError("open boundary chain")
                cur = nxt.pop(cur)
            loops.append(np.array(loop))
        return loops

    def check(self):
        """Validate non-degenerate faces and consistent orientation."""
        scale = np.ptp(self.vertices, axis=0).max() if self.n_vertices else 1.0
        if np.any(self.face_areas() <= 1e-12 * scale**2):
            raise GeometryError("degenerate (zero-area) face")
        directed = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        if len(np.unique(directed, axis=0)) != len(directed):
            raise GeometryError("inconsistent face orientation")
        return self

    def transformed(self, fn):
        return TriSurface(fn(self.vertices), self.faces)


@dataclass(frozen=True)
class LvFrame:
    endo: TriSurface
    epi: TriSurface
    basal_point: np.ndarray | None = None
    basal_normal: np.ndarray | None = None


@dataclass
class LvSequence:
    """Corresponded LV surfaces over one cardiac cycle; frame 0 is end-diastole."""

    frames: list
    frame_interval: float = 40.0
    subject_id: str = "subject"
    rv_landmark: int = 0

    def __post_init__(self):
        if len(self.frames) < 1:
            raise GeometryError("sequence has no frames")
        ne, np_ = self.frames[0].endo.n_vertices, self.frames[0].epi.n_vertices
        for t, fr in enumerate(self.frames):
            if fr.endo.n_vertices != ne or fr.epi.n_vertices != np_:
                raise GeometryError(f"vertex count changes at frame {t}")

    @property
    def n_frames(self):
        return len(self.frames)

    def endo_positions(self):
        """(T, n_endo, 3) array of endocardial vertex positions."""
        return np.stack([f.endo.vertices for f in self.frames])

    def epi_positions(self):
        return np.stack([f.epi.vertices for f in self.frames])

    def wall_positions(self):
        """(T, n_endo + n_epi, 3): endo vertices followed by epi vertices."""
        return np.concatenate([self.endo_positions(), self.epi_positions()], axis=1)


@dataclass(frozen=True)
class VolumeCurve:
    volumes: np.ndarray
    frame_interval: float = 40.0
    subject_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.volumes, dtype=float)
        if v.ndim != 1:
            raise GeometryError("volume curve must be one-dimensional")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise GeometryError("volumes must be finite and positive")
        object.__setattr__(self, "volumes", v)

    def __len__(self):
        return len(self.volumes)


@dataclass
class AhaLabels:
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if self.labels.size and (self.labels.min() < 1 or self.labels.max() > N_AHA):
            raise GeometryError("AHA labels must lie in 1..17")

    def counts(self):
        return np.bincount(self.labels, minlength=N_AHA + 1)[1:]

    def check_complete(self):
        missing = np.flatnonzero(self.counts() == 0) + 1
        if missing.size:
            raise GeometryError(f"empty AHA regions: {missing.tolist()}")
        return self


def _signed_volume(vertices, faces):
    p = vertices[faces]
    return np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0


def cavity_volume(frame, plane_tol=1e-3):
    """Volume enclosed by the endocardium, closed at the base.

    Each boundary loop is closed by a fan of triangles to its centroid and the
    divergence-theorem sum is taken over the closed surface. When the frame
    has a basal plane, every boundary vertex must lie on it (within
    ``plane_tol`` times the surface extent).

    Returns
    -------
    float
        Volume in millilitres.
    """
    surf = frame.endo if isinstance(frame, LvFrame) else frame
    v = surf.vertices
    if not np.all(np.isfinite(v)):
        raise GeometryError("non-finite vertex")
    loops = surf.boundary_loops()
    centre = v.mean(axis=0)
    verts = v - centre
    faces = [surf.faces]
    extra = []
    point = getattr(frame, "basal_point", None)
    normal = getattr(frame, "basal_normal", None)
    extent = np.ptp(v, axis=0).max()
    for loop in loops:
        if point is not None:
            n = np.asarray(normal, float) / np.linalg.norm(normal)
            off = np.abs((v[loop] - point) @ n)
            if off.max() > plane_tol * extent:
                raise GeometryError(
                    f"boundary leaves the basal plane by {off.max():.3g} mm"
                )
        c = len(v) + len(extra)
        extra.append(verts[loop].mean(axis=0))
        # cap triangles run against the boundary direction
        nxt = np.roll(loop, -1)
        faces.append(np.column_stack([nxt, loop, np.full(len(loop), c)]))
    if extra:
        verts = np.vstack([verts, np.array(extra)])
    vol = abs(_signed_volume(verts, np.vstack(faces)))
    return vol / MM3_PER_ML


def volume_curve(seq):
    if seq.n_frames < 2:
        raise GeometryError("too few frames")
    vols = []
    for t, fr in enumerate(seq.frames):
        try:
            vols.append(cavity_volume(fr))
        except GeometryError as exc:
            raise GeometryError(f"frame {t}: {exc}") from exc
    return VolumeCurve(np.array(vols), seq.frame_interval, seq.subject_id)


def ejection_fraction(curve):
    """EF in percent from the maximum (ED) and minimum (ES) volumes."""
    v = curve.volumes if isinstance(curve, VolumeCurve) else np.asarray(curve, float)
    ved, ves = v.max(), v.min()
    if ved == ves:
        return 0.0
    return float((ved - ves) / ved * 100.0)


def _axis_frame(long_axis, rv_direction):
    a = np.asarray(long_axis, float)
    n = np.linalg.norm(a)
    if n == 0:
        raise GeometryError("long axis must be non-zero")
    a = a / n
    e1 = np.asarray(rv_direction, float)
    e1 = e1 - (e1 @ a) * a
    if np.linalg.norm(e1) < 1e-12:
        raise GeometryError("rv_direction is parallel to the long axis")
    e1 /= np.linalg.norm(e1)
    return a, e1, np.cross(a, e1)


def aha_parcellate(medial, long_axis, apex, rv_direction, base_height=None, cap_fraction=0.1):
    """Label medial vertices with the 17-segment model.

    The axial coordinate runs from the apex towards the base. Points below
    ``cap_fraction * base_height`` form the apical cap (17); the remainder is
    split into apical (13-16), mid (7-12) and basal (1-6) thirds with
    sectors counted from ``rv_direction``.

    Parameters
    ----------
    medial : TriSurface or (n, 3) array
    long_axis : direction of the long axis; either orientation is accepted
    apex : apex position
    rv_direction : reference direction for sector zero
    base_height : axial extent of the ventricle; defaults to the farthest vertex
    """
    pts = medial.vertices if isinstance(medial, TriSurface) else np.asarray(medial, float)
    if len(pts) == 0:
        raise GeometryError("empty medial surface")
    a, e1, e2 = _axis_frame(long_axis, rv_direction)
    rel = pts - np.asarray(apex, float)
    s = rel @ a
    if s.mean() < 0:
        a, e2, s = -a, -e2, -s
    height = float(s.max()) if base_height is None else float(base_height)
    if height <= 0:
        raise GeometryError("non-positive base height")
    cap = cap_fraction * height
    frac = (s - cap) / (height - cap)
    ring = np.clip(np.floor(frac * 3).astype(int), 0, 2)  # 0 apical, 1 mid, 2 basal
    theta = np.mod(np.arctan2(rel @ e2, rel @ e1), 2 * np.pi)
    radial = np.linalg.norm(rel - np.outer(s, a), axis=1)

    labels = np.empty(len(pts), dtype=int)
    sec6 = np.minimum((theta / (np.pi / 3)).astype(int), 5)
    sec4 = np.minimum((theta / (np.pi / 2)).astype(int), 3)
    labels[ring == 2] = 1 + sec6[ring == 2]
    labels[ring == 1] = 7 + sec6[ring == 1]
    labels[ring == 0] = 13 + sec4[ring == 0]
    labels[s < cap] = 17

    on_axis = (radial <= 1e-9 * max(height, 1.0)) & (s >= cap)
    if on_axis.any():
        good = ~on_axis
        if not good.any():
            raise GeometryError("every vertex lies on the long axis")
        _, idx = cKDTree(pts[good]).query(pts[on_axis])
        labels[on_axis] = labels[good][idx]
    return AhaLabels(labels)


def icosphere(subdivisions=4, radius=1.0):
    """Geodesic sphere; 10 * 4**k + 2 vertices."""
    t = (1 + 5**0.5) / 2
    v = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
         [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        v, f = _midpoint_subdivide(v, f)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
    return TriSurface(v * radius, f)


def _midpoint_subdivide(v, f):
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    uniq, inv = np.unique(e, axis=0, return_inverse=True)
    inv = inv.ravel()
    mids = 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])
    m = len(f)
    a, b, c = (len(v) + inv[:m], len(v) + inv[m:2 * m], len(v) + inv[2 * m:])
    nf = np.concatenate([
        np.column_stack([f[:, 0], a, c]),
        np.column_stack([f[:, 1], b, a]),
        np.column_stack([f[:, 2], c, b]),
        np.column_stack([a, b, c]),
    ])
    return np.vstack([v, mids]), nf


def half_ellipsoid(radius, height, n_rings=24, n_sectors=48):
    """Ring-structured prolate half-ellipsoid, apex at (0, 0, -height), base at z=0.

    Vertex 0 is the apex; ring ``k`` (1-based) holds ``n_sectors`` vertices
    starting at azimuth zero, so the last ring is the basal opening.
    """
    polar = np.linspace(0, np.pi / 2, n_rings + 1)[1:]
    az = np.linspace(0, 2 * np.pi, n_sectors, endpoint=False)
    su, cu = np.sin(polar), np.cos(polar)
    cu[-1] = 0.0
    ring_pts = np.stack(
        [radius * np.outer(su, np.cos(az)), radius * np.outer(su, np.sin(az)),
         -height * np.outer(cu, np.ones_like(az))], axis=-1)
    verts = np.vstack([[0.0, 0.0, -height], ring_pts.reshape(-1, 3)])

    def idx(r, j):
        return 1 + r * n_sectors + (j % n_sectors)

    faces = []
    for j in range(n_sectors):
        faces.append([0, idx(0, j + 1), idx(0, j)])
    for r in range(n_rings - 1):
        for j in range(n_sectors):
            a, b = idx(r, j), idx(r, j + 1)
            c, d = idx(r + 1, j), idx(r + 1, j + 1)
            faces.append([a, b, d])
            faces.append([a, d, c])
    # outward normals: check orientation of the first apex face
    surf = TriSurface(verts, np.array(faces))
    if surf.face_normals()[0, 2] > 0:
        surf = TriSurface(verts, surf.faces[:, ::-1])
    return surf
