"""Mid-wall (medial) surface between the endocardium and the epicardium.

Every medial vertex is kept as a fixed linear combination of wall vertices
(endo stacked above epi). Because the wall meshes are corresponded across
frames and subjects, applying the same weights to any frame gives a
corresponded medial mesh.
"""
from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..geometry import GeometryError, TriSurface

FALLBACK_WARN = 0.05
FALLBACK_FAIL = 0.50


@dataclass
class MedialMapping:
    """Medial mesh plus the sparse weights that reproduce it from a wall.

    ``weights`` has shape ``(n_medial, n_endo + n_epi)``.
    """

    surface: TriSurface
    weights: sp.csr_matrix
    fallback_fraction: float = 0.0
    warnings: list = field(default_factory=list)

    def apply(self, wall):
        """Medial vertices for stacked wall positions ``(n_wall, 3)`` or ``(T, n_wall, 3)``."""
        wall = np.asarray(wall, float)
        if wall.ndim == 2:
            return self.weights @ wall
        return np.stack([self.weights @ w for w in wall])


def ray_triangle(origins, directions, tri):
    """Möller-Trumbore intersection of rays against every triangle.

    Returns ``(t, u, v)`` arrays of shape (n_rays, n_tri); ``t`` is
    ``inf`` where a ray misses.
    """
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1, e2 = v1 - v0, v2 - v0
    pvec = np.cross(directions[:, None, :], e2[None])
    det = np.einsum("tk,rtk->rt", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv = np.divide(1.0, det, out=np.zeros_like(det), where=ok)
    tvec = origins[:, None, :] - v0[None]
    u = np.einsum("rtk,rtk->rt", tvec, pvec) * inv
    qvec = np.cross(tvec, e1[None])
    v = np.einsum("rk,rtk->rt", directions, qvec) * inv
    t = np.einsum("tk,rtk->rt", e2, qvec) * inv
    eps = 1e-9
    hit = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps) & (t >= -eps)
    return np.where(hit, t, np.inf), u, v


def _ray_weights(endo, epi, chunk=256):
    """Per endo vertex: midpoint weights and a fallback flag."""
    n, m = endo.n_vertices, epi.n_vertices
    normals = endo.vertex_normals()
    thickness = np.linalg.norm(epi.vertices - endo.vertices, axis=1) if n == m else None
    tri = epi.vertices[epi.faces]
    rows, cols, vals = [], [], []
    fallback = np.zeros(n, bool)
    for s in range(0, n, chunk):
        o = endo.vertices[s:s + chunk]
        t, u, v = ray_triangle(o, normals[s:s + chunk], tri)
        best = np.argmin(t, axis=1)
        tb = t[np.arange(len(o)), best]
        for k in range(len(o)):
            i = s + k
            limit = 3.0 * thickness[i] if thickness is not None else np.inf
            if np.isfinite(tb[k]) and tb[k] <= limit + 1e-9:
                f = epi.faces[best[k]]
                uu, vv = u[k, best[k]], v[k, best[k]]
                rows += [i] * 4
                cols += [i, n + f[0], n + f[1], n + f[2]]
                vals += [0.5, 0.5 * (1 - uu - vv), 0.5 * uu, 0.5 * vv]
            else:
                if thickness is None:
                    raise GeometryError(f"ray from endo vertex {i} missed the epicardium")
                fallback[i] = True
                rows += [i, i]
                cols += [i, n + i]
                vals += [0.5, 0.5]
    W = sp.csr_matrix((vals, (rows, cols)), shape=(n, n + m))
    return W, fallback


def _boundary_vertices(faces, n):
    e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    mask = np.zeros(n, bool)
    mask[uniq[counts == 1].ravel()] = True
    return mask


def decimate(vertices, faces, weights, stop):
    """Shortest-edge collapse until ``stop(n_vertices, n_edges)`` is true.

    Edges collapse to their midpoint, or onto the boundary vertex when one
    end lies on the boundary, so the boundary is preserved. A collapse is
    skipped when it would break the link condition or flip a face.
    ``weights`` (dense or sparse rows) are merged the same way as positions.
    """
    V = [np.asarray(p, float) for p in vertices]
    W = [weights.getrow(i) for i in range(weights.shape[0])]
    F = {k: tuple(f) for k, f in enumerate(np.asarray(faces))}
    vf = [set() for _ in V]
    for k, f in F.items():
        for a in f:
            vf[a].add(k)
    boundary = set(np.flatnonzero(_boundary_vertices(np.asarray(faces), len(V))).tolist())
    alive = [True] * len(V)

    def neighbours(a):
        out = set()
        for k in vf[a]:
            out.update(F[k])
        out.discard(a)
        return out

    def edge_count():
        es = set()
        for f in F.values():
            for i in range(3):
                a, b = f[i], f[(i + 1) % 3]
                es.add((min(a, b), max(a, b)))
        return len(es)

    heap = []
    for f in F.values():
        for i in range(3):
            a, b = f[i], f[(i + 1) % 3]
            if a < b:
                heapq.heappush(heap, (float(np.linalg.norm(V[a] - V[b])), a, b))
            else:
                heapq.heappush(heap, (float(np.linalg.norm(V[a] - V[b])), b, a))
    nv, ne = len(V), edge_count()
    while heap and not stop(nv, ne):
        length, a, b = heapq.heappop(heap)
        if not (alive[a] and alive[b]) or b not in neighbours(a):
            continue
        cur = float(np.linalg.norm(V[a] - V[b]))
        if abs(cur - length) > 1e-12 * max(cur, 1.0):
            continue
        shared = vf[a] & vf[b]
        on_edge = len(shared) == 1
        ba, bb = a in boundary, b in boundary
        if ba and bb and not on_edge:
            continue
        common = neighbours(a) & neighbours(b)
        if len(common) != len(shared):
            continue
        if ba and not bb:
            pos, w = V[a], W[a]
        elif bb and not ba:
            pos, w = V[b], W[b]
        else:
            pos, w = 0.5 * (V[a] + V[b]), 0.5 * (W[a] + W[b])
        flipped = False
        for k in (vf[a] | vf[b]) - shared:
            f = F[k]
            old = [V[i] for i in f]
            new = [pos if i in (a, b) else V[i] for i in f]
            n0 = np.cross(old[1] - old[0], old[2] - old[0])
            n1 = np.cross(new[1] - new[0], new[2] - new[0])
            if n0 @ n1 <= 0.1 * np.linalg.norm(n0) * np.linalg.norm(n1):
                flipped = True
                break
        if flipped:
            continue
        # merge b into a
        for k in shared:
            for i in F[k]:
                vf[i].discard(k)
            del F[k]
        for k in list(vf[b]):
            F[k] = tuple(a if i == b else i for i in F[k])
            vf[a].add(k)
        vf[b] = set()
        alive[b] = False
        V[a], W[a] = pos, w
        if bb:
            boundary.add(a)
        nv -= 1
        ne -= 1 + len(shared)
        for c in neighbours(a):
            lo, hi = min(a, c), max(a, c)
            heapq.heappush(heap, (float(np.linalg.norm(V[lo] - V[hi])), lo, hi))
    keep = np.flatnonzero(alive)
    remap = -np.ones(len(V), int)
    remap[keep] = np.arange(len(keep))
    faces_out = remap[np.array(list(F.values()), int)]
    return np.array([V[i] for i in keep]), faces_out, sp.vstack([W[i] for i in keep], format="csr")


def subdivide(vertices, faces, weights):
    """One midpoint (1-to-4) subdivision, carrying the weight rows along."""
    v, f = np.asarray(vertices, float), np.asarray(faces)
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    uniq, inv = np.unique(e, axis=0, return_inverse=True)
    inv = inv.ravel()
    n, m, ne = len(v), len(f), len(uniq)
    avg = sp.csr_matrix((np.full(2 * ne, 0.5), (np.repeat(np.arange(ne), 2), uniq.ravel())),
                        shape=(ne, n))
    a, b, c = n + inv[:m], n + inv[m:2 * m], n + inv[2 * m:]
    nf = np.concatenate([
        np.column_stack([f[:, 0], a, c]),
        np.column_stack([f[:, 1], b, a]),
        np.column_stack([f[:, 2], c, b]),
        np.column_stack([a, b, c]),
    ])
    return np.vstack([v, avg @ v]), nf, sp.vstack([weights, avg @ weights], format="csr")


def closest_on_triangles(points, tri):
    """Closest point of each triangle to each point.

    ``points`` (p, 3), ``tri`` (p, k, 3, 3): k candidate triangles per point.
    Returns barycentric coordinates (p, k, 3) and squared distances (p, k).
    """
    a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    x = points[:, None, :]
    e0, e1, d = b - a, c - a, x - a
    d00 = (e0 * e0).sum(-1)
    d01 = (e0 * e1).sum(-1)
    d11 = (e1 * e1).sum(-1)
    d20 = (d * e0).sum(-1)
    d21 = (d * e1).sum(-1)
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    bary = np.stack([1 - v - w, v, w], axis=-1)
    inside = (v >= 0) & (w >= 0) & (v + w <= 1)
    best = np.where(inside, 0.0, np.inf)
    out = np.where(inside[..., None], bary, 0.0)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        p, q = tri[..., i, :], tri[..., j, :]
        seg = q - p
        s = np.clip(((x - p) * seg).sum(-1) / (seg * seg).sum(-1), 0, 1)
        cand = np.zeros_like(bary)
        cand[..., i] = 1 - s
        cand[..., j] = s
        better = ~inside & (((p + s[..., None] * seg - x) ** 2).sum(-1) < best)
        best = np.where(better, ((p + s[..., None] * seg - x) ** 2).sum(-1), best)
        out = np.where(better[..., None], cand, out)
    proj = np.einsum("pkt,pktd->pkd", out, tri)
    return out, ((proj - x) ** 2).sum(-1)


def snap_to_surface(points, vertices, faces, k=8):
    """Sparse (p, n_vertices) weights placing each point on the closest
    surface point among the triangles around its ``k`` nearest vertices."""
    from scipy.spatial import cKDTree

    vf = [[] for _ in range(len(vertices))]
    for fi, f in enumerate(faces):
        for a in f:
            vf[a].append(fi)
    _, near = cKDTree(vertices).query(points, k=min(k, len(vertices)))
    near = np.atleast_2d(near)
    cands = [sorted({fi for vtx in row for fi in vf[vtx]}) for row in near]
    width = max(len(c) for c in cands)
    cf = np.array([c + [c[-1]] * (width - len(c)) for c in cands])
    bary, d2 = closest_on_triangles(points, vertices[faces[cf]])
    pick = np.argmin(d2, axis=1)
    rows = np.repeat(np.arange(len(points)), 3)
    chosen = faces[cf[np.arange(len(points)), pick]]
    vals = bary[np.arange(len(points)), pick]
    return sp.csr_matrix((vals.ravel(), (rows, chosen.ravel())), shape=(len(points), len(vertices)))


def _n_edges(faces):
    e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    return len(np.unique(e, axis=0))


def medial_mapping(endo, epi, target_vertices=1000):
    """Medial surface by ray casting plus homogeneous resampling.

    Each endo vertex casts a ray along its outward normal; the midpoint to
    the first epicardial hit becomes a medial vertex. Without a hit within
    three local wall thicknesses the corresponding-vertex midpoint is used.
    The mesh is then decimated by shortest-edge collapse so that one
    midpoint subdivision lands near ``target_vertices``, subdivided, and
    every vertex is snapped back to the closest point of the ray-cast mesh.
    ``target_vertices=None`` keeps the ray-cast mesh as it is.
    """
    W0, fallback = _ray_weights(endo, epi)
    W = W0
    frac = float(fallback.mean()) if len(fallback) else 0.0
    notes = []
    if frac > FALLBACK_FAIL:
        raise GeometryError(f"{frac:.0%} of medial rays fell back to vertex midpoints")
    if frac > FALLBACK_WARN:
        msg = f"{frac:.1%} of medial rays fell back to vertex midpoints"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    wall = np.vstack([endo.vertices, epi.vertices])
    v, f = W @ wall, endo.faces
    if target_vertices is not None:
        # one subdivision adds one vertex per edge
        if len(v) + _n_edges(f) > target_vertices:
            v, f, W = decimate(v, f, W, lambda nv, ne: nv + ne <= target_vertices)
        v, f, W = subdivide(v, f, W)
        while len(v) + _n_edges(f) <= 1.2 * target_vertices:
            v, f, W = subdivide(v, f, W)
        # resampled vertices sit on chords; put them back on the medial mesh
        dense = W0 @ wall
        W = (snap_to_surface(v, dense, endo.faces) @ W0).tocsr()
    W.eliminate_zeros()
    return MedialMapping(TriSurface(W @ wall, f), W.tocsr(), frac, notes)


def medial_surface(endo, epi, target_vertices=1000):
    """Mid-wall surface; see :func:`medial_mapping`."""
    return medial_mapping(endo, epi, target_vertices).surface
