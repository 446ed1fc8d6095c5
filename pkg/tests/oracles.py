"""Independent reference computations for the test suite.

Nothing here imports motion_atlas. Each routine reaches the same quantity
by a different route (library code, closed forms or brute force), and the
FROZEN table records values these routines produced once so regressions in
either side show up.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import stats
from scipy.interpolate import BSpline
from scipy.spatial import ConvexHull, cKDTree

# values produced by the oracles below and frozen
FROZEN = {
    # ConvexHull volume of the 2562-vertex geodesic unit sphere
    "icosphere4_hull_volume": 4.179738947994644,
    # cubic B-spline basis at fractional position 0.3 (four weights)
    "bspline_u03": (0.05716666666666667, 0.5901666666666667, 0.3481666666666667, 0.0045),
    # Welch df for welch_sample(seed=3)
    "welch_df_seed3": 40.591882593542195,
    # unpooled T^2, Yao df and p on hotelling_sample(seed=5)
    "hotelling_seed5": (22.79721895127987, 67.99976320990554, 0.00024595299177644875),
    # closed-form EF of the default phantom (contraction 0.32, shortening 0.12)
    "phantom_ef_default": 59.3088,
}


def sphere_volume(r=1.0):
    return 4.0 / 3.0 * math.pi * r**3


def ellipsoid_volume(a, b, c):
    return 4.0 / 3.0 * math.pi * a * b * c


def hull_volume(points):
    return float(ConvexHull(np.asarray(points, float)).volume)


def half_ellipsoid_ef(contraction, shortening):
    """EF (%) when x, y shrink by (1 - c) and z by (1 - s)."""
    return 100.0 * (1.0 - (1.0 - contraction) ** 2 * (1.0 - shortening))


def bspline_basis(u):
    """Uniform cubic weights at ``u`` in [0, 1) from scipy's B-spline.

    Weight ``a`` belongs to the basis function whose support starts
    ``3 - a`` knots to the left of the cell.
    """
    b = BSpline.basis_element(np.arange(5, dtype=float), extrapolate=False)
    return np.array([float(b(u + 3 - a)) for a in range(4)])


def affine_lstsq(src, dst):
    """Least-squares affine map as (A, t) with dst ~ src @ A.T + t."""
    P = np.column_stack([np.ones(len(src)), src])
    sol = np.linalg.lstsq(P, dst, rcond=None)[0]
    return sol[1:].T, sol[0]


def random_similarity(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return float(rng.uniform(0.5, 2.0)), R, rng.normal(0, 20, 3)


def central_jacobian(fn, x, h=1e-4):
    """(m, 3, 3) central-difference Jacobians of ``fn`` at rows of x."""
    x = np.asarray(x, float)
    J = np.empty((len(x), 3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        J[:, :, j] = (fn(x + e) - fn(x - e)) / (2 * h)
    return J


def welch(a, b):
    """Welch t and Welch-Satterthwaite df written out by hand."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    return t, df


def hotelling_unpooled(A, B):
    """T^2, Yao df and p for samples given as rows, by explicit inverses."""
    A, B = np.asarray(A, float), np.asarray(B, float)
    n1, n2, d = len(A), len(B), A.shape[1]
    S1 = np.cov(A.T).reshape(d, d) / n1
    S2 = np.cov(B.T).reshape(d, d) / n2
    Sinv = np.linalg.inv(S1 + S2)
    diff = A.mean(0) - B.mean(0)
    t2 = float(diff @ Sinv @ diff)
    inv_nu = 0.0
    for S, n in ((S1, n1), (S2, n2)):
        inv_nu += (float(diff @ Sinv @ S @ Sinv @ diff) / t2) ** 2 / (n - 1)
    nu = 1.0 / inv_nu
    F = (nu - d + 1) / (nu * d) * t2
    return t2, nu, float(stats.f.sf(F, d, nu - d + 1))


def welch_sample(seed=3):
    rng = np.random.default_rng(seed)
    return rng.normal(0, 1, 20), rng.normal(0.5, 2, 25)


def hotelling_sample(seed=5, d=3, n1=30, n2=40, shift=0.4):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n1, d))
    B = rng.normal(size=(n2, d)) * np.linspace(1.0, 2.0, d) + shift
    return A, B


def multiple_r(X, y):
    """R (%) from sklearn's ordinary least squares."""
    from sklearn.linear_model import LinearRegression

    return 100.0 * math.sqrt(max(LinearRegression().fit(X, y).score(X, y), 0.0))


def pca_rank(X, target=0.99):
    """Components needed for ``target`` variance via the covariance eigenvalues."""
    Z = X - X.mean(1, keepdims=True)
    ev = np.linalg.eigvalsh(Z @ Z.T)[::-1]
    ev = np.clip(ev, 0, None)
    return int(np.searchsorted(np.cumsum(ev) / ev.sum(), target - 1e-12) + 1)


def knn_sets(P, k):
    """Sets of k nearest other points, via a KD-tree."""
    _, idx = cKDTree(P).query(P, k + 1)
    return [set(row[1:]) for row in idx]


def mean_jaccard(a, b):
    return float(np.mean([len(x & y) / len(x | y) for x, y in zip(a, b)]))


def phantom_paths(v0, contraction, shortening, twist_deg, height, profile, k=1.0):
    """Closed-form vertex paths of the shell phantom, (T, n, 3)."""
    out = []
    depth = np.clip(-v0[:, 2] / height, 0, None)
    for f in profile:
        x = v0[:, 0] * (1 - k * contraction * f)
        y = v0[:, 1] * (1 - k * contraction * f)
        z = v0[:, 2] * (1 - shortening * f)
        a = math.radians(twist_deg) * f * depth
        out.append(np.column_stack([np.cos(a) * x - np.sin(a) * y,
                                    np.sin(a) * x + np.cos(a) * y, z]))
    return np.stack(out)
