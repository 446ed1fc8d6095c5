"""Selection of the embedding dimension by reconstruction error."""
from __future__ import annotations

import math
from dataclasses import replace

from joblib import Parallel, delayed

from .base import standardize
from .lle import LleConfig, lle_fit
from .pca import EmbeddingError
from .sda import SdaConfig, pretrain_stack, sda_fit


def candidate_dims(L, N, d_min=2, d_max=256, cap=None):
    """Powers of two in [d_min, d_max] below min(L, N) (and ``cap``)."""
    hi = min(d_max, min(L, N) - 1)
    if cap is not None:
        hi = min(hi, cap)
    out = []
    d = 1 << max(0, math.ceil(math.log2(max(d_min, 1))))
    while d <= hi:
        out.append(d)
        d *= 2
    return out


def _fit_one(method, X, d, config, standardize_rows, prefix):
    try:
        if method == "lle":
            return lle_fit(X, replace(config, n_components=d), standardize_rows)
        return sda_fit(X, config, d=d, standardize_rows=standardize_rows, _prefix=prefix)
    except Exception as exc:  # noqa: BLE001 - collected and reported together
        return exc


def grid_search_d(method, X, config=None, d_min=2, d_max=256, standardize_rows=True,
                  n_jobs=1, s_values=None):
    """Fit ``method`` over a power-of-two grid of d and keep the lowest error.

    Parameters
    ----------
    method : "lle" or "sda"
    X : L x N array or FeatureMatrix
    config : LleConfig or SdaConfig
    s_values : optional neighbour counts to sweep as well (LLE only)

    Returns
    -------
    best : Embedding
        Its ``curve`` maps each evaluated d to epsilon; ``notes`` flags a
        minimum at the largest candidate (no elbow).
    curve : dict
    """
    if method not in ("lle", "sda"):
        raise EmbeddingError(f"grid search supports lle and sda, not {method!r}")
    Z, _, _, _ = standardize(X, standardize_rows)
    L, N = Z.shape
    prefix = None
    if method == "lle":
        config = config or LleConfig()
        cap = None
    else:
        config = (config or SdaConfig()).with_code(L, 1)
        # the code layer must stay narrower than the last hidden layer
        cap = config.widths[-2] - 1 if len(config.widths) > 2 else None
    dims = candidate_dims(L, N, d_min, d_max, cap)
    if not dims:
        raise EmbeddingError(f"no feasible d for L={L}, N={N}")

    if method == "sda" and len(config.widths) > 2:
        # hidden layers do not depend on d: pretrain them once
        head = replace(config, widths=config.widths[:-1])
        enc, dec, _ = pretrain_stack(Z.T.copy(), head)
        prefix = (enc, dec)

    jobs = []
    for s in (s_values or [None]):
        cfg = config if s is None else replace(config, n_neighbors=s)
        jobs += [(d, s, cfg) for d in dims]
    fits = Parallel(n_jobs=n_jobs)(
        delayed(_fit_one)(method, X, d, cfg, standardize_rows, prefix) for d, _, cfg in jobs)

    errors = {}
    best = None
    curve = {}
    for (d, s, _), fit in zip(jobs, fits):
        if isinstance(fit, Exception):
            errors[(d, s)] = f"{type(fit).__name__}: {fit}"
            continue
        if d not in curve or fit.epsilon < curve[d]:
            curve[d] = fit.epsilon
        if best is None or fit.epsilon < best.epsilon:
            best = fit
    if best is None:
        detail = "; ".join(f"d={d}{'' if s is None else f', s={s}'}: {m}"
                           for (d, s), m in errors.items())
        raise EmbeddingError(f"every grid candidate failed ({detail})")
    best.curve = dict(sorted(curve.items()))
    if len(curve) > 1 and best.d == max(curve):
        best.notes.append("non-elbow: error still decreasing at the largest d")
    for (d, s), m in errors.items():
        best.notes.append(f"candidate d={d} failed: {m}")
    return best, best.curve

