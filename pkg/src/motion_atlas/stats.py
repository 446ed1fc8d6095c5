"""Association tests between motion descriptors and clinical covariates.

Binary covariates are tested with a two-sample Hotelling T^2 that does not
assume equal covariances (F approximation with Yao's degrees of freedom);
continuous covariates by least-squares regression of the covariate on the
descriptors. Ejection fraction serves as a scalar baseline.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats as sst

from .cohort import CATEGORICAL, CONTINUOUS, COVARIATES

DEFAULT_M = len(COVARIATES)
ALPHA = 0.05
REPORT_FORMAT = "motion_atlas.association/1"


class StatsError(ValueError):
    pass


class RidgeWarning(RuntimeWarning):
    """A near-singular system was solved with a small ridge."""


@dataclass
class AssociationResult:
    covariate: str
    kind: str
    source: str
    statistic: float | None = None
    statistic_name: str = ""
    p: float | None = None
    p_adjusted: float | None = None
    significant: bool = False
    df: tuple = ()
    ridge: bool = False
    error: str = ""

    def to_dict(self):
        d = asdict(self)
        d["df"] = [float(x) for x in self.df]
        return d


def _as_groups(groups, n):
    g = np.asarray(groups)
    if g.shape != (n,):
        raise StatsError(f"expected {n} group labels, got shape {g.shape}")
    levels = np.unique(g)
    if len(levels) != 2:
        raise StatsError(f"need exactly two groups, found {len(levels)}")
    return g == levels[1]


def _cond_ok(S):
    ev = np.linalg.eigvalsh(S)
    return ev[0] > 1e-12 * max(ev[-1], 1e-300)


def hotelling_t2(D, groups):
    """Two-sample Hotelling T^2 with unpooled covariances.

    Parameters
    ----------
    D : (d, N) descriptors, one column per subject
    groups : length-N binary labels

    Returns
    -------
    t2, F, p, (df1, df2), ridge_used
    """
    D = np.atleast_2d(np.asarray(D, float))
    d, n = D.shape
    g = _as_groups(groups, n)
    A, B = D[:, ~g].T, D[:, g].T
    n1, n2 = len(A), len(B)
    if min(n1, n2) < d + 2:
        raise StatsError(f"group sizes {n1}, {n2} must each be at least d+2 = {d + 2}")
    diff = A.mean(0) - B.mean(0)
    S1 = np.atleast_2d(np.cov(A, rowvar=False)) / n1
    S2 = np.atleast_2d(np.cov(B, rowvar=False)) / n2
    S = S1 + S2
    ridge = False
    if not _cond_ok(S):
        lam = 1e-8 * max(np.trace(S), 1e-300) / d
        warnings.warn(f"singular pooled covariance; ridge {lam:.3g} applied", RidgeWarning,
                      stacklevel=2)
        S = S + lam * np.eye(d)
        ridge = True
    Si_diff = np.linalg.solve(S, diff)
    t2 = float(diff @ Si_diff)
    if t2 <= 0 or not np.isfinite(t2):
        return 0.0, 0.0, 1.0, (float(d), float("inf")), ridge
    # Yao (1965) effective degrees of freedom
    inv_nu = sum(((Si_diff @ Sk @ Si_diff) / t2) ** 2 / (nk - 1)
                 for Sk, nk in ((S1, n1), (S2, n2)))
    nu = 1.0 / inv_nu
    df2 = nu - d + 1
    if df2 <= 0:
        raise StatsError(f"effective degrees of freedom {nu:.3g} too small for d={d}")
    F = (nu - d + 1) / (nu * d) * t2
    p = float(sst.f.sf(F, d, df2))
    return t2, float(F), p, (float(d), float(df2)), ridge


def _ols_r2(Xd, y, ridge=False):
    Xc = Xd - Xd.mean(0)
    yc = y - y.mean()
    if ridge:
        G = Xc.T @ Xc
        lam = 1e-8 * np.trace(G) / G.shape[0]
        beta = np.linalg.solve(G + lam * np.eye(len(G)), Xc.T @ yc)
    else:
        beta = np.linalg.lstsq(Xc, yc, rcond=None)[0]
    res = yc - Xc @ beta
    return 1.0 - float(res @ res) / float(yc @ yc)


def multivariate_r(D, y):
    """R (%) of the regression of ``y`` on the rows of D with intercept.

    Returns
    -------
    R, F, p, (df1, df2), ridge_used
    """
    D = np.atleast_2d(np.asarray(D, float))
    d, n = D.shape
    y = np.asarray(y, float)
    if y.shape != (n,):
        raise StatsError(f"expected {n} covariate values, got shape {y.shape}")
    if n <= d + 2:
        raise StatsError(f"N={n} must exceed d+2={d + 2}")
    if not np.all(np.isfinite(y)) or np.var(y) == 0:
        raise StatsError("covariate must be finite with nonzero variance")
    X = D.T
    Xc = X - X.mean(0)
    ridge = np.linalg.matrix_rank(Xc) < d
    if ridge:
        warnings.warn("collinear descriptors; ridge regression used", RidgeWarning, stacklevel=2)
    r2 = float(np.clip(_ols_r2(X, y, ridge), 0.0, 1.0))
    df2 = n - d - 1
    if r2 >= 1.0:
        F, p = float("inf"), 0.0
    else:
        F = (r2 / d) / ((1 - r2) / df2)
        p = float(sst.f.sf(F, d, df2))
    return 100.0 * np.sqrt(r2), float(F), p, (float(d), float(df2)), bool(ridge)


def ef_baseline_categorical(ef, groups):
    """Welch two-sample t test of EF between two groups: ``(t, p, df)``."""
    ef = np.asarray(ef, float)
    g = _as_groups(groups, len(ef))
    a, b = ef[~g], ef[g]
    if min(len(a), len(b)) < 2:
        raise StatsError("each group needs at least two subjects")
    if np.var(a) == 0 and np.var(b) == 0:
        if a[0] == b[0]:
            return 0.0, 1.0, float("nan")
        raise StatsError("both groups have zero variance with different means")
    res = sst.ttest_ind(a, b, equal_var=False)
    df = getattr(res, "df", float("nan"))
    return float(res.statistic), float(res.pvalue), float(df)


def ef_baseline_continuous(ef, y):
    """Simple regression of ``y`` on EF: ``(R %, p)`` with R = 100 |r|."""
    ef = np.asarray(ef, float)
    y = np.asarray(y, float)
    if len(ef) < 4:
        raise StatsError("need at least four subjects")
    if len(y) != len(ef):
        raise StatsError("EF and covariate differ in length")
    if np.var(ef) == 0:
        raise StatsError("EF has zero variance")
    res = sst.linregress(ef, y)
    return 100.0 * abs(float(res.rvalue)), float(res.pvalue)


def bonferroni(ps, m=None):
    """``min(1, m * p)`` for each p; m defaults to ``len(ps)``."""
    ps = np.asarray(ps, float)
    m = len(ps) if m is None else m
    if m < len(ps):
        raise StatsError(f"m={m} is smaller than the number of p-values ({len(ps)})")
    if np.any((ps < 0) | (ps > 1)) or not np.all(np.isfinite(ps)):
        raise StatsError("p-values must lie in [0, 1]")
    return np.minimum(1.0, m * ps)


def _align(values, n, name):
    v = np.asarray(values, float)
    if v.shape != (n,):
        raise StatsError(f"{name}: expected {n} values, got shape {v.shape}")
    return v


def _test_source(source, D, covariates, m, alpha):
    out = []
    for name in COVARIATES:
        kind = "categorical" if name in CATEGORICAL else "continuous"
        r = AssociationResult(name, kind, source)
        y = covariates.column(name)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RidgeWarning)
                if D is None:
                    raise StatsError("no descriptors")
                if source == "ef":
                    if kind == "categorical":
                        t, r.p, df = ef_baseline_categorical(D, y)
                        r.statistic, r.statistic_name, r.df = t, "t", (df,)
                    else:
                        R, r.p = ef_baseline_continuous(D, y)
                        r.statistic, r.statistic_name, r.df = R, "R", (1.0, len(y) - 2.0)
                elif kind == "categorical":
                    t2, _, r.p, r.df, r.ridge = hotelling_t2(D, y)
                    r.statistic, r.statistic_name = t2, "T2"
                else:
                    R, _, r.p, r.df, r.ridge = multivariate_r(D, y)
                    r.statistic, r.statistic_name = R, "R"
        except (StatsError, np.linalg.LinAlgError, ValueError) as exc:
            r.error = str(exc)
        out.append(r)
    ok = [r for r in out if r.p is not None]
    if ok:
        for r, pa in zip(ok, bonferroni([r.p for r in ok], max(m, len(ok)))):
            r.p_adjusted = float(pa)
            r.significant = bool(pa < alpha)
    return out


def associate_all(embeddings, ef, covariates, m=DEFAULT_M, alpha=ALPHA):
    """Test every covariate against each descriptor source and the EF baseline.

    Parameters
    ----------
    embeddings : Embedding or dict name -> Embedding (columns are subjects)
    ef : per-subject ejection fraction (%) aligned with ``covariates``, or None
    covariates : CovariateTable; reordered to the embedding's subject ids
        when those are present

    Returns
    -------
    list of AssociationResult
        Failures are recorded in ``error`` rather than raised.
    """
    if not isinstance(embeddings, dict):
        embeddings = {embeddings.method: embeddings}
    results = []
    for source, emb in embeddings.items():
        cov = covariates
        if emb.subject_ids and list(emb.subject_ids) != list(covariates.subject_ids):
            cov = covariates.subset(emb.subject_ids)
        results += _test_source(source, emb.D, cov, m, alpha)
    if ef is not None:
        ef = _align(ef, len(covariates), "ef")
        results += _test_source("ef", ef, covariates, m, alpha)
    return results


def report_dict(results, meta=None):
    sources = list(dict.fromkeys(r.source for r in results))
    table = {}
    for r in results:
        table.setdefault(r.covariate, {"kind": r.kind})[r.source] = {
            k: v for k, v in r.to_dict().items() if k not in ("covariate", "kind", "source")}
    return {"format": REPORT_FORMAT, "meta": dict(meta or {}), "sources": sources,
            "covariates": [c for c in COVARIATES if c in table], "table": table}


def report_json(results, meta=None):
    return json.dumps(report_dict(results, meta), indent=1, sort_keys=True) + "\n"


def _cell(r):
    if r is None:
        return "-"
    if r.error:
        return "error"
    stat = "" if r.statistic_name != "R" else f"R={r.statistic:.1f} "
    star = "*" if r.significant else ""
    return f"{stat}p={r.p_adjusted:.3g}{star}"


def report_text(results, header=()):
    """Plain-text table: one row per covariate, one column per source.

    Cells show R (continuous covariates) and the Bonferroni-adjusted p;
    ``*`` marks significance.
    """
    sources = list(dict.fromkeys(r.source for r in results))
    by = {(r.covariate, r.source): r for r in results}
    rows = [["covariate"] + sources]
    for c in COVARIATES:
        if any((c, s) in by for s in sources):
            rows.append([c] + [_cell(by.get((c, s))) for s in sources])
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = [f"# {h}" for h in header]
    for k, row in enumerate(rows):
        lines.append("  ".join(x.ljust(w) for x, w in zip(row, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    errs = [r for r in results if r.error]
    for r in errs:
        lines.append(f"! {r.source}/{r.covariate}: {r.error}")
    return "\n".join(lines) + "\n"


__all__ = ["AssociationResult", "StatsError", "RidgeWarning", "hotelling_t2", "multivariate_r",
           "ef_baseline_categorical", "ef_baseline_continuous", "bonferroni", "associate_all",
           "report_dict", "report_json", "report_text", "CONTINUOUS", "CATEGORICAL"]
