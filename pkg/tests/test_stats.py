import json

import numpy as np
import pytest

import oracles
from motion_atlas.cohort import COVARIATES, CovariateRecord, CovariateTable
from motion_atlas.embed import Embedding
from motion_atlas.stats import (RidgeWarning, StatsError, associate_all, bonferroni,
                                ef_baseline_categorical, ef_baseline_continuous, hotelling_t2,
                                multivariate_r, report_dict, report_json, report_text)


def _labels(n1, n2):
    return np.r_[np.zeros(n1, int), np.ones(n2, int)]


# Hotelling T^2 with unequal covariances

def test_hotelling_identical_groups():
    x = np.random.default_rng(0).normal(size=(3, 20))
    t2, F, p, _, _ = hotelling_t2(np.hstack([x, x]), _labels(20, 20))
    assert t2 == 0.0 and p == 1.0


def test_hotelling_one_dimension_is_welch():
    a, b = oracles.welch_sample()
    t, df = oracles.welch(a, b)
    t2, F, p, (df1, df2), _ = hotelling_t2(np.r_[a, b][None], _labels(len(a), len(b)))
    assert t2 == pytest.approx(t**2, rel=1e-8)
    # Yao's df reduces to Welch-Satterthwaite when d = 1
    assert df2 == pytest.approx(df, rel=1e-8)
    assert df == pytest.approx(oracles.FROZEN["welch_df_seed3"], rel=1e-12)
    from scipy import stats
    assert p == pytest.approx(stats.ttest_ind(a, b, equal_var=False).pvalue, rel=1e-8)


def test_hotelling_matches_explicit_inverse():
    A, B = oracles.hotelling_sample()
    t2, _, p, (d, df2), _ = hotelling_t2(np.vstack([A, B]).T, _labels(len(A), len(B)))
    ref = oracles.hotelling_unpooled(A, B)
    nu = df2 + d - 1
    np.testing.assert_allclose((t2, nu, p), ref, rtol=1e-10)
    np.testing.assert_allclose((t2, nu, p), oracles.FROZEN["hotelling_seed5"], rtol=1e-10)


def _power_trials(seeds):
    hits = 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(150, 4))
        B = rng.normal(size=(150, 4))
        B[:, 0] += 0.5
        hits += hotelling_t2(np.vstack([A, B]).T, _labels(150, 150))[2] < 0.05
    return hits


@pytest.mark.xfail(strict=True, reason="the exact power of this design is 0.949, so 95 of 100 "
                   "is reached only by chance; see test_hotelling_power_matches_noncentral_f")
def test_hotelling_power():
    assert _power_trials(range(100)) >= 95


def test_hotelling_power_matches_noncentral_f():
    from scipy import stats
    lam = 0.5**2 / (1 / 150 + 1 / 150)
    exact = stats.ncf.sf(stats.f.isf(0.05, 4, 295), 4, 295, lam)
    rate = _power_trials(range(1000)) / 1000
    se = np.sqrt(exact * (1 - exact) / 1000)
    assert abs(rate - exact) < 3 * se


def test_hotelling_permutation_calibration():
    rng = np.random.default_rng(7)
    D = rng.normal(size=(4, 300)) * [[1.0], [2.0], [0.5], [1.0]]
    g = _labels(150, 150)
    rate = np.mean([hotelling_t2(D, rng.permutation(g))[2] < 0.05 for _ in range(1000)])
    assert 0.03 <= rate <= 0.07


def test_hotelling_affine_invariance(rng):
    D = rng.normal(size=(3, 80))
    g = rng.permutation(_labels(40, 40))
    M = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    a = hotelling_t2(D, g)
    b = hotelling_t2(M @ D + rng.normal(size=(3, 1)), g)
    assert b[0] == pytest.approx(a[0], rel=1e-8)
    assert b[2] == pytest.approx(a[2], rel=1e-8)


def test_hotelling_errors_and_ridge(rng):
    with pytest.raises(StatsError, match="d\\+2"):
        hotelling_t2(rng.normal(size=(4, 10)), _labels(5, 5))
    with pytest.raises(StatsError):
        hotelling_t2(rng.normal(size=(2, 10)), np.zeros(10))
    D = rng.normal(size=(2, 40))
    D = np.vstack([D, D[0] + D[1]])
    with pytest.warns(RidgeWarning):
        assert hotelling_t2(D, _labels(20, 20))[4]


# multivariate regression R

def test_r_exact_linear():
    rng = np.random.default_rng(1)
    D = rng.normal(size=(3, 50))
    R, F, p, _, _ = multivariate_r(D, [1.0, -2.0, 0.5] @ D + 4.0)
    assert R == pytest.approx(100.0) and p < 1e-12


def test_r_one_dimension_is_correlation(rng):
    x, y = rng.normal(size=60), rng.normal(size=60)
    y += 0.4 * x
    assert multivariate_r(x[None], y)[0] == pytest.approx(100 * abs(np.corrcoef(x, y)[0, 1]),
                                                          rel=1e-10)


def test_r_matches_least_squares_oracle(rng):
    D = rng.normal(size=(5, 90))
    y = D[1] - 0.3 * D[3] + rng.normal(size=90)
    assert multivariate_r(D, y)[0] == pytest.approx(oracles.multiple_r(D.T, y), rel=1e-10)


def test_r_permutation_calibration():
    rng = np.random.default_rng(11)
    D = rng.normal(size=(8, 300))
    y = rng.normal(size=300)
    rate = np.mean([multivariate_r(D, rng.permutation(y))[2] < 0.05 for _ in range(1000)])
    assert 0.03 <= rate <= 0.07


def test_r_invariances(rng):
    D = rng.normal(size=(4, 70))
    y = D[0] + rng.normal(size=70)
    M = rng.normal(size=(4, 4)) + 3 * np.eye(4)
    R = multivariate_r(D, y)[0]
    assert multivariate_r(M @ D, y)[0] == pytest.approx(R, rel=1e-8)
    assert multivariate_r(D, -3 * y + 7)[0] == pytest.approx(R, rel=1e-8)


def test_r_errors(rng):
    with pytest.raises(StatsError):
        multivariate_r(rng.normal(size=(4, 6)), rng.normal(size=6))
    with pytest.raises(StatsError):
        multivariate_r(rng.normal(size=(2, 20)), np.ones(20))
    D = rng.normal(size=(2, 30))
    with pytest.warns(RidgeWarning):
        assert multivariate_r(np.vstack([D, 2 * D[0]]), rng.normal(size=30))[4]


# EF baselines

def test_ef_categorical():
    rng = np.random.default_rng(2)
    a, b = rng.normal(59.2, 6.3, 100), rng.normal(49.2, 6.3, 100)
    t, p, df = ef_baseline_categorical(np.r_[a, b], _labels(100, 100))
    assert p < 1e-6
    assert t == pytest.approx(oracles.welch(a, b)[0], rel=1e-10)
    assert ef_baseline_categorical(np.r_[a, a], _labels(100, 100))[1] == pytest.approx(1.0)
    with pytest.raises(StatsError):
        ef_baseline_categorical(np.r_[a[:1], b], _labels(1, 100))
    assert ef_baseline_categorical(np.full(6, 55.0), _labels(3, 3))[1] == 1.0


def test_ef_continuous(rng):
    ef = rng.normal(60, 6, 40)
    assert ef_baseline_continuous(ef, 2 * ef + 1)[0] == pytest.approx(100.0)
    with pytest.raises(StatsError):
        ef_baseline_continuous(ef[:3], ef[:3])
    with pytest.raises(StatsError):
        ef_baseline_continuous(np.ones(10), ef[:10])


def test_ef_continuous_calibration():
    rng = np.random.default_rng(13)
    ef, y = rng.normal(60, 6, 300), rng.normal(size=300)
    rate = np.mean([ef_baseline_continuous(ef, rng.permutation(y))[1] < 0.05 for _ in range(1000)])
    assert 0.03 <= rate <= 0.07


# multiple testing

def test_bonferroni():
    assert bonferroni([0.01], 7)[0] == pytest.approx(0.07)
    assert bonferroni([0.5], 7)[0] == 1.0
    ps = [0.2, 0.01, 0.03]
    np.testing.assert_array_equal(bonferroni(ps[:1], 1), ps[:1])
    adj = bonferroni(ps, 7)
    assert np.all(np.diff(adj[np.argsort(ps)]) >= 0) and np.all(adj >= ps)
    with pytest.raises(StatsError):
        bonferroni([1.2], 7)
    with pytest.raises(StatsError):
        bonferroni([0.1, 0.2], 1)


# association table

def _table(rng, n):
    recs = [CovariateRecord(age=float(rng.normal(61, 8)), bmi=float(rng.normal(26, 4)),
                            bfp=float(rng.normal(28, 7)), bmr=float(rng.normal(6650, 1300)),
                            smoking=int(rng.random() < 0.4), alcohol=int(rng.random() < 0.5),
                            hypertension=int(rng.random() < 0.5)) for _ in range(n)]
    return CovariateTable([f"S{i:04d}" for i in range(n)], recs)


def test_associate_all_planted_effects(rng):
    n = 200
    cov = _table(rng, n)
    D = rng.normal(size=(4, n))
    D[0] += 1.0 * cov.column("hypertension")
    D[1] += 0.1 * (cov.column("age") - 61)
    ef = rng.normal(60, 5, n)
    emb = Embedding(D, "pca", 0.1, subject_ids=cov.subject_ids)
    res = associate_all({"pca": emb}, ef, cov)
    assert len(res) == 2 * len(COVARIATES)
    by = {(r.source, r.covariate): r for r in res}
    assert by["pca", "hypertension"].significant and by["pca", "age"].significant
    assert by["pca", "hypertension"].statistic_name == "T2"
    assert by["pca", "age"].statistic_name == "R" and 0 <= by["pca", "age"].statistic <= 100
    for r in res:
        assert 0 <= r.p <= r.p_adjusted <= 1


def test_noise_covariates_rarely_significant():
    hits = 0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        cov = _table(rng, 150)
        emb = Embedding(rng.normal(size=(5, 150)), "lle", 0.1)
        res = associate_all(emb, None, cov)
        hits += any(r.significant for r in res if r.covariate == "bmi")
    assert hits <= 2


def test_associate_all_collects_errors(rng):
    cov = _table(rng, 6)
    emb = Embedding(rng.normal(size=(4, 6)), "sda", 0.1)
    res = associate_all(emb, rng.normal(60, 5, 6), cov)
    assert all(r.error for r in res if r.source == "sda")
    assert any(r.p is not None for r in res if r.source == "ef")


def test_reports(rng):
    cov = _table(rng, 60)
    emb = Embedding(rng.normal(size=(2, 60)), "pca", 0.1)
    res = associate_all(emb, rng.normal(60, 5, 60), cov)
    doc = json.loads(report_json(res, {"n": 60}))
    assert doc == json.loads(json.dumps(report_dict(res, {"n": 60})))
    assert doc["sources"] == ["pca", "ef"] and doc["covariates"] == list(COVARIATES)
    cell = doc["table"]["age"]["pca"]
    assert set(cell) >= {"statistic", "p", "p_adjusted", "significant"}
    text = report_text(res, header=["toy"])
    lines = text.splitlines()
    assert lines[0] == "# toy" and lines[1].split() == ["covariate", "pca", "ef"]
    assert len([ln for ln in lines if ln.split()[0] in COVARIATES]) == 7
    assert report_json(res) == report_json(res)
