import dataclasses
import math

import numpy as np
import pytest

import oracles
from motion_atlas.cohort import (ARTIFACT_KINDS, CohortConfig, CovariateRecord, CovariateTable,
                                 SubjectSpec, analytic_ef, cohort_summary, inject_artifact,
                                 motion_profile, subject_specs, synth_cohort, synth_subject)
from motion_atlas.geometry import GeometryError, ejection_fraction, volume_curve
from motion_atlas.qc import qc_volume_curve

SMALL = dict(n_rings=12, n_sectors=24)


def test_static_when_motion_is_off():
    seq = synth_subject(SubjectSpec(contraction=0.0, shortening=0.0, twist=0.0, **SMALL))
    w = seq.wall_positions()
    assert np.array_equal(w, np.broadcast_to(w[0], w.shape))


def test_ef_sixty_phantom():
    s = 0.12
    c = 1 - math.sqrt(0.4 / (1 - s))
    spec = SubjectSpec(contraction=c, shortening=s, **SMALL)
    assert analytic_ef(spec) == pytest.approx(60.0)
    assert oracles.half_ellipsoid_ef(c, s) == pytest.approx(60.0)
    assert abs(ejection_fraction(volume_curve(synth_subject(spec))) - 60.0) < 1.0


def test_subject_is_deterministic():
    spec = SubjectSpec(seed=42, pose=True, position_noise=0.1, **SMALL)
    a, b = synth_subject(spec), synth_subject(spec)
    assert np.array_equal(a.wall_positions(), b.wall_positions())


def test_frame_zero_is_end_diastole():
    v = volume_curve(synth_subject(SubjectSpec(**SMALL))).volumes
    assert np.argmax(v) == 0


def test_negative_radius_rejected():
    with pytest.raises(GeometryError):
        synth_subject(SubjectSpec(contraction=1.2, **SMALL))
    spec = SubjectSpec(contraction=0.8, defect_segments=(1,), defect_multiplier=3.0,
                       defect_preserves_ef=False, **SMALL)
    with pytest.raises(GeometryError, match="negative radius"):
        synth_subject(spec)


def test_motion_profile_phases():
    f = motion_profile(20)
    assert f[0] == 0.0 and f.max() == 1.0
    assert np.argmax(f) == 7
    assert np.all(np.diff(f[:8]) > 0)
    flat = f[10:16]
    assert np.ptp(flat) == 0


def test_twist_changes_no_volume_convergence():
    # the polyhedral cavity shears slightly under twist; the effect falls off
    # as the square of the mesh spacing
    diffs = []
    for r, s in ((12, 24), (24, 48), (48, 96)):
        a = SubjectSpec(n_rings=r, n_sectors=s)
        b = dataclasses.replace(a, twist=0.0)
        va = volume_curve(synth_subject(a)).volumes
        vb = volume_curve(synth_subject(b)).volumes
        diffs.append(np.abs(va - vb).max())
    assert diffs[0] / diffs[1] > 3.5 and diffs[1] / diffs[2] > 3.5
    assert diffs[-1] / 100.0 < 1e-4


@pytest.mark.xfail(strict=True, reason="a polyhedral mesh cannot hold volume to 1e-9 ml under "
                   "a height-dependent twist; see test_twist_changes_no_volume_convergence")
def test_twist_changes_no_volume_exactly():
    a = SubjectSpec(**SMALL)
    b = dataclasses.replace(a, twist=0.0)
    va = volume_curve(synth_subject(a)).volumes
    vb = volume_curve(synth_subject(b)).volumes
    assert np.abs(va - vb).max() <= 1e-9


def test_defect_preserves_ef():
    base = SubjectSpec(**SMALL)
    defect = dataclasses.replace(base, defect_segments=(2, 3, 8, 9, 14), defect_multiplier=0.6)
    ef0 = ejection_fraction(volume_curve(synth_subject(base)))
    ef1 = ejection_fraction(volume_curve(synth_subject(defect)))
    # the gain is matched without twist, which shears the mesh slightly
    assert ef1 == pytest.approx(ef0, abs=0.01)
    # the motion itself is different
    w0, w1 = synth_subject(base).wall_positions(), synth_subject(defect).wall_positions()
    assert np.abs(w0 - w1).max() > 0.5


def test_hypertension_lowers_group_ef():
    cfg = CohortConfig(n_subjects=80, effects={"hypertension": ("contraction", -0.15)},
                       noise=0.02, **SMALL)
    specs = subject_specs(cfg)
    ef = np.array([analytic_ef(s) for s in specs])
    ht = np.array([s.covariates.hypertension for s in specs], bool)
    assert ef[ht].mean() < ef[~ht].mean() - 3


def test_configured_proportions_echoed():
    cfg = CohortConfig(n_subjects=3000, seed=5)
    specs = subject_specs(cfg)
    table = CovariateTable([s.subject_id for s in specs], [s.covariates for s in specs])
    summary = cohort_summary(table)
    assert summary["n"] == 3000
    assert summary["hypertension"]["percent"] == pytest.approx(48.4, abs=3.0)
    assert summary["smoking"]["percent"] == pytest.approx(38.2, abs=3.0)
    assert summary["age"]["mean"] == pytest.approx(61.0, abs=0.6)
    assert summary["bmr"]["sd"] == pytest.approx(1324.9, rel=0.05)


def test_zero_effects_leave_motion_independent():
    cfg = CohortConfig(n_subjects=200, effects={}, seed=3)
    specs = subject_specs(cfg)
    c = np.array([s.contraction for s in specs])
    for name in ("age", "bfp", "hypertension"):
        y = np.array([getattr(s.covariates, name) for s in specs], float)
        assert abs(np.corrcoef(c, y)[0, 1]) < 0.2


def test_unknown_effect_rejected():
    with pytest.raises(ValueError):
        CohortConfig(effects={"height": ("twist", 0.1)}).validate()
    with pytest.raises(ValueError):
        CohortConfig(effects={"age": ("wobble", 0.1)}).validate()


def test_covariate_csv_round_trip(tmp_path):
    seqs, table, _ = synth_cohort(CohortConfig(n_subjects=4, **SMALL))
    path = tmp_path / "cov.csv"
    table.to_csv(path)
    back = CovariateTable.from_csv(path)
    assert back.subject_ids == table.subject_ids
    for name in ("age", "bmr", "smoking"):
        assert np.array_equal(back.column(name), table.column(name))


def test_covariate_csv_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("subject_id,age\nS0,1\n")
    with pytest.raises(ValueError, match="unexpected header"):
        CovariateTable.from_csv(path)
    with pytest.raises(ValueError):
        CovariateRecord(smoking=2)


@pytest.mark.parametrize("kind,reason", [
    ("double_systolic_peak", "systole-multi-peak"),
    ("bumpy_inflow", "inflow-multi-peak"),
    ("unstable_diastasis", "diastasis-unstable"),
    ("extra_atrial_peak", "atrial-multi-peak"),
])
def test_each_artifact_breaks_its_rule(kind, reason):
    seq = synth_subject(SubjectSpec(**SMALL))
    rep = qc_volume_curve(volume_curve(inject_artifact(seq, kind)))
    assert rep.reasons == [reason]


def test_unstable_diastasis_swing_is_twelve_percent():
    seq = synth_subject(SubjectSpec(**SMALL))
    v0 = volume_curve(seq).volumes
    v1 = volume_curve(inject_artifact(seq, "unstable_diastasis")).volumes
    rep = qc_volume_curve(v0)
    a, b = rep.inflow_end, rep.diastasis_end
    swing = (v1[a:b].max() - v1[a:b].min()) / v1[a]
    assert swing == pytest.approx(0.12, abs=0.005)


def test_noop_artifact_passes():
    seq = synth_subject(SubjectSpec(**SMALL))
    out = inject_artifact(seq, "none", magnitude=0.0)
    assert np.allclose(out.wall_positions(), seq.wall_positions())
    assert qc_volume_curve(volume_curve(out)).passed


def test_unknown_artifact_rejected():
    with pytest.raises(ValueError):
        inject_artifact(synth_subject(SubjectSpec(**SMALL)), "wobble")


def test_cohort_artifacts_are_recorded():
    cfg = CohortConfig(n_subjects=20, artifact_fraction=0.2, **SMALL)
    seqs, table, artifacts = synth_cohort(cfg)
    assert len(artifacts) == 4
    assert sorted(artifacts.values()) == sorted(ARTIFACT_KINDS[:4])
    assert len(seqs) == len(table) == 20
