import numpy as np
import pytest

from motion_atlas.cohort import motion_profile
from motion_atlas.geometry import VolumeCurve
from motion_atlas.qc import (REASONS, DiastolePhases, MalformedCurve, QcThresholds,
                             analyze_diastole, analyze_systole, detect_ed_es, qc_volume_curve,
                             segment_diastole)


def _ramp(k):
    return 0.5 * (1 - np.cos(np.pi * np.clip(k, 0, 1)))


def phantom_curve(T=50, level=0.3, **kw):
    return 120.0 * (1 - 0.6 * motion_profile(T, diastasis_level=level, **kw))


def test_detect_ed_es_example():
    assert detect_ed_es([100, 80, 50, 70, 95]) == (0, 2)


def test_detect_ed_es_shift_equivariant():
    v = phantom_curve(40)
    ed, es = detect_ed_es(v)
    for k in (1, 7, 23):
        assert detect_ed_es(np.roll(v, k)) == ((ed + k) % 40, (es + k) % 40)


def test_detect_ed_es_tie_takes_earlier():
    assert detect_ed_es([100, 50, 80, 50, 90]) == (0, 1)
    assert detect_ed_es([90, 50, 90, 60]) == (0, 1)


def test_detect_ed_es_malformed():
    with pytest.raises(MalformedCurve):
        detect_ed_es([1.0, 1.0, 1.0, 1.0])
    with pytest.raises(MalformedCurve):
        detect_ed_es([3.0, 2.0, 1.0])


def _descent(T=50, es=20, step=None, ripple=0.0):
    v = np.full(T, 50.0)
    k = np.arange(es + 1) / es
    shape = _ramp(k) if step is None else 0.5 * (_ramp(k / 0.4) + _ramp((k - 0.6) / 0.4))
    v[: es + 1] = 120 - 70 * shape
    v[: es + 1] += ripple * np.sin(2 * np.pi * 6 * k) * np.sin(np.pi * k)
    v[es + 1:] = 50 + 70 * _ramp(np.arange(1, T - es) / (T - es - 1))
    return v


def test_systole_smooth_descent_passes():
    assert analyze_systole(_descent(), 0, 20)


def test_systole_plateau_then_second_drop_fails():
    assert not analyze_systole(_descent(step=True), 0, 20)


def test_systole_sub_prominence_ripple_passes():
    v = _descent(ripple=0.15)
    rate = -np.gradient(v)
    # the ripple is visible in the raw rate but stays under the 5% floor
    assert np.ptp(np.diff(np.sign(np.diff(rate[:21])))) > 0
    assert analyze_systole(v, 0, 20)
    assert not analyze_systole(_descent(ripple=6.0), 0, 20)


def test_phantom_curve_three_ordered_phases():
    v = phantom_curve(50)
    ed, es = detect_ed_es(v)
    ph = segment_diastole(v, es, ed)
    ri, di, at = ph.rapid_inflow, ph.diastasis, ph.atrial_systole
    # ranges are half-open and the last one includes the closing ED frame
    assert ri[0] == es and ri[0] < ri[1] == di[0] < di[1] == at[0] < at[1] == ed + 50 + 1
    # the flat stretch of the profile sits inside the diastasis
    assert di[0] <= 27 and di[1] >= 40


def test_young_pattern_without_diastasis():
    # early and atrial filling waves overlap, so the rate never pauses
    T, es = 40, 14
    v = np.empty(T)
    v[: es + 1] = 120 - 70 * _ramp(np.arange(es + 1) / es)
    D = T - es
    j = np.arange(D + 1)
    rate = (np.exp(-0.5 * ((j - 0.3 * D) / (0.15 * D)) ** 2)
            + 0.7 * np.exp(-0.5 * ((j - 0.85 * D) / (0.12 * D)) ** 2))
    filled = np.concatenate([[0.0], np.cumsum(rate[1:])])
    v[es:] = 50 + 70 * filled[:-1] / filled[-1]
    ph = segment_diastole(v, es, 0)
    assert ph.diastasis_empty
    assert ph.rapid_inflow[1] - ph.rapid_inflow[0] > 5
    assert ph.atrial_systole[1] - ph.atrial_systole[0] > 5
    assert qc_volume_curve(v).passed


def test_monotone_rise_with_terminal_kick():
    # early filling, a slow rise (under the 10% limit) and one final upstroke
    T, es = 50, 18
    v = np.empty(T)
    v[: es + 1] = 120 - 70 * _ramp(np.arange(es + 1) / es)
    early = np.arange(es, 27)
    v[early] = 50 + 45 * _ramp((early - es) / (27 - es))
    slow = np.arange(27, 42)
    v[slow] = 95 + 5 * (slow - 27) / 15
    kick = np.arange(42, T)
    v[kick] = 100 + 20 * _ramp((kick - 41) / (T - 41))
    assert np.all(np.diff(v[es:]) > 0)
    ph = segment_diastole(v, es, 0)
    assert ph.atrial_systole == (41, T + 1)
    assert qc_volume_curve(v).passed


def _phases():
    return DiastolePhases((20, 25), (25, 38), (38, 50))


def test_diastasis_twelve_percent_swing_fails():
    v = phantom_curve(50)
    v[25:38] = np.linspace(v[25], 0.88 * v[25], 13)
    assert "diastasis-unstable" in analyze_diastole(v, _phases())


def test_diastasis_exactly_ten_percent_passes():
    v = phantom_curve(50)
    v[25:38] = 100.0
    v[30] = 90.0
    assert (100.0 - 90.0) / 100.0 == 0.10
    assert "diastasis-unstable" not in analyze_diastole(v, _phases())


def test_two_atrial_kicks_fail():
    T = 50
    # atrial filling carries most of the stroke, as in a stiff ventricle
    v = phantom_curve(T, level=0.6)
    k = (np.arange(36, 51) - 36) / 14
    base = v[35]
    # a steady baseline keeps the pause between kicks above the phase threshold
    surges = 0.45 * k + 0.275 * (_ramp(k / 0.35) + _ramp((k - 0.65) / 0.35))
    v[np.arange(36, 51) % T] = base + (v[0] - base) * surges
    rep = qc_volume_curve(v)
    assert rep.reasons == ["atrial-multi-peak"]


def test_clean_phantom_curve_passes():
    for T in (20, 30, 50):
        rep = qc_volume_curve(VolumeCurve(phantom_curve(T), subject_id="x"))
        assert rep.passed, (T, rep.reasons)
        assert rep.subject_id == "x"
        assert (rep.ed_index, rep.es_index) == detect_ed_es(phantom_curve(T))


def test_malformed_curves_reported():
    for bad in ([1.0, 1.0, 1.0, 1.0, 1.0], [5.0, np.nan, 3.0, 4.0], [5.0, 4.0, -1.0, 4.0]):
        rep = qc_volume_curve(np.array(bad))
        assert not rep.passed and rep.reasons == ["malformed-curve"]


def test_report_dict_contract():
    d = qc_volume_curve(phantom_curve(20)).to_dict()
    assert d["pass"] is True and d["reasons"] == []
    assert set(d) >= {"subject_id", "pass", "reasons", "ed_index", "es_index"}
    assert all(r in REASONS for r in ("systole-multi-peak", "diastasis-unstable"))


def test_window_scales_with_frames():
    assert QcThresholds.for_frames(50).window == 5
    assert QcThresholds.for_frames(20).window == 3
    assert QcThresholds.for_frames(20, window=7).window == 7


def test_scale_invariance():
    v = phantom_curve(30)
    v = v.copy()
    v[12:16] += [0, 3, -2, 0]
    a, b = qc_volume_curve(v), qc_volume_curve(v * 7.5)
    assert (a.passed, a.reasons) == (b.passed, b.reasons)
