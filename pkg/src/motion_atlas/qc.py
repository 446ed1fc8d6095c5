"""Volume-curve quality control.

A curve is rejected when the systolic downslope or either diastolic upslope
(rapid inflow, atrial systole) shows more than one prominent derivative peak,
or when the volume drifts by more than a set fraction during diastasis.
Derivatives are central differences of the cyclically smoothed curve, in
volume units per frame; all thresholds are relative so decisions do not depend
on the curve's scale.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import find_peaks

from .geometry import VolumeCurve

REASONS = (
    "systole-multi-peak",
    "inflow-multi-peak",
    "diastasis-unstable",
    "atrial-multi-peak",
    "malformed-curve",
)


class MalformedCurve(ValueError):
    """Raised when a curve cannot be screened at all."""


@dataclass(frozen=True)
class QcThresholds:
    prominence: float = 0.05
    inflow_fraction: float = 0.20
    diastasis_limit: float = 0.10
    window: int = 5

    @classmethod
    def for_frames(cls, n_frames, **kw):
        """Thresholds with the smoothing window spanning ~10% of the cycle
        (5 frames at 50 frames per cycle, never fewer than 3)."""
        w = max(3, int(round(0.1 * n_frames)))
        kw.setdefault("window", w if w % 2 else w + 1)
        return cls(**kw)


@dataclass(frozen=True)
class DiastolePhases:
    """Half-open ``(start, stop)`` frame ranges, unwrapped so that
    ``es <= start`` and indices past ``T`` wrap onto the next cycle."""

    rapid_inflow: tuple
    diastasis: tuple
    atrial_systole: tuple

    @property
    def diastasis_empty(self):
        return self.diastasis[1] <= self.diastasis[0]


@dataclass
class QcReport:
    subject_id: str = ""
    passed: bool = True
    reasons: list = field(default_factory=list)
    ed_index: int | None = None
    es_index: int | None = None
    inflow_end: int | None = None
    diastasis_end: int | None = None

    def to_dict(self):
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


def _volumes(curve):
    return curve.volumes if isinstance(curve, VolumeCurve) else np.asarray(curve, float)


def smooth_cyclic(v, window=5):
    """Centered moving average with wrap-around."""
    if window <= 1:
        return np.asarray(v, float).copy()
    h = window // 2
    padded = np.concatenate([v[-h:], v, v[:h]])
    return np.convolve(padded, np.ones(window) / window, mode="valid")


def volume_rate(curve, window=5):
    """dV/dt per frame after smoothing, cyclic central differences."""
    s = smooth_cyclic(_volumes(curve), window)
    return 0.5 * (np.roll(s, -1) - np.roll(s, 1))


def detect_ed_es(curve):
    v = _volumes(curve)
    if len(v) < 4:
        raise MalformedCurve("curve has fewer than 4 frames")
    if np.ptp(v) == 0:
        raise MalformedCurve("constant volume curve")
    return int(np.argmax(v)), int(np.argmin(v))


def _cyclic(start, stop, n):
    return np.arange(start, stop + 1) % n


def _count_peaks(rate, idx, min_prominence):
    """Prominent maxima of ``rate`` on the cyclic index run ``idx``.

    One neighbour on each side is included so that a peak sitting on a
    segment end can still be seen as a local maximum.
    """
    n = len(rate)
    ext = np.concatenate([[idx[0] - 1], idx, [idx[-1] + 1]]) % n
    peaks, _ = find_peaks(rate[ext], prominence=min_prominence)
    peaks = peaks - 1
    return peaks[(peaks >= 0) & (peaks < len(idx))]


def analyze_systole(curve, ed, es, thresholds=None):
    """True when -dV/dt between ED and ES has a single prominent peak."""
    v = _volumes(curve)
    n = len(v)
    thresholds = thresholds or QcThresholds.for_frames(n)
    stop = es if es > ed else es + n
    idx = _cyclic(ed, stop, n)
    if len(idx) < 3:
        raise MalformedCurve("systolic segment shorter than 3 frames")
    rate = -volume_rate(v, thresholds.window)
    floor = thresholds.prominence * np.abs(rate).max()
    return len(_count_peaks(rate, idx, floor)) <= 1


def segment_diastole(curve, es, ed_end, thresholds=None):
    """Split ES -> ED into rapid inflow, diastasis and atrial systole."""
    v = _volumes(curve)
    n = len(v)
    thresholds = thresholds or QcThresholds.for_frames(n)
    if ed_end <= es:
        ed_end += n
    idx = _cyclic(es, ed_end, n)
    if len(idx) < 3:
        raise MalformedCurve("diastolic segment shorter than 3 frames")
    rate = volume_rate(v, thresholds.window)
    seg = rate[idx]
    gmax = seg.max()
    if gmax <= 0:
        raise MalformedCurve("no filling during diastole")
    thr = thresholds.inflow_fraction * gmax
    floor = thresholds.prominence * np.abs(rate).max()
    peaks = _count_peaks(rate, idx, floor)
    first = peaks[0] if len(peaks) else int(np.argmax(seg))
    m = len(idx)

    later = peaks[peaks > first]
    # a pause only counts before the last filling wave; the taper into ED does not
    limit = later[-1] if later.size else m
    below = np.flatnonzero(seg[first + 1:limit] < thr)
    if below.size:
        k_end = first + 1 + below[0]
        ups = [j for j in range(k_end, m - 1) if seg[j] < thr <= seg[j + 1]]
        a_start = ups[-1] if ups else m
    else:
        k_end = m
        if later.size:
            last = later[-1]
            prev = peaks[peaks < last][-1]
            a_start = prev + int(np.argmin(seg[prev:last + 1]))
            k_end = a_start
        else:
            a_start = m
    if not (0 < k_end <= a_start <= m):
        raise MalformedCurve("inverted diastolic phase boundaries")
    return DiastolePhases(
        (es, es + k_end), (es + k_end, es + a_start), (es + a_start, es + m)
    )


def analyze_diastole(curve, phases, thresholds=None):
    """Reasons (possibly none) raised by the diastolic rules."""
    v = _volumes(curve)
    n = len(v)
    thresholds = thresholds or QcThresholds.for_frames(n)
    rate = volume_rate(v, thresholds.window)
    floor = thresholds.prominence * np.abs(rate).max()
    reasons = []
    a, b = phases.rapid_inflow
    if b - a >= 1 and len(_count_peaks(rate, np.arange(a, b) % n, floor)) > 1:
        reasons.append("inflow-multi-peak")
    a, b = phases.diastasis
    if b - a >= 2:
        d = v[np.arange(a, b) % n]
        if (d.max() - d.min()) / d[0] > thresholds.diastasis_limit:
            reasons.append("diastasis-unstable")
    a, b = phases.atrial_systole
    if b - a >= 1 and len(_count_peaks(rate, np.arange(a, b) % n, floor)) > 1:
        reasons.append("atrial-multi-peak")
    return reasons


def qc_volume_curve(curve, thresholds=None):
    """Run every rule and collect the failure reasons."""
    sid = getattr(curve, "subject_id", "")
    try:
        v = _volumes(curve)
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise MalformedCurve("non-finite or non-positive volume")
        thresholds = thresholds or QcThresholds.for_frames(len(v))
        ed, es = detect_ed_es(v)
        report = QcReport(sid, ed_index=ed, es_index=es)
        if not analyze_systole(v, ed, es, thresholds):
            report.reasons.append("systole-multi-peak")
        phases = segment_diastole(v, es, ed, thresholds)
        report.inflow_end = int(phases.rapid_inflow[1] % len(v))
        report.diastasis_end = int(phases.diastasis[1] % len(v))
        report.reasons.extend(analyze_diastole(v, phases, thresholds))
    except MalformedCurve:
        return QcReport(sid, passed=False, reasons=["malformed-curve"])
    report.passed = not report.reasons
    return report
