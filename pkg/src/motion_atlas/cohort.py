"""Synthetic LV cohorts with configurable covariate effects.

Each subject is a pair of prolate half-ellipsoid shells (endo and epi) on the
same ring grid, animated by radial contraction, longitudinal shortening and
apex-to-base twist. Because the motion without twist is a linear map of the
shells, phantom volumes and ejection fractions have closed forms.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import (
    GeometryError,
    LvFrame,
    LvSequence,
    TriSurface,
    aha_parcellate,
    cavity_volume,
    half_ellipsoid,
    volume_curve,
)

COVARIATES = ("age", "bmi", "bfp", "bmr", "smoking", "alcohol", "hypertension")
CATEGORICAL = ("smoking", "alcohol", "hypertension")
CONTINUOUS = ("age", "bmi", "bfp", "bmr")
MOTION_PARAMETERS = ("contraction", "shortening", "twist", "defect")

# population mean/sd or prevalence used to draw covariates
COVARIATE_DISTRIBUTIONS = {
    "age": (61.0, 8.0),
    "bmi": (26.4, 4.2),
    "bfp": (28.2, 7.7),
    "bmr": (6650.1, 1324.9),
    "smoking": 0.382,
    "alcohol": 0.489,
    "hypertension": 0.484,
}


@dataclass
class CovariateRecord:
    age: float = 61.0
    bmi: float = 26.4
    bfp: float = 28.2
    bmr: float = 6650.1
    smoking: int = 0
    alcohol: int = 0
    hypertension: int = 0

    def __post_init__(self):
        for name in CONTINUOUS:
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        for name in CATEGORICAL:
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1")

    def standardized(self, name):
        value = getattr(self, name)
        if name in CATEGORICAL:
            return float(value)
        mean, sd = COVARIATE_DISTRIBUTIONS[name]
        return (value - mean) / sd


class CovariateTable:
    """Per-subject covariates aligned with an embedding's columns."""

    def __init__(self, subject_ids, records):
        if len(subject_ids) != len(records):
            raise ValueError("subject ids and records differ in length")
        self.subject_ids = [str(s) for s in subject_ids]
        self.records = list(records)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def subset(self, subject_ids):
        pos = {s: i for i, s in enumerate(self.subject_ids)}
        missing = [s for s in subject_ids if s not in pos]
        if missing:
            raise KeyError(f"subjects missing from covariate table: {missing[:5]}")
        return CovariateTable(subject_ids, [self.records[pos[s]] for s in subject_ids])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("subject_id",) + COVARIATES)
            for sid, r in zip(self.subject_ids, self.records):
                w.writerow([sid] + [_fmt(getattr(r, c)) for c in COVARIATES])

    @classmethod
    def from_csv(cls, path):
        ids, records = [], []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != ("subject_id",) + COVARIATES:
                raise ValueError(f"{path}: unexpected header {header}")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise ValueError(f"{path}:{lineno}: expected {len(header)} fields")
                try:
                    vals = {c: float(x) for c, x in zip(COVARIATES, row[1:])}
                    for c in CATEGORICAL:
                        vals[c] = int(vals[c])
                    records.append(CovariateRecord(**vals))
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
                ids.append(row[0])
        return cls(ids, records)


def _fmt(x):
    return str(int(x)) if isinstance(x, (int, np.integer)) else repr(float(x))


@dataclass
class SubjectSpec:
    """Phantom parameters for one subject.

    ``contraction`` is the fractional radial shortening of the endocardium at
    end-systole, ``shortening`` the fractional longitudinal shortening and
    ``twist`` the apical rotation in degrees (the base does not rotate).
    """

    seed: int = 0
    subject_id: str = "subject"
    radius: float = 25.0
    height: float = 60.0
    wall: float = 8.0
    contraction: float = 0.32
    shortening: float = 0.12
    twist: float = 10.0
    defect_segments: tuple = ()
    defect_multiplier: float = 1.0
    defect_preserves_ef: bool = True
    epi_fraction: float = 0.45
    n_frames: int = 20
    frame_interval: float = 40.0
    n_rings: int = 24
    n_sectors: int = 48
    es_fraction: float = 0.35
    inflow_fraction: float = 0.15
    atrial_fraction: float = 0.2
    diastasis_level: float = 0.3
    pose: bool = False
    position_noise: float = 0.0
    covariates: CovariateRecord = field(default_factory=CovariateRecord)

    def validate(self):
        if min(self.radius, self.height, self.wall) <= 0:
            raise GeometryError("semi-axes and wall thickness must be positive")
        for name in ("contraction", "shortening"):
            if not 0 <= getattr(self, name) < 1:
                raise GeometryError(f"{name} must lie in [0, 1)")
        if self.n_frames < 4:
            raise GeometryError("need at least 4 frames")
        if self.defect_multiplier < 0:
            raise GeometryError("defect multiplier must be non-negative")


def motion_profile(n_frames, es_fraction=0.35, inflow_fraction=0.15,
                   atrial_fraction=0.2, diastasis_level=0.3):
    """Normalised contraction state per frame: 0 at ED, 1 at ES.

    Systole is a half-cosine descent; diastole is a half-cosine rapid inflow
    down to ``diastasis_level``, a flat diastasis and a half-cosine atrial
    kick back to 0 at the end of the cycle.
    """
    T = n_frames
    t_es = max(1, int(round(es_fraction * T)))
    t_ri = t_es + max(1, int(round(inflow_fraction * T)))
    t_as = T - max(1, int(round(atrial_fraction * T)))
    if not t_es < t_ri <= t_as < T:
        raise GeometryError("phase fractions do not fit in the cycle")
    t = np.arange(T, dtype=float)
    f = np.empty(T)
    s = t <= t_es
    f[s] = 0.5 * (1 - np.cos(np.pi * t[s] / t_es))
    r = (t > t_es) & (t <= t_ri)
    lvl = diastasis_level
    f[r] = lvl + (1 - lvl) * 0.5 * (1 + np.cos(np.pi * (t[r] - t_es) / (t_ri - t_es)))
    f[(t > t_ri) & (t < t_as)] = lvl
    a = t >= t_as
    f[a] = lvl * 0.5 * (1 + np.cos(np.pi * (t[a] - t_as) / (T - t_as)))
    return f


def analytic_ef(spec):
    """Closed-form EF (%) of the phantom cavity without regional defect."""
    return 100.0 * (1 - (1 - spec.contraction) ** 2 * (1 - spec.shortening))


def _smooth_indicator(points, member, sigma):
    if not member.any():
        return np.zeros(len(points))
    d2 = ((points[:, None, :] - points[None, member, :]) ** 2).sum(-1)
    near = np.exp(-0.5 * d2 / sigma**2).sum(1)
    d2all = ((points[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    return near / np.exp(-0.5 * d2all / sigma**2).sum(1)


class _Phantom:
    """Shell geometry and per-vertex motion amplitudes for one spec."""

    def __init__(self, spec):
        spec.validate()
        self.spec = spec
        self.endo0 = half_ellipsoid(spec.radius, spec.height, spec.n_rings, spec.n_sectors)
        epi = half_ellipsoid(spec.radius + spec.wall, spec.height + spec.wall,
                             spec.n_rings, spec.n_sectors)
        self.epi0 = epi
        self.weight = np.zeros(self.endo0.n_vertices)
        if spec.defect_segments and spec.defect_multiplier != 1.0:
            labels = aha_parcellate(self.endo0, [0, 0, 1], [0, 0, -spec.height],
                                    [1, 0, 0], base_height=spec.height).labels
            member = np.isin(labels, spec.defect_segments)
            self.weight = _smooth_indicator(self.endo0.vertices, member, 0.2 * spec.radius)
        self.gain = 1.0
        if spec.defect_preserves_ef and self.weight.any():
            self.gain = self._matching_gain()

    def amplitude(self, gain=None):
        g = self.gain if gain is None else gain
        s = self.spec
        return g * s.contraction * (1 + (s.defect_multiplier - 1) * self.weight)

    def shells(self, f, gain=None, twist=True):
        s = self.spec
        amp = self.amplitude(gain)
        if np.any(amp * f >= 1):
            raise GeometryError("contraction would produce a negative radius")
        out = []
        for surf, k in ((self.endo0, 1.0), (self.epi0, s.epi_fraction)):
            v = surf.vertices.copy()
            radial = 1 - k * amp * f
            v[:, :2] *= radial[:, None]
            v[:, 2] *= 1 - s.shortening * f
            if twist and s.twist:
                depth = np.clip(-surf.vertices[:, 2] / s.height, 0, None)
                ang = np.deg2rad(s.twist) * f * depth
                c, sn = np.cos(ang), np.sin(ang)
                x, y = v[:, 0].copy(), v[:, 1].copy()
                v[:, 0], v[:, 1] = c * x - sn * y, sn * x + c * y
            out.append(v)
        return out

    def _volume_ratio(self, gain):
        endo_es, _ = self.shells(1.0, gain, twist=False)
        v_es = cavity_volume(TriSurface(endo_es, self.endo0.faces))
        return v_es / cavity_volume(self.endo0)

    def _matching_gain(self):
        """Gain restoring the defect-free ES volume.

        x and y scale linearly in the gain while z does not, so the
        polyhedral cavity volume (cap centroid included) is an exact
        quadratic in the gain; three evaluations determine it.
        """
        s = self.spec
        target = (1 - s.contraction) ** 2 * (1 - s.shortening)
        hi = 0.999 / max(self.amplitude(1.0).max(), 1e-12)
        g = np.array([0.0, 0.5 * hi, hi])
        coef = np.polyfit(g, [self._volume_ratio(x) for x in g], 2)
        coef[-1] -= target
        roots = np.roots(coef)
        ok = [r.real for r in roots if abs(r.imag) < 1e-12 and 0 <= r.real <= hi]
        return min(ok) if ok else hi


def random_pose(rng):
    rot = Rotation.random(random_state=rng).as_matrix()
    shift = rng.normal(0.0, 10.0, 3)
    return rot, shift


def synth_subject(spec):
    """Deterministic phantom sequence; frame 0 is end-diastole."""
    ph = _Phantom(spec)
    rng = np.random.default_rng(spec.seed)
    f = motion_profile(spec.n_frames, spec.es_fraction, spec.inflow_fraction,
                       spec.atrial_fraction, spec.diastasis_level)
    rot, shift = random_pose(rng) if spec.pose else (np.eye(3), np.zeros(3))
    normal = rot @ np.array([0.0, 0.0, 1.0])
    frames = []
    for ft in f:
        endo, epi = ph.shells(ft)
        if spec.position_noise:
            endo = endo + rng.normal(0, spec.position_noise, endo.shape)
            epi = epi + rng.normal(0, spec.position_noise, epi.shape)
        frames.append(LvFrame(
            TriSurface(endo @ rot.T + shift, ph.endo0.faces),
            TriSurface(epi @ rot.T + shift, ph.epi0.faces),
            shift.copy(), normal.copy()))
    # first vertex of the basal ring, at azimuth zero
    rv = 1 + (spec.n_rings - 1) * spec.n_sectors
    return LvSequence(frames, spec.frame_interval, spec.subject_id, rv_landmark=rv)


@dataclass
class CohortConfig:
    """Cohort size, frame count and covariate-to-motion wiring.

    ``effects`` maps a covariate name to ``(motion_parameter, effect_size)``.
    Effects are relative: a parameter ``p`` becomes ``p * (1 + e * z)`` where
    ``z`` is the indicator for binary covariates and the standardized value
    for continuous ones. For ``defect`` the multiplier in
    ``defect_segments`` becomes ``1 + e * z``.
    """

    n_subjects: int = 300
    n_frames: int = 20
    seed: int = 0
    effects: dict = field(default_factory=lambda: {
        "hypertension": ("contraction", -0.15),
        "bfp": ("shortening", -0.12),
        "bmr": ("twist", 0.25),
        "smoking": ("defect", -0.4),
        "alcohol": ("twist", -0.2),
    })
    noise: float = 0.05
    shape_noise: float = 0.06
    defect_segments: tuple = (2, 3, 8, 9, 14)
    pose: bool = True
    n_rings: int = 12
    n_sectors: int = 24
    artifact_fraction: float = 0.0
    base: SubjectSpec = field(default_factory=SubjectSpec)

    def validate(self):
        if self.n_subjects < 2:
            raise ValueError("need at least 2 subjects")
        if self.n_frames < 4:
            raise ValueError("need at least 4 frames")
        for cov, (param, _) in self.effects.items():
            if cov not in COVARIATES:
                raise ValueError(f"unknown covariate {cov!r}")
            if param not in MOTION_PARAMETERS:
                raise ValueError(f"unknown motion parameter {param!r}")
        if not 0 <= self.artifact_fraction <= 1:
            raise ValueError("artifact_fraction must lie in [0, 1]")


def draw_covariates(rng):
    vals = {}
    for name in COVARIATES:
        dist = COVARIATE_DISTRIBUTIONS[name]
        if name in CATEGORICAL:
            vals[name] = int(rng.random() < dist)
        else:
            vals[name] = float(rng.normal(*dist))
    return CovariateRecord(**vals)


def subject_specs(config):
    """Per-subject phantom specs with covariate effects applied."""
    config.validate()
    root = np.random.SeedSequence(config.seed)
    specs = []
    for n, child in enumerate(root.spawn(config.n_subjects)):
        rng = np.random.default_rng(child)
        cov = draw_covariates(rng)
        base = config.base
        params = {
            "contraction": base.contraction,
            "shortening": base.shortening,
            "twist": base.twist,
            "defect": 1.0,
        }
        for cov_name, (param, size) in config.effects.items():
            params[param] *= 1 + size * cov.standardized(cov_name)
        noise = rng.normal(0, config.noise, 3)
        shape = rng.normal(0, config.shape_noise, 3)
        specs.append(dataclasses.replace(
            base,
            seed=int(child.generate_state(1)[0]),
            subject_id=f"S{n:04d}",
            radius=base.radius * (1 + shape[0]),
            height=base.height * (1 + shape[1]),
            wall=base.wall * (1 + shape[2]),
            contraction=float(np.clip(params["contraction"] * (1 + noise[0]), 0, 0.9)),
            shortening=float(np.clip(params["shortening"] * (1 + noise[1]), 0, 0.9)),
            twist=float(params["twist"] * (1 + noise[2])),
            defect_segments=tuple(config.defect_segments),
            defect_multiplier=float(max(params["defect"], 0.0)),
            n_frames=config.n_frames,
            n_rings=config.n_rings,
            n_sectors=config.n_sectors,
            pose=config.pose,
            covariates=cov,
        ))
    return specs


SURGE_FLOOR = 0.45
SURGE_GAP = 0.3
ARTIFACT_KINDS = ("double_systolic_peak", "bumpy_inflow", "unstable_diastasis",
                  "extra_atrial_peak", "none")


def synth_cohort(config, n_jobs=1):
    """Generate sequences and the covariate table.

    When ``artifact_fraction`` is positive, that share of subjects (chosen
    with the cohort seed) receives one artifact, cycling through the kinds.
    Returns ``(sequences, covariates, artifacts)`` where ``artifacts`` maps
    subject id to the injected kind.
    """
    specs = subject_specs(config)
    if n_jobs == 1:
        seqs = [synth_subject(s) for s in specs]
    else:
        from joblib import Parallel, delayed
        seqs = Parallel(n_jobs=n_jobs)(delayed(synth_subject)(s) for s in specs)
    artifacts = {}
    n_bad = int(round(config.artifact_fraction * config.n_subjects))
    if n_bad:
        rng = np.random.default_rng([config.seed, 7])
        chosen = np.sort(rng.choice(config.n_subjects, n_bad, replace=False))
        for j, i in enumerate(chosen):
            kind = ARTIFACT_KINDS[j % 4]
            seqs[i] = inject_artifact(seqs[i], kind)
            artifacts[seqs[i].subject_id] = kind
    table = CovariateTable([s.subject_id for s in specs], [s.covariates for s in specs])
    return seqs, table, artifacts


def cohort_summary(table):
    """Mean/SD of continuous covariates and counts/percentages of binary ones."""
    out = {"n": len(table)}
    for name in CONTINUOUS:
        col = table.column(name)
        out[name] = {"mean": float(col.mean()), "sd": float(col.std(ddof=1))}
    for name in CATEGORICAL:
        col = table.column(name)
        out[name] = {"count": int(col.sum()), "percent": float(100 * col.mean())}
    return out


def _artifact_curve(v, kind, magnitude, thresholds=None):
    """Target volume curve violating exactly one QC rule."""
    from .qc import QcThresholds, detect_ed_es, segment_diastole

    th = thresholds or QcThresholds.for_frames(len(v))
    v = np.asarray(v, float)
    T = len(v)
    ed, es = detect_ed_es(v)
    ved, ves = v[ed], v[es]
    out = v.copy()
    if kind == "none" or magnitude == 0:
        return out
    t_sys = (es - ed) % T
    t_dia = (ed - es) % T
    ph = segment_diastole(v, es, ed, th)
    if kind == "double_systolic_peak":
        # two-step descent with a stalled mid-stroke
        k = np.arange(t_sys + 1) / t_sys
        step = 0.5 * (_ramp(k, 0.0, 0.4) + _ramp(k, 0.6, 1.0))
        out[(ed + np.arange(t_sys + 1)) % T] = ved - (ved - ves) * step
    elif kind == "bumpy_inflow":
        # rapid inflow in two surges; the pause stays above the phase threshold
        span = max(ph.rapid_inflow[1] - es + 2, 2 * th.window + 2)
        stop = min(es + span, ph.atrial_systole[0] - 2)
        idx = np.arange(es, stop + 1)
        k = (idx - es) / (stop - es)
        level = v[stop % T]
        out[idx % T] = ves + (level - ves) * _two_surges(k)
    elif kind == "unstable_diastasis":
        # volume sags through diastasis; atrial systole makes up the loss
        a, b = ph.diastasis
        if b - a < 2:
            raise GeometryError("curve has no diastasis to disturb")
        idx = np.arange(a, b)
        k = (idx - a) / (b - 1 - a)
        out[idx % T] = v[a % T] * (1 - magnitude * _ramp(k, 0.0, 1.0))
        lo_old, lo_new = v[(b - 1) % T], out[(b - 1) % T]
        idx = np.arange(b, es + t_dia)
        out[idx % T] = lo_new + (v[idx % T] - lo_old) * (ved - lo_new) / (ved - lo_old)
    elif kind == "extra_atrial_peak":
        # brisk inflow to a lower plateau, then two atrial kicks whose pause
        # stays above the phase threshold
        end = es + t_dia
        fill_end = es + max(2, int(round(0.15 * T)))
        span = max(end - ph.atrial_systole[0] + 2, 2 * th.window + 1)
        start = max(fill_end + 2, end - span)
        if end - start < 2 * th.window:
            raise GeometryError("diastole too short for two atrial kicks")
        plateau = ves + 0.4 * (ved - ves)
        inflow = np.arange(es, fill_end + 1)
        out[inflow % T] = ves + (plateau - ves) * _ramp((inflow - es) / (fill_end - es), 0.0, 1.0)
        out[np.arange(fill_end, start) % T] = plateau
        idx = np.arange(start, end + 1)
        k = (idx - start) / (end - start)
        out[idx % T] = plateau + (ved - plateau) * _two_surges(k)
    else:
        raise ValueError(f"unknown artifact kind {kind!r}")
    return out


def _two_surges(k, floor=SURGE_FLOOR, gap=SURGE_GAP):
    # a steady baseline keeps the rate above zero between the surges
    w = 0.5 * (1 - gap)
    return floor * k + 0.5 * (1 - floor) * (_ramp(k, 0.0, w) + _ramp(k, 1 - w, 1.0))


def _ramp(k, a, b):
    x = np.clip((k - a) / (b - a), 0, 1)
    return 0.5 * (1 - np.cos(np.pi * x))


def inject_artifact(seq, kind, magnitude=None):
    """Corrupt a sequence so its volume curve breaks one QC rule.

    Each frame is rescaled isotropically about the basal-plane point so the
    cavity volume follows the corrupted target curve; the basal opening stays
    on its plane.
    """
    if kind not in ARTIFACT_KINDS:
        raise ValueError(f"unknown artifact kind {kind!r}")
    if magnitude is None:
        magnitude = 0.12 if kind == "unstable_diastasis" else 1.0
    curve = volume_curve(seq).volumes
    target = _artifact_curve(curve, kind, magnitude)
    frames = []
    for fr, v0, v1 in zip(seq.frames, curve, target):
        scale = (v1 / v0) ** (1 / 3)
        c = fr.basal_point if fr.basal_point is not None else fr.endo.vertices.mean(0)
        frames.append(LvFrame(
            fr.endo.transformed(lambda x: c + scale * (x - c)),
            fr.epi.transformed(lambda x: c + scale * (x - c)),
            fr.basal_point, fr.basal_normal))
    return LvSequence(frames, seq.frame_interval, seq.subject_id, seq.rv_landmark)
