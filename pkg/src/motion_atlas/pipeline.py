"""Config-driven pipeline: synth -> qc -> atlas -> features -> embed -> associate.

Every stage reads and writes documented files in the output directory, so
any stage can be fed external data. A stage whose configuration and input
files are unchanged since the last run is skipped (the manifest stores a
key per stage and checksums of its outputs).
"""
from __future__ import annotations

import configparser
import hashlib
import json
import logging
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .atlas.build import AtlasParams, build_atlas, local_displacements
from .cohort import CohortConfig, CovariateTable, cohort_summary, synth_cohort
from .embed import Embedding, LleConfig, SdaConfig, build_features, grid_search_d, pca_fit
from .geometry import GeometryError, ejection_fraction, volume_curve
from .io import (read_atlas, read_curves, read_features, read_jsonl, read_local, read_sequence,
                 write_atlas, write_curves, write_features, write_jsonl, write_local,
                 write_sequence)
from .qc import QcThresholds, qc_volume_curve
from .stats import associate_all, report_json, report_text

log = logging.getLogger("motion_atlas")

STAGES = ("synth", "qc", "atlas", "features", "embed", "associate")
MANIFEST = "manifest.json"

# canonical file names inside the output directory
FILES = {
    "meshes": "meshes",
    "covariates": "covariates.csv",
    "curves": "curves.jsonl",
    "cohort": "cohort_summary.json",
    "artifacts": "artifacts.json",
    "qc": "qc.jsonl",
    "atlas": "atlas.atlas",
    "local": "local.npz",
    "features": "features.csv",
    "association": "association.json",
    "association_text": "association.txt",
    "summary": "summary.txt",
}


def embedding_file(method):
    return f"embedding_{method}.json"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause, subject=None):
        self.stage, self.cause, self.subject = stage, cause, subject
        who = f" (subject {subject})" if subject else ""
        super().__init__(f"stage {stage} failed{who}: {cause}")


class QcRejectedAll(RuntimeError):
    pass


# configuration

_EFFECTS = "hypertension:contraction:-0.15, bfp:shortening:-0.12, bmr:twist:0.25, " \
           "smoking:defect:-0.4, alcohol:twist:-0.2"

DEFAULTS = {
    "seed": 0,
    "cohort.n_subjects": 300,
    "cohort.n_frames": 20,
    "cohort.noise": 0.05,
    "cohort.shape_noise": 0.06,
    "cohort.effects": _EFFECTS,
    "cohort.defect_segments": "2, 3, 8, 9, 14",
    "cohort.pose": True,
    "cohort.n_rings": 12,
    "cohort.n_sectors": 24,
    "cohort.artifact_fraction": 0.0,
    "qc.enabled": True,
    "qc.prominence": 0.05,
    "qc.inflow_fraction": 0.20,
    "qc.diastasis_limit": 0.10,
    "qc.window": 0,
    "atlas.target_vertices": 1000,
    "atlas.tps_lambda": 0.0,
    "atlas.gpa_tol": 1e-8,
    "atlas.ffd_spacing": 20.0,
    "atlas.temporal_spacing": 1.0,
    "atlas.tracking": "ffd",
    "embed.methods": "pca, lle, sda",
    "embed.standardize": True,
    "embed.pca_variance": 0.99,
    "embed.lle_neighbors": 10,
    "embed.lle_reg": 1e-3,
    "embed.lle_s_sweep": "",
    "embed.d_min": 2,
    "embed.d_max": 256,
    "embed.sda_learning_rate": 0.005,
    "embed.sda_corruption": 0.5,
    "embed.sda_pretrain_epochs": 30,
    "embed.sda_finetune_epochs": 30,
    "embed.sda_batch_size": 32,
    "stats.alpha": 0.05,
    "stats.m": 7,
}

# (low, high) inclusive bounds for numeric keys
RANGES = {
    "cohort.n_subjects": (2, 10**6), "cohort.n_frames": (4, 10**4),
    "cohort.noise": (0, 1), "cohort.shape_noise": (0, 0.5),
    "cohort.n_rings": (3, 500), "cohort.n_sectors": (6, 1000),
    "cohort.artifact_fraction": (0, 1),
    "qc.prominence": (0, 1), "qc.inflow_fraction": (0, 1), "qc.diastasis_limit": (0, 1),
    "qc.window": (0, 1001),
    "atlas.target_vertices": (4, 10**6), "atlas.tps_lambda": (0, 1e12),
    "atlas.gpa_tol": (1e-15, 1), "atlas.ffd_spacing": (1e-3, 1e6),
    "atlas.temporal_spacing": (1e-3, 1e6),
    "embed.pca_variance": (1e-6, 1), "embed.lle_neighbors": (1, 10**6),
    "embed.lle_reg": (0, 1e6), "embed.d_min": (1, 10**6), "embed.d_max": (1, 10**6),
    "embed.sda_learning_rate": (1e-12, 10), "embed.sda_corruption": (0, 0.999999),
    "embed.sda_pretrain_epochs": (0, 10**7), "embed.sda_finetune_epochs": (0, 10**7),
    "embed.sda_batch_size": (1, 10**7),
    "stats.alpha": (1e-12, 1), "stats.m": (1, 10**6),
}

CHOICES = {"atlas.tracking": ("ffd", "direct")}


def _coerce(key, raw):
    kind = type(DEFAULTS[key])
    text = str(raw).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return text


@dataclass
class PipelineConfig:
    """Flat ``section.key`` settings; see ``DEFAULTS`` for every key."""

    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    output: str = "run"

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_text(cls, text, source="<config>"):
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       comment_prefixes=("#",), inline_comment_prefixes=("#",))
        cp.optionxform = str
        try:
            cp.read_string("[pipeline]\n" + text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        cfg = cls()
        for key, raw in cp["pipeline"].items():
            cfg.set(key, raw)
        return cfg.validate()

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                return cls.from_text(fh.read(), str(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None

    def set(self, key, raw):
        key = key.strip()
        if key == "output":
            self.output = str(raw).strip()
            return self
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, raw)
        return self

    def override(self, assignments):
        for item in assignments or ():
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            self.set(k, v)
        return self.validate()

    def validate(self):
        for key, (lo, hi) in RANGES.items():
            v = self.values[key]
            if not lo <= v <= hi:
                raise ConfigError(f"{key}={v} outside [{lo}, {hi}]")
        for key, options in CHOICES.items():
            if self.values[key] not in options:
                raise ConfigError(f"{key} must be one of {options}")
        if self["embed.d_min"] > self["embed.d_max"]:
            raise ConfigError("embed.d_min exceeds embed.d_max")
        bad = [m for m in self.methods() if m not in ("pca", "lle", "sda")]
        if bad:
            raise ConfigError(f"unknown embedding methods {bad}")
        self.cohort()
        return self

    def to_text(self):
        lines = [f"{k} = {_fmt(v)}" for k, v in self.values.items()]
        return "\n".join(lines + [f"output = {self.output}"]) + "\n"

    def section(self, name):
        return {k: v for k, v in self.values.items() if k == "seed" or k.startswith(name + ".")}

    def methods(self):
        return [m.strip() for m in self["embed.methods"].split(",") if m.strip()]

    def cohort(self):
        effects = {}
        for item in self["cohort.effects"].split(","):
            if not item.strip():
                continue
            parts = [p.strip() for p in item.split(":")]
            if len(parts) != 3:
                raise ConfigError(f"cohort.effects entry {item.strip()!r} is not cov:param:size")
            try:
                effects[parts[0]] = (parts[1], float(parts[2]))
            except ValueError:
                raise ConfigError(f"cohort.effects entry {item.strip()!r}: bad size") from None
        try:
            segs = tuple(int(s) for s in self["cohort.defect_segments"].split(",") if s.strip())
        except ValueError:
            raise ConfigError("cohort.defect_segments must be integers") from None
        cc = CohortConfig(n_subjects=self["cohort.n_subjects"], n_frames=self["cohort.n_frames"],
                          seed=self["seed"], effects=effects, noise=self["cohort.noise"],
                          shape_noise=self["cohort.shape_noise"], defect_segments=segs,
                          pose=self["cohort.pose"], n_rings=self["cohort.n_rings"],
                          n_sectors=self["cohort.n_sectors"],
                          artifact_fraction=self["cohort.artifact_fraction"])
        try:
            cc.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cc

    def thresholds(self, n_frames):
        kw = dict(prominence=self["qc.prominence"], inflow_fraction=self["qc.inflow_fraction"],
                  diastasis_limit=self["qc.diastasis_limit"])
        if self["qc.window"]:
            kw["window"] = self["qc.window"]
        return QcThresholds.for_frames(n_frames, **kw)

    def atlas_params(self):
        return AtlasParams(target_vertices=self["atlas.target_vertices"],
                           gpa_tol=self["atlas.gpa_tol"], tps_lambda=self["atlas.tps_lambda"],
                           ffd_spacing=self["atlas.ffd_spacing"],
                           temporal_spacing=self["atlas.temporal_spacing"],
                           tracking=self["atlas.tracking"])

    def sda_config(self):
        return SdaConfig(learning_rate=self["embed.sda_learning_rate"],
                         corruption=self["embed.sda_corruption"],
                         pretrain_epochs=self["embed.sda_pretrain_epochs"],
                         finetune_epochs=self["embed.sda_finetune_epochs"],
                         batch_size=self["embed.sda_batch_size"], seed=self["seed"])


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


# manifest

def sha256(path):
    h = hashlib.sha256()
    if os.path.isdir(path):
        for name in sorted(os.listdir(path)):
            h.update(name.encode())
            h.update(sha256(os.path.join(path, name)).encode())
        return h.hexdigest()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Per-stage cache keys, file checksums, timings and QC counts."""

    stages: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    qc: dict = field(default_factory=dict)
    embeddings: dict = field(default_factory=dict)
    config: str = ""

    def to_json(self):
        return json.dumps({"stages": self.stages, "versions": self.versions, "qc": self.qc,
                           "embeddings": self.embeddings, "config": self.config},
                          indent=1, sort_keys=True) + "\n"

    def save(self, directory):
        with open(os.path.join(directory, MANIFEST), "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, directory):
        path = directory if directory.endswith(".json") else os.path.join(directory, MANIFEST)
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{exc.lineno}: {exc.msg}") from None
        return cls(doc.get("stages", {}), doc.get("versions", {}), doc.get("qc", {}),
                   doc.get("embeddings", {}), doc.get("config", ""))

    def hit(self, stage, key, out):
        rec = self.stages.get(stage)
        if not rec or rec.get("key") != key:
            return False
        for rel, digest in rec.get("outputs", {}).items():
            p = os.path.join(out, rel)
            if not os.path.exists(p) or sha256(p) != digest:
                return False
        return True

    def record(self, stage, key, out, inputs, outputs, seconds):
        self.stages[stage] = {
            "key": key, "seconds": round(seconds, 3),
            "inputs": {os.path.relpath(p, out): sha256(p) for p in inputs},
            "outputs": {rel: sha256(os.path.join(out, rel)) for rel in outputs},
        }


def versions():
    import scipy
    import sklearn

    return {"motion_atlas": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__, "python": platform.python_version()}


# stages; each returns the list of output paths relative to ``out``

def _p(out, name):
    return os.path.join(out, FILES[name])


def stage_synth(cfg, out, n_jobs=1):
    seqs, table, artifacts = synth_cohort(cfg.cohort(), n_jobs)
    mesh_dir = _p(out, "meshes")
    os.makedirs(mesh_dir, exist_ok=True)
    for name in os.listdir(mesh_dir):
        if name.endswith(".lvseq"):
            os.remove(os.path.join(mesh_dir, name))
    curves = []
    for s in seqs:
        write_sequence(s, os.path.join(mesh_dir, f"{s.subject_id}.lvseq"))
        try:
            curves.append(volume_curve(s))
        except GeometryError as exc:
            raise StageError("synth", exc, s.subject_id) from exc
    table.to_csv(_p(out, "covariates"))
    write_curves(curves, _p(out, "curves"))
    with open(_p(out, "cohort"), "w") as fh:
        json.dump(cohort_summary(table), fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(_p(out, "artifacts"), "w") as fh:
        json.dump(artifacts, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return ["meshes", FILES["covariates"], FILES["curves"], FILES["cohort"], FILES["artifacts"]]


def run_qc(cfg, curves):
    """QC records (dicts) with EF attached; QC disabled passes everything."""
    out = []
    for c in curves:
        if cfg["qc.enabled"]:
            rec = qc_volume_curve(c, cfg.thresholds(len(c))).to_dict()
        else:
            rec = {"subject_id": c.subject_id, "pass": True, "reasons": []}
        rec["ef"] = ejection_fraction(c)
        out.append(rec)
    return out


def stage_qc(cfg, out, curves_path=None):
    curves = read_curves(curves_path or _p(out, "curves"))
    write_jsonl(run_qc(cfg, curves), _p(out, "qc"))
    return [FILES["qc"]]


def _local_job(atlas, sim, seq, params):
    try:
        return local_displacements(atlas, sim, seq, params).values
    except Exception as exc:  # noqa: BLE001 - reported with the subject id
        return StageError("atlas", f"{type(exc).__name__}: {exc}", seq.subject_id)


def kept_subjects(qc_records):
    return [r["subject_id"] for r in qc_records if r["pass"]]


def stage_atlas(cfg, out, meshes_dir=None, qc_path=None, n_jobs=1):
    meshes_dir = meshes_dir or _p(out, "meshes")
    qc_path = qc_path or _p(out, "qc")
    keep = kept_subjects(read_jsonl(qc_path)) if os.path.exists(qc_path) else None
    names = sorted(n for n in os.listdir(meshes_dir) if n.endswith(".lvseq"))
    seqs = []
    for n in names:
        if keep is not None and n[: -len(".lvseq")] not in keep:
            continue
        seqs.append(read_sequence(os.path.join(meshes_dir, n)))
    if keep is not None:
        order = {s: i for i, s in enumerate(keep)}
        seqs.sort(key=lambda s: order.get(s.subject_id, len(order)))
    if not seqs:
        raise QcRejectedAll("no subjects left for atlas formation")
    params = cfg.atlas_params()
    try:
        atlas, sims = build_atlas(seqs, params)
    except Exception as exc:  # noqa: BLE001
        raise StageError("atlas", f"{type(exc).__name__}: {exc}") from exc
    if n_jobs == 1:
        res = [_local_job(atlas, t, s, params) for s, t in zip(seqs, sims)]
    else:
        from joblib import Parallel, delayed
        res = Parallel(n_jobs=n_jobs)(delayed(_local_job)(atlas, t, s, params)
                                      for s, t in zip(seqs, sims))
    for r in res:
        if isinstance(r, StageError):
            raise r
    write_atlas(atlas, _p(out, "atlas"))
    write_local(_p(out, "local"), np.stack(res), [s.subject_id for s in seqs])
    return [FILES["atlas"], FILES["local"]]


def stage_features(cfg, out, atlas_path=None, local_path=None):
    atlas = read_atlas(atlas_path or _p(out, "atlas"))
    values, ids = read_local(local_path or _p(out, "local"))
    try:
        fm = build_features(values, atlas.labels, subject_ids=ids)
    except (GeometryError, ValueError) as exc:
        raise StageError("features", exc) from exc
    write_features(fm, _p(out, "features"))
    return [FILES["features"]]


def fit_embedding(cfg, method, fm, n_jobs=1):
    std = cfg["embed.standardize"]
    if method == "pca":
        emb = pca_fit(fm, cfg["embed.pca_variance"], standardize_rows=std)
    elif method == "lle":
        sweep = [int(s) for s in cfg["embed.lle_s_sweep"].split(",") if s.strip()] or None
        conf = LleConfig(cfg["embed.lle_neighbors"], 2, cfg["embed.lle_reg"])
        emb, _ = grid_search_d("lle", fm, conf, cfg["embed.d_min"], cfg["embed.d_max"], std,
                               n_jobs, sweep)
    else:
        emb, _ = grid_search_d("sda", fm, cfg.sda_config(), cfg["embed.d_min"],
                               cfg["embed.d_max"], std, n_jobs)
    emb.notes.append("features standardized per row; error reported in mm" if std
                     else "features not standardized; error reported in mm")
    return emb


def stage_embed(cfg, out, features_path=None, n_jobs=1, methods=None):
    fm = read_features(features_path or _p(out, "features"))
    written = []
    for method in methods or cfg.methods():
        try:
            emb = fit_embedding(cfg, method, fm, n_jobs)
        except Exception as exc:  # noqa: BLE001
            raise StageError("embed", f"{method}: {type(exc).__name__}: {exc}") from exc
        emb.save(os.path.join(out, embedding_file(method)))
        written.append(embedding_file(method))
    return written


def load_ef(curves_path, qc_path=None):
    """EF per subject id, from the QC records when present, else from curves."""
    if qc_path and os.path.exists(qc_path):
        return {r["subject_id"]: r["ef"] for r in read_jsonl(qc_path) if "ef" in r}
    return {c.subject_id: ejection_fraction(c) for c in read_curves(curves_path)}


def stage_associate(cfg, out, embedding_paths=None, covariates_path=None, curves_path=None,
                    qc_path=None):
    if embedding_paths is None:
        embedding_paths = [os.path.join(out, embedding_file(m)) for m in cfg.methods()]
    embs = {}
    for path in embedding_paths:
        e = Embedding.load(path)
        embs[e.method] = e
    if not embs:
        raise StageError("associate", "no embeddings")
    table = CovariateTable.from_csv(covariates_path or _p(out, "covariates"))
    ids = next(iter(embs.values())).subject_ids or table.subject_ids
    table = table.subset(ids)
    curves_path = curves_path or _p(out, "curves")
    qc_path = qc_path if qc_path is not None else _p(out, "qc")
    ef = None
    if os.path.exists(curves_path) or os.path.exists(qc_path):
        by_id = load_ef(curves_path, qc_path)
        ef = np.array([by_id[s] for s in ids])
    results = associate_all(embs, ef, table, m=cfg["stats.m"], alpha=cfg["stats.alpha"])
    meta = {"n_subjects": len(ids), "alpha": cfg["stats.alpha"], "m": cfg["stats.m"],
            "standardized": cfg["embed.standardize"],
            "d": {k: e.d for k, e in embs.items()},
            "epsilon_mm": {k: e.epsilon for k, e in embs.items()}}
    with open(_p(out, "association"), "w") as fh:
        fh.write(report_json(results, meta))
    header = [f"subjects: {len(ids)}", f"bonferroni m={cfg['stats.m']}, alpha={cfg['stats.alpha']}"]
    header += [f"{k}: d={e.d}, epsilon={e.epsilon:.4f} mm" for k, e in embs.items()]
    with open(_p(out, "association_text"), "w") as fh:
        fh.write(report_text(results, header))
    return [FILES["association"], FILES["association_text"]]


def summary_text(out, manifest):
    """Cohort table, QC counts, error curves and the association table."""
    lines = ["motion atlas run summary", ""]
    cpath = _p(out, "cohort")
    if os.path.exists(cpath):
        with open(cpath) as fh:
            coh = json.load(fh)
        lines.append(f"cohort: n={coh['n']}")
        for k, v in coh.items():
            if k == "n":
                continue
            if isinstance(v, dict) and "mean" in v:
                lines.append(f"  {k}: {v['mean']:.2f} ({v['sd']:.2f})")
            elif isinstance(v, dict):
                lines.append(f"  {k}: {v['count']} ({v['percent']:.1f}%)")
    q = manifest.qc
    if q:
        lines.append(f"qc: {q['excluded']} of {q['total']} excluded")
        for reason, n in sorted(q.get("reasons", {}).items()):
            lines.append(f"  {reason}: {n}")
    for method, info in sorted(manifest.embeddings.items()):
        lines.append(f"{method}: d={info['d']}, epsilon={info['epsilon_mm']:.4f} mm")
        for d, e in info.get("curve", []):
            lines.append(f"  d={d:<4d} epsilon={e:.4f}")
        for note in info.get("notes", []):
            lines.append(f"  note: {note}")
    apath = _p(out, "association_text")
    if os.path.exists(apath):
        lines.append("")
        with open(apath) as fh:
            lines.append(fh.read().rstrip("\n"))
    return "\n".join(lines) + "\n"


def _stage_key(cfg, stage, inputs):
    sections = {"synth": ["cohort"], "qc": ["qc"], "atlas": ["atlas", "qc"],
                "features": [], "embed": ["embed"], "associate": ["stats", "embed"]}[stage]
    conf = {}
    for s in sections:
        conf.update(cfg.section(s))
    doc = {"stage": stage, "config": conf, "inputs": {os.path.basename(p): sha256(p)
                                                     for p in inputs if os.path.exists(p)}}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def run_pipeline(cfg, n_jobs=1, until=None, only=None, force=False):
    """Run the stages in order (through ``until``, or just ``only``).

    Returns
    -------
    RunManifest
        Also written to ``<output>/manifest.json`` after every stage, so a
        failed run keeps its partial outputs and timings.
    """
    out = cfg.output
    os.makedirs(out, exist_ok=True)
    try:
        manifest = RunManifest.load(out)
    except (OSError, ValueError):
        manifest = RunManifest()
    manifest.versions = versions()
    manifest.config = cfg.to_text()
    stages = STAGES if until is None else STAGES[: STAGES.index(until) + 1]
    if only:
        stages = (only,)
    inputs = {
        "synth": [],
        "qc": [_p(out, "curves")],
        "atlas": [_p(out, "meshes"), _p(out, "qc")],
        "features": [_p(out, "atlas"), _p(out, "local")],
        "embed": [_p(out, "features")],
        "associate": [os.path.join(out, embedding_file(m)) for m in cfg.methods()]
        + [_p(out, "covariates"), _p(out, "qc")],
    }
    run = {
        "synth": lambda: stage_synth(cfg, out, n_jobs),
        "qc": lambda: stage_qc(cfg, out),
        "atlas": lambda: stage_atlas(cfg, out, n_jobs=n_jobs),
        "features": lambda: stage_features(cfg, out),
        "embed": lambda: stage_embed(cfg, out, n_jobs=n_jobs),
        "associate": lambda: stage_associate(cfg, out),
    }
    for stage in stages:
        key = _stage_key(cfg, stage, inputs[stage])
        if not force and manifest.hit(stage, key, out):
            log.info("%s: unchanged, skipped", stage)
            continue
        t0 = time.perf_counter()
        log.info("%s: running", stage)
        try:
            outputs = run[stage]()
        except (StageError, QcRejectedAll):
            manifest.save(out)
            raise
        except Exception as exc:  # noqa: BLE001
            manifest.save(out)
            raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
        manifest.record(stage, key, out, [p for p in inputs[stage] if os.path.exists(p)],
                        outputs, time.perf_counter() - t0)
        log.info("%s: done in %.1f s", stage, time.perf_counter() - t0)
        if stage == "qc":
            manifest.qc = qc_counts(read_jsonl(_p(out, "qc")))
            if manifest.qc["total"] and manifest.qc["excluded"] == manifest.qc["total"]:
                manifest.save(out)
                raise QcRejectedAll(f"QC rejected all {manifest.qc['total']} subjects")
        if stage == "embed":
            manifest.embeddings = {}
            for m in cfg.methods():
                e = Embedding.load(os.path.join(out, embedding_file(m)))
                manifest.embeddings[m] = {"d": e.d, "epsilon_mm": e.epsilon,
                                          "curve": [[int(k), float(v)] for k, v in sorted(e.curve.items())],
                                          "notes": e.notes}
        manifest.save(out)
    if "associate" in stages:
        with open(_p(out, "summary"), "w") as fh:
            fh.write(summary_text(out, manifest))
    manifest.save(out)
    return manifest


def qc_counts(records):
    reasons = {}
    for r in records:
        for x in r.get("reasons", []):
            reasons[x] = reasons.get(x, 0) + 1
    total = len(records)
    kept = sum(1 for r in records if r["pass"])
    return {"total": total, "kept": kept, "excluded": total - kept, "reasons": reasons}


def compare_manifests(dirs):
    """Plain-text comparison of several runs (one column per run)."""
    mans = [RunManifest.load(d) for d in dirs]
    rows = [["run"] + [os.path.basename(os.path.normpath(d)) for d in dirs]]
    rows.append(["subjects"] + [str(m.qc.get("total", "-")) for m in mans])
    rows.append(["qc excluded"] + [str(m.qc.get("excluded", "-")) for m in mans])
    methods = sorted({k for m in mans for k in m.embeddings})
    for k in methods:
        rows.append([f"{k} d"] + [str(m.embeddings.get(k, {}).get("d", "-")) for m in mans])
        rows.append([f"{k} epsilon"] + [
            f"{m.embeddings[k]['epsilon_mm']:.4f}" if k in m.embeddings else "-" for m in mans])
    sig = []
    for d in dirs:
        path = os.path.join(d, FILES["association"])
        if os.path.exists(path):
            with open(path) as fh:
                doc = json.load(fh)
            sig.append(doc)
        else:
            sig.append(None)
    covs = []
    for doc in sig:
        for c in (doc or {}).get("covariates", []):
            if c not in covs:
                covs.append(c)
    for c in covs:
        cells = []
        for doc in sig:
            row = (doc or {}).get("table", {}).get(c)
            if not row:
                cells.append("-")
                continue
            hits = [s for s in doc["sources"] if row.get(s, {}).get("significant")]
            cells.append(",".join(hits) if hits else "none")
        rows.append([f"significant: {c}"] + cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(x.ljust(w) for x, w in zip(r, widths)).rstrip() for r in rows) + "\n"


__all__ = ["PipelineConfig", "RunManifest", "ConfigError", "StageError", "QcRejectedAll",
           "STAGES", "FILES", "DEFAULTS", "run_pipeline", "stage_synth", "stage_qc",
           "stage_atlas", "stage_features", "stage_embed", "stage_associate", "compare_manifests",
           "run_qc", "qc_counts"]
