"""Line-oriented file formats shared by the pipeline stages.

Mesh sequence (``.lvseq``)::

    LVSEQ 1
    subject_id <id>
    frames <T>
    endo_vertices <n_endo>
    epi_vertices <n_epi>
    frame_interval_ms <dt>
    rv_landmark <index>
    frame <t>                       # repeated T times, t = 0..T-1
    basal x y z nx ny nz            # optional basal plane point and normal
    x y z                           # n_endo endocardial vertices
    x y z                           # n_epi epicardial vertices
    endo_faces <m>
    i j k                           # m lines, 0-based
    epi_faces <m>
    i j k
    end

Atlas bundle (``.atlas``)::

    ATLAS 1
    vertices <n>          then n lines "x y z"
    faces <m>             then m lines "i j k"
    long_axis x y z
    axis_point x y z
    n_endo <k>
    rv_landmark <index>
    labels                then n lines, AHA segment 1..17
    basis                 then n lines "rx ry rz cx cy cz lx ly lz"
    weights <nnz> <cols>  then nnz lines "row col value"
    end

Blank lines and ``#`` comments are ignored. Floats are written with
``repr`` so a file read back reproduces the arrays bit for bit.
"""
from __future__ import annotations

import json

import numpy as np
import scipy.sparse as sp

from .atlas.space import AtlasSpace, LocalBasis
from .geometry import N_AHA, AhaLabels, GeometryError, LvFrame, LvSequence, TriSurface, VolumeCurve


class FormatError(ValueError):
    """Malformed input file; the message names the file and line."""


def _f(x):
    return repr(float(x))


def _row(values):
    return " ".join(_f(v) for v in values)


class _Lines:
    """Tokenised non-empty lines with their 1-based line numbers."""

    def __init__(self, path):
        self.path = str(path)
        with open(path) as fh:
            raw = fh.read().splitlines()
        self.items = []
        for no, line in enumerate(raw, start=1):
            line = line.split("#", 1)[0].strip()
            if line:
                self.items.append((no, line.split()))
        self.pos = 0

    def error(self, msg, lineno=None):
        if lineno is None:
            lineno = self.items[min(self.pos, len(self.items) - 1)][0] if self.items else 0
        return FormatError(f"{self.path}:{lineno}: {msg}")

    def next(self, what):
        if self.pos >= len(self.items):
            raise self.error(f"unexpected end of file, expected {what}")
        no, tok = self.items[self.pos]
        self.pos += 1
        return no, tok

    def keyword(self, key, n_args=1):
        no, tok = self.next(key)
        if tok[0] != key or len(tok) != n_args + 1:
            raise self.error(f"expected '{key}' with {n_args} field(s), got {' '.join(tok)!r}", no)
        return tok[1:]

    def numbers(self, n_rows, n_cols, dtype=float, what="row"):
        out = np.empty((n_rows, n_cols), dtype)
        for i in range(n_rows):
            no, tok = self.next(what)
            if len(tok) != n_cols:
                raise self.error(f"{what} needs {n_cols} fields, got {len(tok)}", no)
            try:
                out[i] = [dtype(t) for t in tok]
            except ValueError as exc:
                raise self.error(f"bad number in {what}: {exc}", no) from None
        return out

    def integer(self, key):
        (v,) = self.keyword(key)
        try:
            return int(v)
        except ValueError:
            raise self.error(f"'{key}' needs an integer, got {v!r}") from None


# mesh sequences

def write_sequence(seq, path):
    f0 = seq.frames[0]
    lines = ["LVSEQ 1", f"subject_id {seq.subject_id}", f"frames {seq.n_frames}",
             f"endo_vertices {f0.endo.n_vertices}", f"epi_vertices {f0.epi.n_vertices}",
             f"frame_interval_ms {_f(seq.frame_interval)}", f"rv_landmark {seq.rv_landmark}"]
    for t, fr in enumerate(seq.frames):
        lines.append(f"frame {t}")
        if fr.basal_point is not None:
            lines.append("basal " + _row(np.r_[fr.basal_point, fr.basal_normal]))
        lines += [_row(v) for v in fr.endo.vertices]
        lines += [_row(v) for v in fr.epi.vertices]
    for name, surf in (("endo", f0.endo), ("epi", f0.epi)):
        lines.append(f"{name}_faces {len(surf.faces)}")
        lines += [" ".join(str(int(i)) for i in tri) for tri in surf.faces]
    lines.append("end")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_sequence(path):
    r = _Lines(path)
    no, tok = r.next("header")
    if tok != ["LVSEQ", "1"]:
        raise r.error("not an LVSEQ 1 file", no)
    (sid,) = r.keyword("subject_id")
    T = r.integer("frames")
    ne = r.integer("endo_vertices")
    np_ = r.integer("epi_vertices")
    (dt,) = r.keyword("frame_interval_ms")
    rv = r.integer("rv_landmark")
    blocks = []
    for t in range(T):
        if r.integer("frame") != t:
            raise r.error(f"frames out of order, expected frame {t}")
        basal = None
        if r.pos < len(r.items) and r.items[r.pos][1][0] == "basal":
            no, tok = r.next("basal")
            if len(tok) != 7:
                raise r.error("'basal' needs 6 numbers", no)
            try:
                basal = np.array([float(x) for x in tok[1:]])
            except ValueError as exc:
                raise r.error(f"bad number in basal plane: {exc}", no) from None
        endo = r.numbers(ne, 3, what=f"frame {t} endo vertex")
        epi = r.numbers(np_, 3, what=f"frame {t} epi vertex")
        blocks.append((endo, epi, basal))
    faces = {}
    for name, n in (("endo", ne), ("epi", np_)):
        m = r.integer(f"{name}_faces")
        start = r.pos
        f = r.numbers(m, 3, int, f"{name} face")
        if f.size and (f.min() < 0 or f.max() >= n):
            raise r.error(f"{name} face index outside 0..{n - 1}", r.items[start][0])
        faces[name] = f
    r.keyword("end", 0)
    try:
        frames = [LvFrame(TriSurface(e, faces["endo"]), TriSurface(p, faces["epi"]),
                          None if b is None else b[:3], None if b is None else b[3:])
                  for e, p, b in blocks]
        return LvSequence(frames, float(dt), sid, rv)
    except (GeometryError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


# volume curves (JSON lines)

def write_curves(curves, path):
    with open(path, "w") as fh:
        for c in curves:
            fh.write(json.dumps({"subject_id": c.subject_id, "frame_interval_ms": c.frame_interval,
                                 "volumes_ml": [float(v) for v in c.volumes]}) + "\n")


def read_curves(path):
    out = []
    with open(path) as fh:
        for no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                out.append(VolumeCurve(np.array(doc["volumes_ml"], float),
                                       float(doc.get("frame_interval_ms", 40.0)),
                                       str(doc["subject_id"])))
            except (json.JSONDecodeError, KeyError, TypeError, GeometryError) as exc:
                raise FormatError(f"{path}:{no}: {type(exc).__name__}: {exc}") from None
    return out


def write_jsonl(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path):
    out = []
    with open(path) as fh:
        for no, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{no}: {exc.msg}") from None
    return out


# atlas bundle

def write_atlas(atlas, path):
    s = atlas.surface
    R, C, Lg = atlas.basis.radial, atlas.basis.circumferential, atlas.basis.longitudinal
    W = sp.coo_matrix(atlas.weights)
    lines = ["ATLAS 1", f"vertices {s.n_vertices}"]
    lines += [_row(v) for v in s.vertices]
    lines.append(f"faces {len(s.faces)}")
    lines += [" ".join(str(int(i)) for i in tri) for tri in s.faces]
    lines += ["long_axis " + _row(atlas.long_axis), "axis_point " + _row(atlas.axis_point),
              f"n_endo {atlas.n_endo}", f"rv_landmark {atlas.rv_landmark}", "labels"]
    lines += [str(int(x)) for x in atlas.labels.labels]
    lines.append("basis")
    lines += [_row(np.r_[a, b, c]) for a, b, c in zip(R, C, Lg)]
    order = np.lexsort((W.col, W.row))
    lines.append(f"weights {W.nnz} {W.shape[1]}")
    lines += [f"{W.row[k]} {W.col[k]} {_f(W.data[k])}" for k in order]
    lines.append("end")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_atlas(path):
    r = _Lines(path)
    no, tok = r.next("header")
    if tok != ["ATLAS", "1"]:
        raise r.error("not an ATLAS 1 file", no)
    n = r.integer("vertices")
    V = r.numbers(n, 3, what="vertex")
    m = r.integer("faces")
    F = r.numbers(m, 3, int, "face")
    axis = np.array([float(x) for x in r.keyword("long_axis", 3)])
    point = np.array([float(x) for x in r.keyword("axis_point", 3)])
    n_endo = r.integer("n_endo")
    rv = r.integer("rv_landmark")
    r.keyword("labels", 0)
    labels = r.numbers(n, 1, int, "label")[:, 0]
    r.keyword("basis", 0)
    B = r.numbers(n, 9, what="basis row")
    nnz, ncol = (int(x) for x in r.keyword("weights", 2))
    trip = r.numbers(nnz, 3, what="weight")
    r.keyword("end", 0)
    W = sp.csr_matrix((trip[:, 2], (trip[:, 0].astype(int), trip[:, 1].astype(int))),
                      shape=(n, ncol))
    try:
        return AtlasSpace(TriSurface(V, F), axis, point,
                          LocalBasis(B[:, :3], B[:, 3:6], B[:, 6:]), AhaLabels(labels), W,
                          n_endo, rv)
    except (GeometryError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


# local displacements and features

def write_local(path, values, subject_ids):
    """(N, T, n, 3) local displacements as a compressed numpy archive."""
    np.savez_compressed(path, values=np.asarray(values, float),
                        subject_ids=np.array(subject_ids, dtype=str))


def read_local(path):
    with np.load(path) as z:
        return z["values"], [str(s) for s in z["subject_ids"]]


def write_features(fm, path):
    """CSV: header ``key,<subject ids>``; one row per feature ``t:region:component``."""
    from .embed.features import COMPONENTS, feature_key

    with open(path, "w") as fh:
        fh.write(",".join(["key"] + list(fm.subject_ids)) + "\n")
        for i, row in enumerate(fm.X):
            t, a, c = feature_key(i, fm.n_regions)
            fh.write(f"{t}:{a}:{COMPONENTS[c]}," + ",".join(_f(x) for x in row) + "\n")


def read_features(path):
    from .embed.features import COMPONENTS, FeatureMatrix, feature_index

    with open(path) as fh:
        header = fh.readline().rstrip("\n").split(",")
        if not header or header[0] != "key":
            raise FormatError(f"{path}:1: header must start with 'key'")
        rows = []
        for no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split(",")
            if len(parts) != len(header):
                raise FormatError(f"{path}:{no}: expected {len(header)} fields, got {len(parts)}")
            try:
                t, a, c = parts[0].split(":")
                if feature_index(int(t), int(a), COMPONENTS.index(c)) != len(rows):
                    raise ValueError(f"key {parts[0]} out of order")
                rows.append([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{no}: {exc}") from None
    X = np.array(rows)
    n_frames = len(rows) // (3 * N_AHA)
    try:
        return FeatureMatrix(X, n_frames, subject_ids=header[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
