import dataclasses

import numpy as np
import pytest

from motion_atlas import io
from motion_atlas.atlas.build import AtlasParams, build_atlas
from motion_atlas.cohort import SubjectSpec, synth_subject
from motion_atlas.embed import FeatureMatrix
from motion_atlas.geometry import VolumeCurve, volume_curve

SPEC = SubjectSpec(n_frames=8, n_rings=8, n_sectors=16, pose=True, position_noise=0.05)


@pytest.fixture(scope="module")
def seq():
    return synth_subject(SPEC)


def test_sequence_round_trip(tmp_path, seq):
    path = tmp_path / "s.lvseq"
    io.write_sequence(seq, path)
    back = io.read_sequence(path)
    assert back.subject_id == seq.subject_id and back.rv_landmark == seq.rv_landmark
    assert back.frame_interval == seq.frame_interval
    assert np.array_equal(back.wall_positions(), seq.wall_positions())
    assert np.array_equal(back.frames[0].endo.faces, seq.frames[0].endo.faces)
    a, b = seq.frames[3], back.frames[3]
    if a.basal_point is not None:
        assert np.array_equal(a.basal_point, b.basal_point)


def _corrupt(path, lineno, text):
    lines = path.read_text().splitlines()
    lines[lineno - 1] = text
    path.write_text("\n".join(lines) + "\n")


def test_sequence_errors_name_the_line(tmp_path, seq):
    path = tmp_path / "s.lvseq"
    io.write_sequence(seq, path)
    lines = path.read_text().splitlines()
    vertex = next(i for i, ln in enumerate(lines, 1) if ln.startswith("frame 0")) + 2
    _corrupt(path, vertex, "1.0 oops 2.0")
    with pytest.raises(io.FormatError, match=rf"s\.lvseq:{vertex}: bad number"):
        io.read_sequence(path)
    io.write_sequence(seq, path)
    _corrupt(path, 1, "LVSEQ 2")
    with pytest.raises(io.FormatError, match=r":1: not an LVSEQ"):
        io.read_sequence(path)
    io.write_sequence(seq, path)
    path.write_text("\n".join(path.read_text().splitlines()[:-5]) + "\n")
    with pytest.raises(io.FormatError, match="unexpected end of file"):
        io.read_sequence(path)


def test_curves_round_trip(tmp_path):
    c = volume_curve(synth_subject(dataclasses.replace(SPEC, position_noise=0.0)))
    path = tmp_path / "c.jsonl"
    io.write_curves([c, VolumeCurve(c.volumes * 2, 30.0, "B")], path)
    back = io.read_curves(path)
    assert [b.subject_id for b in back] == [c.subject_id, "B"]
    assert np.array_equal(back[0].volumes, c.volumes) and back[1].frame_interval == 30.0
    with open(path, "a") as fh:
        fh.write('{"subject_id": "x"}\n')
    with pytest.raises(io.FormatError, match=r"c\.jsonl:3: KeyError"):
        io.read_curves(path)


def test_jsonl(tmp_path):
    path = tmp_path / "r.jsonl"
    recs = [{"b": 1, "a": [1.5, None]}, {"x": "y"}]
    io.write_jsonl(recs, path)
    assert io.read_jsonl(path) == recs
    assert path.read_text().splitlines()[0] == '{"a": [1.5, null], "b": 1}'
    path.write_text('{"a": 1}\n\n{bad\n')
    with pytest.raises(io.FormatError, match=r":3:"):
        io.read_jsonl(path)


def test_atlas_round_trip(tmp_path):
    seqs = [synth_subject(dataclasses.replace(SPEC, seed=s, n_rings=12, n_sectors=24))
            for s in range(3)]
    atlas, _ = build_atlas(seqs, AtlasParams(target_vertices=400))
    path = tmp_path / "a.atlas"
    io.write_atlas(atlas, path)
    back = io.read_atlas(path)
    assert np.array_equal(back.surface.vertices, atlas.surface.vertices)
    assert np.array_equal(back.surface.faces, atlas.surface.faces)
    assert np.array_equal(back.labels.labels, atlas.labels.labels)
    assert np.array_equal(back.basis.matrices(), atlas.basis.matrices())
    assert (back.weights != atlas.weights).nnz == 0
    assert (back.n_endo, back.rv_landmark) == (atlas.n_endo, atlas.rv_landmark)
    lines = path.read_text().splitlines()
    k = lines.index("labels") + 1
    _corrupt(path, k + 1, "1 2")
    with pytest.raises(io.FormatError, match=rf"a\.atlas:{k + 1}: label needs 1 fields"):
        io.read_atlas(path)


def test_local_round_trip(tmp_path, rng):
    vals = rng.normal(size=(2, 4, 10, 3))
    path = tmp_path / "l.npz"
    io.write_local(path, vals, ["A", "B"])
    v, ids = io.read_local(path)
    assert np.array_equal(v, vals) and ids == ["A", "B"]


def test_features_round_trip(tmp_path, rng):
    fm = FeatureMatrix(rng.normal(size=(3 * 17 * 2, 4)), 2, subject_ids=list("abcd"))
    path = tmp_path / "f.csv"
    io.write_features(fm, path)
    back = io.read_features(path)
    assert np.array_equal(back.X, fm.X) and back.subject_ids == fm.subject_ids
    assert back.n_frames == 2
    assert path.read_text().splitlines()[1].startswith("0:1:radial,")
    _corrupt(path, 4, path.read_text().splitlines()[4])
    with pytest.raises(io.FormatError, match=r"f\.csv:4: key 0:2:radial out of order"):
        io.read_features(path)
