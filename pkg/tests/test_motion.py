import numpy as np
import pytest

import oracles
from motion_atlas.cohort import SubjectSpec, motion_profile, synth_subject
from motion_atlas.geometry import half_ellipsoid
from motion_atlas.motion import (Bspline4d, BsplineFfd3d, SupportError, VertexTrajectorySet,
                                 bending_operator, bspline_weight_derivatives, bspline_weights,
                                 compose_interframe, evaluate_ffd, fit_4dt, fit_ffd,
                                 grid_for_extent, load_grid, track_sequence)


def _cloud(rng, n=300, lo=-30, hi=30):
    return rng.uniform(lo, hi, (n, 3))


def test_partition_of_unity():
    u = np.linspace(0, 1, 1001, endpoint=False)
    assert np.abs(bspline_weights(u).sum(-1) - 1).max() < 1e-12
    assert np.abs(bspline_weight_derivatives(u).sum(-1)).max() < 1e-12


def test_weights_match_scipy_basis():
    for u in (0.0, 0.3, 0.77):
        np.testing.assert_allclose(bspline_weights(u), oracles.bspline_basis(u), atol=1e-15)
    np.testing.assert_allclose(bspline_weights(0.3), oracles.FROZEN["bspline_u03"], atol=1e-15)


def test_weight_derivatives_match_differences():
    u = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    fd = (bspline_weights(u + h) - bspline_weights(u - h)) / (2 * h)
    np.testing.assert_allclose(bspline_weight_derivatives(u), fd, atol=1e-8)


def test_translation_reproduced(rng):
    p = _cloud(rng)
    t = np.array([1.5, -2.0, 0.25])
    ffd = fit_ffd(p, np.tile(t, (len(p), 1)), 10.0)
    assert ffd.residual_rms < 1e-9
    # any interior point, not only the samples
    q = _cloud(rng, 50, -25, 25)
    np.testing.assert_allclose(ffd(q), np.tile(t, (50, 1)), atol=1e-9)


def test_linear_field_reproduced(rng):
    p = _cloud(rng, 400)
    A = rng.normal(0, 0.05, (3, 3))
    ffd = fit_ffd(p, p @ A.T, 5.0)
    assert ffd.residual_rms < 1e-6


def test_single_sample_minimum_norm():
    p = np.array([[1.0, 2.0, 3.0]])
    u = np.array([[0.5, -0.5, 2.0]])
    ffd = fit_ffd(p, u, 10.0, ridge=0.0)
    np.testing.assert_allclose(ffd(p), u, atol=1e-12)
    # the minimum-norm coefficients are proportional to the sample's weights
    w = ffd.design_matrix(p).toarray()[0]
    c = ffd.coefficients.reshape(-1, 3)
    np.testing.assert_allclose(c, np.outer(w, u[0]) / (w @ w), atol=1e-12)


def test_zero_controls_give_zero(rng):
    origin, spacing, shape = grid_for_extent([-10] * 3, [10] * 3, 5.0)
    ffd = BsplineFfd3d.zeros(origin, spacing, shape)
    assert np.all(ffd(_cloud(rng, 20, -10, 10)) == 0)


def test_evaluation_at_samples_within_residual(rng):
    p = _cloud(rng, 200)
    u = np.sin(p / 15.0)
    ffd = fit_ffd(p, u, 10.0)
    err = np.sqrt(np.mean(np.sum((ffd(p) - u) ** 2, axis=1)))
    assert err == pytest.approx(ffd.residual_rms, rel=1e-9)


def test_outside_support_raises():
    p = np.array([[0.0, 0, 0], [10, 10, 10], [5, 5, 5]])
    ffd = fit_ffd(p, np.zeros_like(p), 5.0)
    with pytest.raises(SupportError):
        evaluate_ffd(ffd, [[100.0, 0, 0]])


def test_bending_null_space():
    shape = (5, 6, 4)
    L = bending_operator(shape)
    ix = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), -1).reshape(-1, 3)
    lin = ix @ [0.3, -1.0, 2.0] + 4.0
    assert np.abs(L @ lin).max() < 1e-12
    assert np.abs(L @ (ix[:, 0] ** 2)).max() > 0.5


def test_compose_identity_is_static(rng):
    p = _cloud(rng, 30, -10, 10)
    origin, spacing, shape = grid_for_extent([-20] * 3, [20] * 3, 5.0)
    traj = compose_interframe([BsplineFfd3d.zeros(origin, spacing, shape)] * 4, p)
    assert np.all(traj.displacements == 0)


def test_compose_translations_add(rng):
    p = _cloud(rng, 50, -10, 10)
    a, b = np.array([1.0, 0.5, -0.2]), np.array([-0.3, 2.0, 0.7])
    big = _cloud(rng, 400, -25, 25)
    fa = fit_ffd(big, np.tile(a, (400, 1)), 5.0)
    fb = fit_ffd(big, np.tile(b, (400, 1)), 5.0)
    traj = compose_interframe([fa, fb], p)
    np.testing.assert_allclose(traj.displacements[-1], np.tile(a + b, (50, 1)), atol=1e-9)


def _phantom():
    spec = SubjectSpec(n_rings=12, n_sectors=24)
    seq = synth_subject(spec)
    f = motion_profile(spec.n_frames)
    endo0 = half_ellipsoid(spec.radius, spec.height, 12, 24).vertices
    epi0 = half_ellipsoid(spec.radius + spec.wall, spec.height + spec.wall, 12, 24).vertices
    analytic = np.concatenate([
        oracles.phantom_paths(endo0, spec.contraction, spec.shortening, spec.twist, spec.height, f),
        oracles.phantom_paths(epi0, spec.contraction, spec.shortening, spec.twist, spec.height, f,
                              k=spec.epi_fraction)], axis=1)
    return seq, analytic


def test_phantom_matches_closed_form():
    seq, analytic = _phantom()
    np.testing.assert_allclose(seq.wall_positions(), analytic, atol=1e-9)


@pytest.mark.parametrize("spacing", [20.0, 10.0])
def test_composed_phantom_trajectories(spacing):
    seq, analytic = _phantom()
    wall = seq.wall_positions()
    ffds = track_sequence(wall, spacing)
    traj = compose_interframe(ffds, wall[0])
    err = np.sqrt(((traj.positions - analytic) ** 2).sum(-1).mean(-1))
    bound = max(f.residual_rms for f in ffds) * (len(wall) - 1)
    assert err.max() <= bound


def test_4dt_static_is_zero(rng):
    p = _cloud(rng, 60, -10, 10)
    model = fit_4dt(np.tile(p, (6, 1, 1)), 10.0, 1.0)
    assert np.abs(model.evaluate_all(p)).max() < 1e-12
    assert model.residual_rms < 1e-12


def test_4dt_separable_cubic_field(rng):
    p = _cloud(rng, 150, -20, 20)
    T = 12
    t = np.arange(T, dtype=float)
    f = 0.02 * t - 0.004 * t**2 + 0.0003 * t**3  # f(0) = 0
    g = p @ np.array([[0.1, 0.0, -0.05], [0.02, 0.1, 0.0], [0.0, 0.03, 0.08]]).T + [1.0, -0.5, 0.2]
    pos = p[None] + f[:, None, None] * g[None]
    model = fit_4dt(VertexTrajectorySet(pos), 10.0, 2.0, ridge=0.0)
    assert model.residual_rms < 1e-6
    # frame zero vanishes identically
    assert np.abs(model.evaluate(p, 0.0)).max() < 1e-12


def test_4dt_phantom_residual():
    seq, _ = _phantom()
    wall = seq.wall_positions()
    traj = compose_interframe(track_sequence(wall, 20.0), wall[0])
    model = fit_4dt(traj, 20.0, 1.0)
    assert model.residual_rms < 0.1


def test_grid_file_round_trip(tmp_path, rng):
    p = _cloud(rng, 80)
    ffd = fit_ffd(p, np.cos(p / 9.0), 10.0)
    path = tmp_path / "g.bspl"
    ffd.save(path)
    back = BsplineFfd3d.load(path)
    assert np.array_equal(back.coefficients, ffd.coefficients)
    assert np.array_equal(back(p), ffd(p))
    model = fit_4dt(np.stack([p, p + 0.1, p + 0.3]), 10.0, 1.0)
    model.save(tmp_path / "m.bspl")
    m2 = Bspline4d.load(tmp_path / "m.bspl")
    assert np.array_equal(m2.coefficients, model.coefficients)
    np.testing.assert_allclose(m2.evaluate_all(p, 3), model.evaluate_all(p, 3), atol=1e-15)


def test_bad_grid_file(tmp_path):
    path = tmp_path / "x.bspl"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="not a control-grid file"):
        load_grid(path)


def test_spacing_validation():
    with pytest.raises(ValueError):
        grid_for_extent([0, 0, 0], [1, 1, 1], 0.0)
    with pytest.raises(ValueError):
        fit_ffd(np.zeros((2, 3)), np.zeros((3, 3)), 5.0)
