import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from volcap import calib, synth
from volcap.core import Intrinsics, Pose, look_at


def _rigid(seed):
    r = np.random.default_rng(seed)
    return Pose(Rotation.random(random_state=seed).as_matrix(), r.uniform(-3000, 3000, 3))


@given(st.integers(0, 100_000), st.integers(3, 40))
def test_procrustes_recovers_noiseless_transform(seed, n):
    pose = _rigid(seed)
    S = np.random.default_rng(seed + 1).uniform(-1000, 1000, (n, 3))
    corr = calib.Correspondences3D3D(S, pose.apply(S))
    est = calib.solve_procrustes(corr)
    assert np.linalg.det(est.R) == pytest.approx(1.0)
    assert calib.procrustes_residual(corr, est).max() < 1e-6


def test_procrustes_never_returns_reflections(rng):
    # mirror-imaged correspondences are best fit by a reflection; a rotation must come back
    S = rng.uniform(-100, 100, (20, 3))
    M = S * [1, 1, -1]
    est = calib.solve_procrustes(calib.Correspondences3D3D(S, M))
    assert np.linalg.det(est.R) == pytest.approx(1.0)


def test_procrustes_errors():
    with pytest.raises(calib.InsufficientCorrespondences):
        calib.Correspondences3D3D(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(calib.DegenerateConfiguration):
        calib.solve_procrustes(calib.Correspondences3D3D(line, line))


def test_ransac_rejects_outliers(rng):
    pose = _rigid(7)
    S = rng.uniform(-800, 800, (40, 3))
    M = pose.apply(S) + rng.normal(0, 1.0, S.shape)
    bad = rng.choice(40, 6, replace=False)
    M[bad] += rng.uniform(200, 500, (6, 3))
    est, inl = calib.estimate_sensor_pose(calib.Correspondences3D3D(S, M), seed=3)
    assert not inl[bad].any() and inl.sum() == 34
    assert np.abs(est.R - pose.R).max() < 1e-2
    assert np.linalg.norm(est.t - pose.t) < 5


def test_sample_depth_is_exact_on_planes(rng):
    intr = Intrinsics(200.0, 200.0, 31.5, 23.5, 64, 48)
    n = np.array([0.2, -0.3, 1.0])
    n /= np.linalg.norm(n)
    d0 = 1500.0
    v, u = np.mgrid[0:48, 0:64]
    ray = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u, dtype=float)], -1)
    Z = d0 / (ray @ n)
    uv = rng.uniform([0, 0], [63, 47], (200, 2))
    rq = np.column_stack([(uv[:, 0] - intr.cx) / intr.fx, (uv[:, 1] - intr.cy) / intr.fy, np.ones(200)])
    assert np.allclose(calib.sample_depth(Z, uv), d0 / (rq @ n), rtol=1e-12)
    Z[10, 10] = 0
    assert calib.sample_depth(Z, np.array([[10.5, 10.5], [-1, 3]])).tolist() == [0.0, 0.0]


def test_accumulate_depth_median_ignores_invalid():
    a = np.array([[0.0, 1000.0]])
    b = np.array([[0.0, 1010.0]])
    c = np.array([[500.0, 0.0]])
    assert calib.accumulate_depth([a, b, c]).tolist() == [[500.0, 1005.0]]


def test_lift_matches_recovers_model_points():
    sc = synth.make_scene("xpose", n_frames=1, scale=0.5)
    k = 1
    depth = calib.accumulate_depth(synth.render_box_depth(sc, k, 2))
    m = synth.box_matches(sc, k, n_matches=30)
    corr = calib.lift_matches(m, depth, sc.rig[k].depth, sc.box.mesh())
    world = sc.rig[k].pose.apply(corr.sensor)
    assert np.abs(world - corr.model).max() < 1e-6


def _krt_camera(seed=0):
    cam = synth.make_rig(1, 0)[0]
    X, uv = synth.krt_correspondences(cam, n=6)
    return cam, X, uv


def test_projection_fit_is_exact_without_noise():
    cam, X, uv = _krt_camera()
    fit = calib.fit_projection(calib.Correspondences3D2D(X, uv))
    assert fit.rms < 1e-5
    assert np.allclose(fit.K, cam.rgb.matrix, rtol=1e-6, atol=1e-5)
    assert fit.rgb_pose().allclose(cam.rgb_pose, atol=1e-4)
    assert np.linalg.det(fit.R) == pytest.approx(1.0)


def test_projection_fit_with_noise_and_decomposition(rng):
    cam, X, uv = _krt_camera()
    fit = calib.fit_projection(calib.Correspondences3D2D(X, uv + rng.normal(0, 0.5, uv.shape)))
    assert 0.3 < fit.rms < 0.8
    K, R, t = calib.decompose_projection(fit.P)
    P = K @ np.column_stack([R, t])
    assert np.allclose(P / np.linalg.norm(P), fit.P / np.linalg.norm(fit.P) * np.sign(fit.P[2, 3] * P[2, 3]))
    assert K[0, 0] > 0 and K[1, 1] > 0 and np.linalg.det(R) > 0
    assert np.allclose(fit.project(X), uv, atol=3.0)


def test_projection_fit_rejects_coplanar_points(rng):
    X = np.column_stack([rng.uniform(-500, 500, (20, 2)), np.full(20, 2000.0)])
    with pytest.raises(calib.DegenerateConfiguration):
        calib.fit_projection(calib.Correspondences3D2D(X, rng.uniform(0, 100, (20, 2))))
    with pytest.raises(calib.InsufficientCorrespondences):
        calib.Correspondences3D2D(X[:5], X[:5, :2])


def test_calibrate_dataset_recovers_rig(tmp_path):
    sc = synth.make_scene("xpose", n_frames=1, scale=0.5)
    out = synth.export_dataset(sc, tmp_path / "ds", n_samples=100, box_frames=3, with_audio=False)
    nominal = type(sc.rig)(tuple(c.with_pose(look_at(c.pose.t + 300, [0, 900, 0])) for c in sc.rig),
                           sc.rig.up, sc.rig.recon_ids)
    rep = calib.calibrate_dataset(out, nominal)
    for k, cam in enumerate(sc.rig):
        assert np.linalg.norm(rep.rig[k].pose.t - cam.pose.t) < 5.0
        assert np.abs(rep.rig[k].pose.R - cam.pose.R).max() < 2e-3
        assert rep.reprojection_rms_px[k] < 1e-3
        assert rep.inliers[k] >= 30
