import functools
import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from volcap import core, mocap, synth
from volcap.core import rotation_about
from oracles import link_joint_scan, mst_weight_brute, segment_distance_dense


@functools.lru_cache(maxsize=None)
def xpose_volume(edge=20.0, **kw):
    body = synth.pose_body(params=replace(synth.XPOSE, **kw))
    A, lo = body.volume(edge)
    return body, core.VolumeGrid(A, lo, edge)


@functools.lru_cache(maxsize=None)
def xpose_calibration(edge=20.0):
    return mocap.calibrate_user([(xpose_volume(edge)[1], 0.0)] * mocap.N_CAL)


# ---------------------------------------------------------------------------
# spanning tree


@given(st.integers(2, 6), st.integers(0, 10_000))
def test_kruskal_matches_exhaustive(n, seed):
    r = np.random.default_rng(seed)
    edges = np.array([e for e in itertools.combinations(range(n), 2)])
    # a path guarantees connectivity; other edges kept at random
    keep = np.array([b == a + 1 or r.random() < 0.6 for a, b in edges])
    edges = edges[keep]
    w = r.integers(1, 6, len(edges)).astype(float)      # small ints force ties
    tree = mocap.kruskal(n, edges, w)
    assert len(tree) == n - 1
    assert w[tree].sum() == pytest.approx(mst_weight_brute(n, edges.tolist(), w))


def test_build_mst_on_line_and_forest():
    pts = np.array([[0.0, 0, 0], [100, 0, 0], [200, 0, 0], [1000, 0, 0]])
    g = mocap.build_mst(pts, radius=150)
    assert len(g.tree_edges) == 2 and g.tree_weight() == pytest.approx(200)
    assert g.component(0) == [0, 1, 2] and g.component(3) == [3]
    with pytest.raises(mocap.TrackingLost):
        mocap.build_mst(np.zeros((0, 3)))


def test_prune_spurs_removes_short_branch():
    line = [[0.0, 100 * i, 0] for i in range(6)]
    spur = [[50.0, 200, 0]]
    g = mocap.build_mst(np.array(line + spur), radius=110)
    pruned = mocap.prune_spurs(g, root=0)
    assert pruned.degree(6) == 0 and pruned.degree(5) == 1


def test_rooted_tree_paths():
    pts = np.array([[0.0, 0, 0], [100, 0, 0], [0, 100, 0], [200, 0, 0]])
    t = mocap.build_mst(pts, 150).rooted(0)
    assert t.path(3, 2) == [3, 1, 0, 2]
    assert t.geodesic(3, 2) == pytest.approx(300)
    assert t.leaves() == [2, 3]


# ---------------------------------------------------------------------------
# joint solvers against full scans


@given(st.integers(1, 30), st.integers(0, 10_000), st.booleans())
def test_link_joint_full_scan(n, seed, quantise):
    r = np.random.default_rng(seed)
    P = r.uniform(-300, 300, (n, 3))
    if quantise:
        P = np.round(P / 100) * 100      # repeated points produce ties
    Xr, Xx = r.uniform(-300, 300, 3), r.uniform(-300, 300, 3)
    dr, dx = r.uniform(50, 400, 2)
    assert mocap.solve_link_joint(P, Xr, Xx, dr, dx) == link_joint_scan(P, Xr, Xx, dr, dx)


def test_link_joint_tie_prefers_middle():
    P = np.zeros((5, 3))
    assert mocap.solve_link_joint(P, np.ones(3), -np.ones(3), 1.0, 1.0) == 2
    assert mocap.solve_link_joint(np.zeros((4, 3)), np.ones(3), -np.ones(3), 1.0, 1.0) == 1


@given(st.integers(1, 25), st.integers(0, 10_000))
def test_farthest_from_segment_full_scan(n, seed):
    r = np.random.default_rng(seed)
    P = r.uniform(-200, 200, (n, 3))
    a, b = r.uniform(-200, 200, 3), r.uniform(-200, 200, 3)
    i, d = mocap.farthest_from_segment(P, a, b)
    dense = [segment_distance_dense(p, a, b) for p in P]
    assert d == pytest.approx(max(dense), abs=0.05)
    assert dense[i] == pytest.approx(max(dense), abs=0.05)


def test_farthest_tie_takes_first():
    P = np.array([[0.0, 1, 0], [0, -1, 0], [0, 0.5, 0]])
    assert mocap.farthest_from_segment(P, np.array([-1.0, 0, 0]), np.array([1.0, 0, 0])) == (0, 1.0)


def test_point_segment_degenerate():
    d = mocap.point_segment_distance(np.array([[3.0, 4, 0]]), np.zeros(3), np.zeros(3))
    assert d[0] == pytest.approx(5.0)


# ---------------------------------------------------------------------------
# Kalman


def test_kalman_smooths_noisy_motion():
    t = np.arange(90) * 1000 / 30
    truth = np.column_stack([300 * np.sin(2 * np.pi * 0.5 * t / 1000), np.zeros_like(t), np.zeros_like(t)])
    raw_err, filt_err = [], []
    for seed in range(20):
        r = np.random.default_rng(seed)
        z = truth + r.normal(0, 20, truth.shape)
        kf = mocap.JointKalman(names=("j",))
        est = np.array([kf.update(ti, {"j": zi})["j"] for ti, zi in zip(t, z)])
        raw_err.append(np.sqrt(np.mean(np.sum((z - truth)[10:] ** 2, axis=1))))
        filt_err.append(np.sqrt(np.mean(np.sum((est - truth)[10:] ** 2, axis=1))))
    assert np.mean(filt_err) < 0.85 * np.mean(raw_err)


def test_kalman_predicts_through_missing_measurements():
    kf = mocap.JointKalman(names=("j",))
    for i in range(20):
        kf.update(i * 100.0, {"j": np.array([i * 10.0, 0, 0])})   # 100 mm/s
    out = kf.update(2100.0, {})
    assert out["j"][0] == pytest.approx(210.0, abs=5.0)
    assert mocap.JointKalman(names=("j",)).update(0.0, {}) == {}


# ---------------------------------------------------------------------------
# angles


@given(st.integers(0, 10_000))
def test_angles_invariant_under_rigid_motion(seed):
    r = np.random.default_rng(seed)
    a, j, c = r.normal(size=(3, 3)) * 200
    R = rotation_about(r.normal(size=3), r.uniform(-np.pi, np.pi))
    t = r.normal(size=3) * 1000
    before = synth.flexion_angle(a, j, c)
    after = synth.flexion_angle(R @ a + t, R @ j + t, R @ c + t)
    assert after == pytest.approx(before, abs=1e-6)
    assert 0 <= before <= 180


def test_straight_limb_has_zero_flexion():
    assert synth.flexion_angle(np.zeros(3), np.array([0, 1.0, 0]), np.array([0, 2.0, 0])) == pytest.approx(0.0)


# ---------------------------------------------------------------------------
# calibration and tracking on analytic volumes


def test_xpose_calibration_bones_within_ten_percent():
    body, _ = xpose_volume()
    cal = xpose_calibration()
    for a, b in synth.BONES:
        gt = np.linalg.norm(body.joints[a] - body.joints[b])
        assert abs(cal.bone(a, b) - gt) <= 0.1 * gt, (a, b)


def test_xpose_joints_and_sides():
    # 20 mm voxels put skeleton tips up to ~60 mm off an offset body; 10 mm resolves them
    body, G = xpose_volume(10.0, translation=(30.0, 0.0, -20.0), yaw=10.0)
    tr = mocap.Tracker(xpose_calibration(10.0), smooth=False)
    sp = tr.track_frame(G, 0.0, 0, 0.0)
    assert sp.valid
    for k in synth.JOINT_NAMES:
        assert np.linalg.norm(sp.joints[k] - body.joints[k]) < 60, k
    # left is +x in the body frame
    assert sp.joints["l_wrist"][0] > sp.joints["r_wrist"][0]
    assert sp.joints["l_ankle"][0] > sp.joints["r_ankle"][0]


def test_torso_orientation_is_rotation():
    _, G = xpose_volume(yaw=25.0)
    fa = mocap.analyse_volume(G, 0.0)
    assert np.allclose(fa.R_t.T @ fa.R_t, np.eye(3), atol=1e-9)
    assert np.linalg.det(fa.R_t) == pytest.approx(1.0)
    assert fa.R_t[:, 0] @ np.array([0, 1.0, 0]) > 0.95


def test_calibration_fails_without_xpose():
    A = np.full((12, 12, 12), -1.0)
    A[4:8, 4:8, 4:8] = 1.0
    blob = core.VolumeGrid(A, np.zeros(3), 20.0)
    with pytest.raises(mocap.CalibrationFailed):
        mocap.calibrate_user([(blob, 0.0)] * 12)


def test_calibration_roundtrip(tmp_path):
    cal = xpose_calibration()
    cal.save(tmp_path / "cal.json")
    back = mocap.BodyCalibration.load(tmp_path / "cal.json")
    assert back.bone_lengths == cal.bone_lengths and back.geodesic == cal.geodesic
    for k in mocap.RIGID:
        assert np.allclose(back.rigid_offsets[k], cal.rigid_offsets[k])


def test_tracking_lost_frames_are_flagged_and_predicted():
    body, G = xpose_volume()
    tr = mocap.Tracker(xpose_calibration())
    first = tr.track_frame(G, 0.0, 0, 0.0)
    empty = core.VolumeGrid(np.full((8, 8, 8), -1.0), np.zeros(3), 20.0)
    lost = tr.track_frame(empty, 0.0, 1, 33.3)
    gap = tr.track_frame(None, 0.0, 2, 66.7)
    assert first.valid and not lost.valid and not gap.valid
    assert lost.raw == {}
    for k in synth.JOINT_NAMES:
        assert np.linalg.norm(gap.joints[k] - first.joints[k]) < 30


def test_skeleton_outputs(tmp_path):
    _, G = xpose_volume()
    tr = mocap.Tracker(xpose_calibration())
    poses = [tr.track_frame(G, 0.0, i, 33.3 * i) for i in range(2)]
    mocap.write_skeleton_jsonl(tmp_path / "s.jsonl", poses)
    mocap.write_angles_csv(tmp_path / "a.csv", poses)
    lines = (tmp_path / "s.jsonl").read_text().splitlines()
    assert len(lines) == 2 and '"valid": true' in lines[0]
    rows = (tmp_path / "a.csv").read_text().splitlines()
    assert rows[0] == "frame,joint,degrees" and len(rows) == 1 + 2 * len(mocap.ANGLES)
