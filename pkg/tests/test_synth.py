import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, strategies as st

from volcap import fileio, synth
from volcap.core import TriMesh


def test_capsule_ray_hits_match_brute_march(rng):
    cap = synth.Capsule(np.array([0.0, 0, 0]), np.array([0.0, 300, 0]), 50.0)
    ro = np.tile([0.0, 150.0, 1000.0], (50, 1)) + rng.uniform(-80, 80, (50, 3)) * [1, 3, 0]
    rd = np.tile([0.0, 0.0, -1.0], (50, 1))
    # brute force: march along the ray in 0.01 mm steps
    s = np.arange(0, 1200, 0.01)
    for i in range(len(ro)):
        t = cap.intersect(ro[i], rd[i:i + 1])[0]
        d = cap.distance(ro[i] + s[:, None] * rd[i])
        hit = np.flatnonzero(d <= 0)
        if len(hit):
            assert t == pytest.approx(s[hit[0]], abs=0.02)
        else:
            assert np.isinf(t)


@given(st.integers(0, 500))
def test_surface_samples_lie_on_the_body(seed):
    body = synth.pose_body()
    P, N = body.sample_surface(300, seed=seed)
    assert np.abs(body.sdf(P)).max() < 1e-6
    assert np.allclose(np.linalg.norm(N, axis=1), 1)


def test_xpose_joints_and_bones():
    body = synth.pose_body()
    assert set(body.joints) == set(synth.JOINT_NAMES)
    bones = synth.bone_lengths(body.joints)
    s = synth.BodyShape()
    assert bones["l_shoulder-l_elbow"] == pytest.approx(s.upper_arm)
    assert bones["r_knee-r_ankle"] == pytest.approx(s.shank)
    for k, v in bones.items():
        if "l_" in k:
            assert v == pytest.approx(bones[k.replace("l_", "r_")])
    # the neck sits midway between the shoulders
    J = body.joints
    assert np.allclose(J["neck"], 0.5 * (J["l_shoulder"] + J["r_shoulder"]))
    # left is +x for a subject facing +z
    assert J["l_wrist"][0] > 0 > J["r_wrist"][0]


def test_flexion_angle_follows_knee_parameter():
    body = synth.pose_body(params=replace(synth.XPOSE, r_knee=60.0, r_leg_spread=0.0))
    J = body.joints
    assert synth.flexion_angle(J["r_hip"], J["r_knee"], J["r_ankle"]) == pytest.approx(60.0, abs=1e-6)


def test_rendering_is_deterministic_and_consistent():
    sc = synth.make_scene("xpose", n_frames=1, scale=0.25, depth_noise=2.0)
    a = synth.render_frame(sc, 1, 0)
    b = synth.render_frame(sc, 1, 0)
    assert np.array_equal(a.depth, b.depth) and np.array_equal(a.color, b.color)
    assert a.foreground.any()
    clean = synth.render_frame(replace(sc, depth_noise=0.0), 1, 0)
    assert np.array_equal(clean.foreground, a.foreground)
    assert 0 < np.abs(a.depth - clean.depth)[a.foreground].std() < 10


def test_volume_matches_sdf():
    body = synth.sphere_body([0, 1000, 0], 150.0)
    A, lo = body.volume(10.0)
    inside = np.count_nonzero(A > 0) * 1000.0
    assert inside == pytest.approx(4 / 3 * np.pi * 150 ** 3, rel=0.05)


def test_box_model_mesh_has_atlas_coordinates():
    m = synth.BoxModel().mesh()
    assert isinstance(m, TriMesh) and len(m.vertices) > 100
    assert m.attributes["texcoord"].shape == (len(m.vertices), 2)


def test_kick_has_flexing_right_knee():
    ks = [p.r_knee for p in synth.kick_params(60)]
    assert max(ks) > 60 and min(ks) <= 16
    assert all(p.l_knee == synth.XPOSE.l_knee for p in synth.kick_params(10))


def test_export_layout(tmp_path):
    sc = synth.make_scene("xpose", n_frames=2, scale=0.25)
    out = synth.export_dataset(sc, tmp_path / "ds", n_samples=500, box_frames=2)
    for rel in ("rig.json", "gt/joints.json", "gt/surface_samples.ply", "calib/model.obj", "calib/matches.csv",
                "frames/cam0/timestamps.csv", "frames/cam5/0001_color.png", "audio/cam3.wav", "calib/krt_cam2.csv"):
        assert (out / rel).exists(), rel
    fr = fileio.read_frame(out, 2, 1)
    ref = synth.render_frame(sc, 2, 1)
    assert np.array_equal(fr.foreground, ref.foreground)
    assert np.abs(fr.depth - ref.depth)[ref.foreground].max() <= 0.5
