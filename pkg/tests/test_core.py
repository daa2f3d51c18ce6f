import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from volcap.core import (Camera, CameraRig, Intrinsics, Pose, TriMesh, VolumeGrid, backproject, look_at,
                         project_points, rotation_about)

angles = st.floats(-np.pi, np.pi)
coords = st.floats(-2000, 2000)


def _pose(seed):
    r = np.random.default_rng(seed)
    return Pose(Rotation.random(random_state=seed).as_matrix(), r.uniform(-1000, 1000, 3))


def test_pose_rejects_reflection():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_pose_compose_and_inverse(a, b):
    p, q = _pose(a), _pose(b)
    X = np.random.default_rng(a + b).uniform(-500, 500, (5, 3))
    assert np.allclose(p.compose(q).apply(X), p.apply(q.apply(X)))
    assert p.compose(p.inverse()).allclose(Pose.identity(), 1e-9)


def test_rotation_about_matches_scipy():
    R = rotation_about([1, 2, 3], 0.7)
    ref = Rotation.from_rotvec(0.7 * np.array([1, 2, 3]) / np.sqrt(14)).as_matrix()
    assert np.allclose(R, ref, atol=1e-12)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 10, 1, 4, 4)


def test_look_at_points_camera_z_at_target():
    p = look_at([1000, 500, 2000], [0, 900, 0])
    d = np.array([0, 900, 0]) - np.array([1000, 500, 2000])
    assert np.allclose(p.R[:, 2], d / np.linalg.norm(d))
    # image y points down in the world
    assert p.R[:, 1] @ np.array([0, 1, 0]) < 0


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(300, 5000))
def test_project_backproject_roundtrip(u, v, Z):
    intr = Intrinsics(365.0, 365.0, 255.5, 211.5, 512, 424)
    pose = look_at([0, 1000, 2500], [0, 900, 0])
    uv = np.array([[255.5 + u, 211.5 + v]])
    X = backproject(intr, pose, uv, Z)
    p, z = project_points(intr, pose, X)
    assert np.allclose(p, uv, atol=1e-7)
    assert np.allclose(z, Z)


def test_rig_roundtrip(tmp_path):
    intr = Intrinsics(100.0, 100.0, 31.5, 23.5, 64, 48)
    cams = [Camera(intr, look_at([0, 0, 1000 + k], [0, 0, 0]), intr, name=f"c{k}") for k in range(3)]
    rig = CameraRig(tuple(cams), recon_ids=(0, 2))
    rig.save(tmp_path / "rig.json")
    back = CameraRig.load(tmp_path / "rig.json")
    assert back.allclose(rig)
    assert back.heldout_ids == (1,)


def test_tetrahedron_is_watertight():
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    F = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    m = TriMesh(V, F)
    assert m.is_watertight()
    assert m.euler_characteristic() == 2
    assert not TriMesh(V, F[:3]).is_watertight()


def test_trimesh_index_check():
    with pytest.raises(ValueError):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))


@given(st.integers(0, 1000))
def test_volume_sample_is_exact_on_linear_fields(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=3), r.normal()
    g = VolumeGrid(np.zeros((6, 7, 8)), r.uniform(-10, 10, 3), 2.5)
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in g.shape], indexing="ij"), -1)
    g = g.like(g.to_world(idx.reshape(-1, 3)).reshape(idx.shape) @ a + b)
    X = g.to_world(r.uniform(0, [5, 6, 7], (20, 3)))
    assert np.allclose(g.sample(X), X @ a + b)
