import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from volcap import recon, synth
from volcap.core import Camera, Intrinsics, RgbdFrame, VolumeGrid, look_at
from volcap.evaluation import cp_rmse

from conftest import reconstruction, scene


def _cloud(P, N, W=None):
    P = np.atleast_2d(np.asarray(P, dtype=float))
    N = np.atleast_2d(np.asarray(N, dtype=float))
    W = np.ones(len(P)) if W is None else np.asarray(W, dtype=float)
    return recon.OrientedCloud(P, N, W, np.zeros((len(P), 2), dtype=np.int64))


def test_kernel_and_sigmas():
    s1, s2 = recon.splat_sigmas(10.0)
    assert s1 == pytest.approx(10 * math.sqrt(3) / 2)
    assert s2 ** 2 == pytest.approx(1.5 * s1 ** 2)
    assert recon.kernel_g(0.0, 2.0) == pytest.approx(0.5)
    assert recon.kernel_g(2.0, 2.0) == pytest.approx(math.exp(-1) / 2)


@given(st.integers(5, 7), st.integers(0, 10_000))
def test_grid_holds_points_with_padding(r, seed):
    P = np.random.default_rng(seed).uniform(-1000, 1000, (50, 3)) * [0.4, 1, 0.3]
    g = recon.make_grid(P, r)
    assert g.shape == (2 ** r, 2 ** (r + 1), 2 ** r)
    q = (P - g.origin) / g.edge
    assert q.min() >= 8 - 1e-9
    assert np.all(q.max(axis=0) <= np.array(g.shape) - 1 - 8 + 1e-9)


def test_empty_grid_raises():
    with pytest.raises(recon.EmptySceneError):
        recon.make_grid(np.zeros((0, 3)), 5)


def test_config_validation():
    with pytest.raises(ValueError):
        recon.ReconConfig(r=9)
    with pytest.raises(ValueError):
        recon.ReconConfig(mode="fancy")


@given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 5), st.floats(-1, 1), st.floats(-1, 1))
def test_single_point_on_voxel_centre(i, j, k, a, b):
    n = np.array([a, b, 1.0])
    n /= np.linalg.norm(n)
    grid = recon.GridSpec(np.array([-12.0, 3.0, 7.0]), 4.0, (8, 8, 8))
    p = grid.origin + np.array([i + 1, j + 1, k + 1]) * grid.edge
    fld = recon.splat([_cloud(p, n)], grid)
    assert np.allclose(fld.V.data[i + 1, j + 1, k + 1], math.sqrt(1.5) * n, atol=1e-9)


def test_splat_is_invariant_to_global_weight_scale(rng):
    P = rng.uniform(10, 50, (200, 3))
    N = rng.normal(size=(200, 3))
    W = rng.uniform(0.2, 1.0, 200)
    grid = recon.GridSpec(np.zeros(3), 4.0, (16, 16, 16))
    V1 = recon.splat([_cloud(P, N, W)], grid).V.data
    V2 = recon.splat([_cloud(P, N, 37.5 * W)], grid).V.data
    assert np.abs(V1 - V2).max() < 1e-9


def test_simple_mode_averages_normals():
    grid = recon.GridSpec(np.zeros(3), 1.0, (4, 4, 4))
    P = np.array([[1.1, 1.0, 1.0], [0.9, 1.2, 1.0]])
    N = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    f = recon.splat([_cloud(P, N)], grid, mode="simple")
    assert np.allclose(f.V.data[1, 1, 1], [0.5, 0.5, 0])
    assert f.d.data.sum() == 2


def test_fft_integration_inverts_spectral_gradient(rng):
    # a zero-mean periodic field without Nyquist content is recovered exactly
    shape = (16, 20, 12)
    F = np.fft.fftn(rng.normal(size=shape))
    F[0, 0, 0] = 0
    for ax, n in enumerate(shape):
        sl = [slice(None)] * 3
        sl[ax] = n // 2
        F[tuple(sl)] = 0
    f = np.real(np.fft.ifftn(F))
    W = np.meshgrid(*[2 * np.pi * np.fft.fftfreq(n, d=2.0) for n in shape], indexing="ij")
    grad = np.stack([np.real(np.fft.ifftn(1j * Wi * F)) for Wi in W], -1)
    A = recon.integrate_fft(grad, spacing=2.0).data
    assert np.allclose(A, f, atol=1e-10)


def test_iso_level_is_mean_sample():
    A = VolumeGrid(np.arange(27, dtype=float).reshape(3, 3, 3), np.zeros(3), 1.0)
    P = np.array([[0, 0, 0], [2, 2, 2.0]])
    assert recon.iso_level(A, P) == pytest.approx(13.0)


def _plane_frame(Z=2000.0):
    intr = Intrinsics(100.0, 100.0, 15.5, 11.5, 32, 24)
    depth = np.full((24, 32), Z)
    depth[:, 20:] += 200.0
    return Camera(intr, look_at([0, 0, 0], [0, 0, 1]), intr), RgbdFrame(depth, np.zeros((24, 32, 3)), depth > 0)


def test_build_cloud_normals_face_camera_and_cut_steps():
    cam, fr = _plane_frame()
    c = recon.build_cloud(fr, cam)
    assert np.allclose(np.linalg.norm(c.normals, axis=1), 1)
    # fronto-parallel plane: normal looks back along -z in camera coordinates
    # and no triangle spans the 200 mm step, which would tilt the normals beside it
    assert np.allclose(c.local_normals, [0, 0, -1], atol=1e-9)
    assert len(c) == 32 * 24
    cw = recon.confidence_weights(c, fr, cam)
    assert np.all((cw.weights >= 0) & (cw.weights <= 1))
    assert cw.weights[(c.pixels[:, 0] == 0) & (c.pixels[:, 1] == 0)][0] < cw.weights.max()


def test_reconstruct_rejects_empty_scene():
    cam, fr = _plane_frame()
    empty = RgbdFrame(fr.depth * 0, fr.color, fr.depth * 0 > 0)
    rig = synth.make_rig(1, 0)
    with pytest.raises(recon.EmptySceneError):
        recon.reconstruct([empty], type(rig)((cam,)))


def test_reconstruction_is_watertight_and_close():
    res = reconstruction(6)
    assert res.mesh.is_watertight()
    sc = scene()
    P, _ = sc.bodies[0].sample_surface(5000, seed=1)
    assert cp_rmse(P, res.mesh.vertices) < 1.5 * res.grid.edge
    assert res.volume.sample(sc.bodies[0].joints["torso"][None])[0] > res.level
    assert set(res.timings) == {"raw", "weights", "volumetric"}
