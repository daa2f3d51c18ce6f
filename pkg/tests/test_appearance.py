import numpy as np
import pytest
from hypothesis import given, strategies as st

from volcap import appearance as ap, recon
from conftest import frames, reconstruction, scene


def test_visibility_matches_depth_test():
    res = reconstruction(6)
    sc = scene()
    fr = frames()[0]
    vis = ap.vertex_visibility(res.mesh, sc.rig, fr)
    assert vis.shape == (len(res.mesh.vertices), len(sc.rig))
    # almost every vertex is seen by some view, and no single view sees the whole body
    assert vis.any(axis=1).mean() > 0.9
    assert np.all(vis.mean(axis=0) < 0.8)
    # a vertex pushed far behind the surface fails the depth test
    far = res.mesh.vertices + 500.0 * sc.rig[0].pose.R[:, 2]
    moved = res.mesh.__class__(far, res.mesh.faces)
    assert ap.vertex_visibility(moved, sc.rig, fr)[:, 0].sum() < 0.02 * vis[:, 0].sum()


def test_texture_weights_bounded_and_zero_when_hidden():
    res = reconstruction(6)
    sc = scene()
    fr = frames()[0]
    vis = ap.vertex_visibility(res.mesh, sc.rig, fr)
    tex = ap.assign_texture(res.mesh, sc.rig, fr, vis, ap.cloud_weight_maps(res.clouds, sc.rig))
    assert np.all((tex.weights >= 0) & (tex.weights <= 1))
    assert np.all(tex.weights[~tex.visible] == 0)
    assert tex.untextured.mean() < 0.25
    back = ap.TexturedMesh.from_trimesh(tex.to_trimesh())
    assert np.allclose(back.weights, tex.weights) and np.array_equal(back.visible, tex.visible)


@given(st.floats(0.6, 1.5), st.floats(-0.1, 0.1), st.integers(0, 1000))
def test_fit_value_map_recovers_line_with_outliers(a, b, seed):
    r = np.random.default_rng(seed)
    va = r.uniform(0.1, 0.6, 300)
    vb = a * va + b + r.normal(0, 0.002, 300)
    out = r.random(300) < 0.3
    vb[out] = r.uniform(0, 1, out.sum())
    fa, fb = ap.fit_value_map((va, vb))
    assert fa == pytest.approx(a, abs=0.02) and fb == pytest.approx(b, abs=0.01)


def test_fit_value_map_rejects_degenerate_data():
    with pytest.raises(ap.InsufficientColorDiversity):
        ap.fit_value_map((np.zeros(5), np.zeros(5)))
    with pytest.raises(ap.InsufficientColorDiversity):
        ap.fit_value_map((np.full(50, 0.4), np.linspace(0, 1, 50)))


def test_affine_compose_and_invert():
    m, n = (1.2, 0.05), (0.8, -0.1)
    v = np.linspace(0, 1, 7)
    a, b = ap.compose_affine(m, n)
    assert np.allclose(a * v + b, m[0] * (n[0] * v + n[1]) + m[1])
    ai, bi = ap.invert_affine(m)
    assert np.allclose(ai * (m[0] * v + m[1]) + bi, v)


def test_chain_to_reference_composes_along_ring():
    # true value gains g_k, pair (i, j) maps i -> j by g_j / g_i
    g = {0: 1.0, 1: 0.9, 2: 1.1, 3: 0.95}
    pairwise = {(i, j): (g[j] / g[i], 0.0) for i, j in ap.ring_neighbours(list(g))}
    cc = ap.chain_to_reference(pairwise, 0)
    for k in g:
        assert cc.gains[k] == pytest.approx(g[0] / g[k])
        assert cc.offsets[k] == pytest.approx(0.0)
    with pytest.raises(ValueError):
        ap.chain_to_reference({(0, 1): (1.0, 0.0)}, 0, sensors=[0, 1, 2])


def test_color_correction_apply_and_roundtrip(tmp_path, rng):
    img = rng.integers(0, 200, (8, 9, 3)).astype(np.uint8)
    cc = ap.ColorCorrection({0: 1.0, 1: 1.2}, {0: 0.0, 1: 0.0}, 0)
    assert np.array_equal(cc.apply(img, 0), img)
    out = cc.apply(img, 1)
    assert np.allclose(ap.value_channel(out), np.clip(1.2 * ap.value_channel(img), 0, 1), atol=1.5 / 255)
    cc.save(tmp_path / "cc.json")
    back = ap.ColorCorrection.load(tmp_path / "cc.json")
    assert back.gains == cc.gains and back.offsets == cc.offsets and back.reference == 0


def test_mutual_closest_pairs():
    a = np.array([[0.0, 0, 0], [10, 0, 0], [100, 0, 0]])
    b = np.array([[1.0, 0, 0], [2, 0, 0], [11, 0, 0]])
    ia, ib = ap.mutual_closest(a, b, max_dist=20)
    assert list(zip(ia, ib)) == [(0, 0), (1, 2)]


def test_estimated_gains_match_synthetic_gains():
    sc = scene(n_frames=2)
    gofs = frames(n_frames=2)
    cc = ap.estimate_color_correction(gofs, sc.rig, reference=0)
    for k in sc.rig.reconstruction_ids:
        assert cc.gains[k] == pytest.approx(sc.gain(0) / sc.gain(k), abs=0.03)
        assert abs(cc.offsets[k]) < 0.03


def test_weight_map_zero_off_surface():
    sc = scene()
    fr = frames()[0][0]
    W = ap.weight_map(fr, sc.rig[0])
    assert np.all(W[~fr.foreground] == 0)
    assert np.all((W >= 0) & (W <= 1)) and W.max() > 0
    cloud = recon.build_cloud(fr, sc.rig[0])
    assert len(cloud.points) == int((W > 0).sum()) or len(cloud.points) >= int((W > 0).sum())
