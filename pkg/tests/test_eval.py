import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.distance import cdist

from volcap import appearance as ap, evaluation as ev
from conftest import frames, reconstruction, scene
from oracles import hausdorff_brute, random_pair, wms3im_naive


# ---------------------------------------------------------------------------
# silhouette metrics


@given(st.integers(0, 10_000))
def test_vre_properties(seed):
    r = np.random.default_rng(seed)
    A = r.random((12, 15)) < 0.4
    B = r.random((12, 15)) < 0.4
    v = ev.vre(A, B)
    assert 0 <= v <= 1 and v == ev.vre(B, A)
    assert ev.vre(A, A) == 0
    assert ev.vre(A, ~A) == (1.0 if (A | ~A).any() else 0.0)


def test_vre_empty_masks_is_zero():
    Z = np.zeros((4, 4), dtype=bool)
    assert ev.vre(Z, Z) == 0.0
    with pytest.raises(ValueError):
        ev.vre(Z, np.zeros((3, 4), dtype=bool))


@given(st.integers(0, 10_000))
def test_hausdorff_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    A = r.random((14, 17)) < 0.15
    B = r.random((14, 17)) < 0.15
    A[0, 0] = B[-1, -1] = True
    assert ev.hausdorff2d(A, B) == pytest.approx(hausdorff_brute(A, B))


def body_mask():
    S = np.zeros((120, 100), dtype=bool)
    S[30:90, 35:65] = True            # torso
    S[40:46, 65:90] = True            # limb, 25 px long
    return S


def test_hausdorff_erased_limb():
    S = body_mask()
    R = S.copy()
    R[40:46, 65:90] = False
    h = ev.hausdorff2d(R, S)
    assert abs(h - 25) <= 1 and h == pytest.approx(hausdorff_brute(R, S))


@pytest.mark.parametrize("rho", [3, 6, 10])
def test_hausdorff_hole(rho):
    S = body_mask()
    yy, xx = np.mgrid[:S.shape[0], :S.shape[1]]
    R = S & ((yy - 60) ** 2 + (xx - 50) ** 2 > rho * rho)
    h = ev.hausdorff2d(R, S)
    assert abs(h - rho) <= 1 and h == pytest.approx(hausdorff_brute(R, S))


def test_hausdorff_undefined_for_empty():
    with pytest.raises(ev.UndefinedMetric):
        ev.hausdorff2d(np.zeros((3, 3), bool), np.ones((3, 3), bool))


@given(st.integers(0, 10_000))
def test_cp_rmse_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    G = r.normal(size=(40, 3)) * 100
    R = r.normal(size=(55, 3)) * 100
    d = cdist(G, R).min(axis=1)
    assert ev.cp_rmse(G, R) == pytest.approx(math.sqrt((d * d).mean()))
    assert ev.cp_rmse(G, G) == 0


def test_cp_rmse_is_directed():
    G = np.zeros((1, 3))
    R = np.array([[0.0, 0, 0], [100, 0, 0]])
    assert ev.cp_rmse(G, R) == 0 and ev.cp_rmse(R, G) == pytest.approx(100 / math.sqrt(2))
    with pytest.raises(ev.UndefinedMetric):
        ev.cp_rmse(np.zeros((0, 3)), R)


# ---------------------------------------------------------------------------
# WMS3IM


@pytest.mark.parametrize("seed", range(4))
def test_wms3im_matches_naive_windows(seed):
    a, b, S = random_pair(seed)
    assert ev.wms3im(a, b, S) == pytest.approx(wms3im_naive(a, b, S), abs=1e-6)


def test_wms3im_identical_is_one(rng):
    img = rng.integers(0, 256, (32, 40, 3)).astype(np.uint8)
    S = np.zeros((32, 40), dtype=bool)
    S[5:25, 8:30] = True
    assert ev.wms3im(img, img, S) == pytest.approx(1.0, abs=1e-12)


def test_wms3im_decreases_with_noise(rng):
    img = rng.integers(0, 256, (32, 40, 3)).astype(np.uint8)
    S = np.ones((32, 40), dtype=bool)
    noisy = [np.clip(img + rng.normal(0, s, img.shape), 0, 255).astype(np.uint8) for s in (5, 30, 80)]
    v = [ev.wms3im(n, img, S) for n in noisy]
    assert 1 > v[0] > v[1] > v[2]


def test_wms3im_errors():
    img = np.zeros((16, 16, 3), dtype=np.uint8)
    with pytest.raises(ev.UndefinedMetric):
        ev.wms3im(img, img, np.zeros((16, 16), bool))
    with pytest.raises(ValueError):
        ev.wms3im(img, img[:8], np.ones((16, 16), bool))


def test_published_exponents():
    assert ev.WMS3IM_ALPHA == (0.0, 0.0, 0.1333)
    assert ev.WMS3IM_BETA == ev.WMS3IM_GAMMA == (0.0448, 0.3001, 0.1333)


# ---------------------------------------------------------------------------
# rendering and sequences


def _textured(r=6):
    res = reconstruction(r)
    sc = scene()
    fr = frames()[0]
    vis = ap.vertex_visibility(res.mesh, sc.rig, fr)
    return ap.assign_texture(res.mesh, sc.rig, fr, vis, ap.cloud_weight_maps(res.clouds, sc.rig)), sc, fr


def test_render_silhouette_matches_capture():
    tex, sc, fr = _textured()
    for k in range(len(sc.rig)):
        view = ev.rasterize(tex, sc.rig[k], {i: fr[i].color for i in sc.rig.reconstruction_ids})
        assert ev.vre(view.silhouette, fr[k].foreground) < 0.2
        assert np.all(np.isinf(view.depth[~view.silhouette]))


@pytest.mark.parametrize("mode", ev.MODES)
def test_render_modes_color_foreground(mode):
    tex, sc, fr = _textured()
    textures = {i: fr[i].color for i in sc.rig.reconstruction_ids}
    view = ev.rasterize(tex, sc.rig[4], textures, mode=mode)
    assert view.color_mask.any()
    assert np.all(view.color[~view.color_mask] == 0)
    gray = np.all(view.color[view.color_mask] == ap.UNTEXTURED_GRAY, axis=1)
    assert gray.mean() < 0.5


def test_untextured_render_is_gray():
    tex, sc, _ = _textured()
    view = ev.rasterize(tex.mesh, sc.rig[0])
    assert np.all(view.color[view.color_mask] == ap.UNTEXTURED_GRAY)
    with pytest.raises(ValueError):
        ev.rasterize(tex, sc.rig[0], mode="phong")


def test_evaluate_sequence_rows_and_gaps(tmp_path):
    tex, sc, fr = _textured()
    rep = ev.evaluate_sequence([tex, None], [fr, fr], sc.rig)
    assert len(rep.rows) == 2 * len(sc.rig)
    gaps = [r for r in rep.rows if r["gap"]]
    assert len(gaps) == len(sc.rig) and all(r["frame"] == 1 for r in gaps)
    ok = [r for r in rep.rows if not r["gap"]]
    assert all(np.isfinite(r[k]) for r in ok for k in ev.METRIC_KEYS)
    agg = rep.aggregates()
    assert set(agg) >= {"all", "reconstruction", "heldout", "per_frame", "gaps"}
    rep.write_csv(tmp_path / "m.csv")
    rep.write_json(tmp_path / "m.json")
    text = (tmp_path / "m.csv").read_text().splitlines()
    assert text[0] == "frame,sensor,VRE,H_px,CPRMSE_mm,WMS3IM" and len(text) == 1 + 2 * len(sc.rig)
    assert "nan" in text[-1]
