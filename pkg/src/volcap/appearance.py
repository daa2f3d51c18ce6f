"""Multi-view texture weights for reconstructed meshes and HSV value-channel colour correction."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from skimage.color import hsv2rgb, rgb2hsv

from . import fileio
from .core import Camera, CameraRig, RgbdFrame, TriMesh, project_points
from .recon import OrientedCloud, build_cloud, confidence_weights

VIS_EPS_MM = 20.0
# value-channel inlier band; a few 8-bit quantisation steps
TAU_V = 0.01
UNTEXTURED_GRAY = (192, 192, 192)


class InsufficientColorDiversity(ValueError):
    """Too few colour pairs, or no spread in the source values, to fit a map."""


# ---------------------------------------------------------------------------
# visibility and texture weights


def _nearest_pixel(uv: np.ndarray, width: int, height: int):
    ok = np.all(np.isfinite(uv), axis=1)
    ij = np.zeros((len(uv), 2), dtype=np.int64)
    ij[ok] = np.rint(uv[ok]).astype(np.int64)
    ok &= (ij[:, 0] >= 0) & (ij[:, 0] < width) & (ij[:, 1] >= 0) & (ij[:, 1] < height)
    return ij, ok


def vertex_visibility(mesh: TriMesh, rig: CameraRig, frames: Sequence[RgbdFrame],
                      eps_mm: float = VIS_EPS_MM, sensors: Sequence[int] | None = None) -> np.ndarray:
    """Boolean ``(n_vertices, K)``: projection in bounds, on the foreground, depth within ``eps_mm``."""
    ids = range(len(rig)) if sensors is None else sensors
    vis = np.zeros((len(mesh.vertices), len(rig)), dtype=bool)
    for k in ids:
        cam, fr = rig[k], frames[k]
        if fr is None:
            continue
        uv, z = project_points(cam.depth, cam.pose, mesh.vertices)
        ij, ok = _nearest_pixel(uv, cam.depth.width, cam.depth.height)
        D = fr.depth[ij[:, 1], ij[:, 0]]
        F = fr.foreground[ij[:, 1], ij[:, 0]]
        vis[:, k] = ok & F & (np.abs(D - z) < eps_mm)
    return vis


def weight_map(frame: RgbdFrame, camera: Camera, discontinuity_mm: float = 50.0, radius: int = 10) -> np.ndarray:
    """Per-pixel confidence weights W_k(u) of a frame (0 off the surface)."""
    W = np.zeros(frame.depth.shape)
    if not frame.foreground.any():
        return W
    cloud = confidence_weights(build_cloud(frame, camera, discontinuity_mm), frame, camera, radius)
    W[cloud.pixels[:, 1], cloud.pixels[:, 0]] = cloud.weights
    return W


def cloud_weight_maps(clouds: Sequence[OrientedCloud], rig: CameraRig) -> dict[int, np.ndarray]:
    maps = {}
    for c in clouds:
        W = np.zeros(rig[c.sensor].depth.shape)
        W[c.pixels[:, 1], c.pixels[:, 0]] = c.weights
        maps[c.sensor] = W
    return maps


@dataclass(eq=False)
class TexturedMesh:
    """Mesh plus, per vertex and sensor, visibility, normalised RGB-image UV and blend weight."""

    mesh: TriMesh
    visible: np.ndarray        # (n, K) bool
    uv: np.ndarray             # (n, K, 2) in [0, 1]^2 (may fall outside for invisible views)
    weights: np.ndarray        # (n, K) >= 0, zero where invisible
    sensors: tuple[int, ...] = ()

    @property
    def untextured(self) -> np.ndarray:
        return ~(self.weights.sum(axis=1) > 0)

    def to_trimesh(self) -> TriMesh:
        """Mesh with per-view UV, weight and visibility channels attached."""
        n, K = self.weights.shape
        attrs = dict(self.mesh.attributes)
        attrs["uv"] = self.uv.reshape(n, 2 * K)
        attrs["tex_weight"] = self.weights
        attrs["visible"] = self.visible.astype(np.uint8)
        return TriMesh(self.mesh.vertices, self.mesh.faces, self.mesh.normals, attrs)

    @classmethod
    def from_trimesh(cls, mesh: TriMesh) -> "TexturedMesh":
        W = np.asarray(mesh.attributes["tex_weight"], dtype=float)
        if W.ndim == 1:
            W = W[:, None]
        n, K = W.shape
        vis = np.asarray(mesh.attributes["visible"]).reshape(n, K).astype(bool)
        uv = np.asarray(mesh.attributes["uv"], dtype=float).reshape(n, K, 2)
        base = TriMesh(mesh.vertices, mesh.faces, mesh.normals,
                       {k: v for k, v in mesh.attributes.items() if k not in ("uv", "tex_weight", "visible")})
        return cls(base, vis, uv, W, tuple(int(k) for k in np.flatnonzero(vis.any(axis=0))))


def rgb_uv(camera: Camera, X: np.ndarray) -> np.ndarray:
    """Normalised texture coordinates of world points in the colour image."""
    uv, _ = project_points(camera.rgb, camera.rgb_world_pose, X)
    return np.column_stack([(uv[:, 0] + 0.5) / camera.rgb.width, (uv[:, 1] + 0.5) / camera.rgb.height])


def assign_texture(mesh: TriMesh, rig: CameraRig, frames: Sequence[RgbdFrame], visibility: np.ndarray,
                   weight_maps: dict[int, np.ndarray] | None = None,
                   sensors: Sequence[int] | None = None) -> TexturedMesh:
    """Per-view UVs and blend weights; a sensor's weight is its W_k at the nearest depth pixel."""
    ids = tuple(rig.reconstruction_ids if sensors is None else sensors)
    n, K = len(mesh.vertices), len(rig)
    uv = np.zeros((n, K, 2))
    W = np.zeros((n, K))
    vis = np.zeros((n, K), dtype=bool)
    for k in ids:
        cam = rig[k]
        vis[:, k] = visibility[:, k]
        uv[:, k] = rgb_uv(cam, mesh.vertices)
        wm = weight_maps.get(k) if weight_maps is not None else None
        if wm is None:
            wm = weight_map(frames[k], cam)
        p, _ = project_points(cam.depth, cam.pose, mesh.vertices)
        ij, ok = _nearest_pixel(p, cam.depth.width, cam.depth.height)
        wk = np.where(ok, wm[ij[:, 1], ij[:, 0]], 0.0)
        W[:, k] = np.where(vis[:, k], wk, 0.0)
    uv = np.nan_to_num(uv, nan=0.0)
    return TexturedMesh(mesh, vis, uv, W, ids)


def sample_bilinear(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear lookup at continuous pixel-centre coordinates, edge-clamped."""
    img = np.asarray(image, dtype=float)
    H, W = img.shape[:2]
    x = np.clip(np.nan_to_num(x, nan=0.0), 0, W - 1)
    y = np.clip(np.nan_to_num(y, nan=0.0), 0, H - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[..., None] if img.ndim == 3 else x - x0
    fy = (y - y0)[..., None] if img.ndim == 3 else y - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def sample_uv(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    H, W = image.shape[:2]
    return sample_bilinear(image, uv[..., 0] * W - 0.5, uv[..., 1] * H - 0.5)


def vertex_colors(tex: TexturedMesh, images: dict[int, np.ndarray]) -> np.ndarray:
    """Equal-weight average over the visible views; untextured vertices are light gray."""
    n = len(tex.mesh.vertices)
    acc = np.zeros((n, 3))
    cnt = np.zeros(n)
    for k in tex.sensors:
        if k not in images:
            continue
        v = tex.visible[:, k]
        if v.any():
            acc[v] += sample_uv(images[k], tex.uv[v, k])
            cnt[v] += 1
    col = np.tile(np.asarray(UNTEXTURED_GRAY, dtype=float), (n, 1))
    ok = (cnt > 0) & ~tex.untextured
    col[ok] = acc[ok] / cnt[ok, None]
    return col


# ---------------------------------------------------------------------------
# colour correction


@dataclass(eq=False)
class ColorPairs:
    """Colour correspondences between two sensors, accumulated over frames."""

    colors_a: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors_b: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    index_a: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    index_b: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.index_a)

    def extend(self, other: "ColorPairs") -> "ColorPairs":
        self.colors_a = np.vstack([self.colors_a, other.colors_a])
        self.colors_b = np.vstack([self.colors_b, other.colors_b])
        self.index_a = np.concatenate([self.index_a, other.index_a])
        self.index_b = np.concatenate([self.index_b, other.index_b])
        return self

    def swapped(self) -> "ColorPairs":
        return ColorPairs(self.colors_b, self.colors_a, self.index_b, self.index_a)


def mutual_closest(points_a: np.ndarray, points_b: np.ndarray, max_dist: float = 20.0):
    """Index pairs that are each other's nearest neighbour and closer than ``max_dist``."""
    if len(points_a) == 0 or len(points_b) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    dab, jab = cKDTree(points_b).query(points_a)
    _, jba = cKDTree(points_a).query(points_b)
    i = np.arange(len(points_a))
    ok = (jba[jab] == i) & (dab < max_dist)
    return i[ok], jab[ok]


def find_color_pairs(points_a: np.ndarray, points_b: np.ndarray, colors_a: np.ndarray, colors_b: np.ndarray,
                     max_dist: float = 20.0, accumulate: ColorPairs | None = None) -> ColorPairs:
    """Mutual-closest point pairs under ``max_dist`` with their colours attached.

    Pass the previous result as ``accumulate`` to gather pairs over frames.
    """
    ia, ib = mutual_closest(points_a, points_b, max_dist)
    pairs = ColorPairs(np.asarray(colors_a, dtype=float)[ia].reshape(-1, 3),
                       np.asarray(colors_b, dtype=float)[ib].reshape(-1, 3), ia, ib)
    return accumulate.extend(pairs) if accumulate is not None else pairs


def cloud_colors(cloud: OrientedCloud, frame: RgbdFrame, camera: Camera) -> np.ndarray:
    """RGB of each cloud point sampled in the sensor's colour image."""
    uv, _ = project_points(camera.rgb, camera.rgb_world_pose, cloud.points)
    return sample_bilinear(frame.color, uv[:, 0], uv[:, 1])


def value_channel(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=float).reshape(-1, 1, 3) / 255.0
    return rgb2hsv(rgb)[:, 0, 2]


def fit_value_map(pairs: ColorPairs | tuple[np.ndarray, np.ndarray], iterations: int = 1000, tau: float = TAU_V,
                  seed: int = 0) -> tuple[float, float]:
    """Robust line ``v_b ~ a * v_a + b`` on HSV value data: RANSAC, then least squares on inliers."""
    if isinstance(pairs, ColorPairs):
        va, vb = value_channel(pairs.colors_a), value_channel(pairs.colors_b)
    else:
        va, vb = (np.asarray(p, dtype=float) for p in pairs)
    if len(va) < 10:
        raise InsufficientColorDiversity(f"need at least 10 colour pairs, got {len(va)}")
    if np.ptp(va) < 1e-6:
        raise InsufficientColorDiversity("source values are constant")
    rng = np.random.default_rng(seed)
    best = None
    best_count = -1
    n = len(va)
    for _ in range(iterations):
        i, j = rng.choice(n, 2, replace=False)
        dx = va[j] - va[i]
        if abs(dx) < 1e-9:
            continue
        a = (vb[j] - vb[i]) / dx
        b = vb[i] - a * va[i]
        inl = np.abs(a * va + b - vb) < tau
        c = int(inl.sum())
        if c > best_count:
            best_count, best = c, inl
    if best is None or best.sum() < 2 or np.ptp(va[best]) < 1e-9:
        raise InsufficientColorDiversity("no consistent line through the value data")
    a, b = np.polyfit(va[best], vb[best], 1)
    return float(a), float(b)


def compose_affine(outer: tuple[float, float], inner: tuple[float, float]) -> tuple[float, float]:
    """``outer ∘ inner`` for maps ``v -> a*v + b``."""
    a1, b1 = outer
    a2, b2 = inner
    return (a1 * a2, a1 * b2 + b1)


def invert_affine(m: tuple[float, float]) -> tuple[float, float]:
    a, b = m
    return (1.0 / a, -b / a)


@dataclass(eq=False)
class ColorCorrection:
    """Per-sensor affine maps taking a sensor's value channel onto the reference sensor's."""

    gains: dict[int, float]
    offsets: dict[int, float]
    reference: int = 0

    def map(self, k: int) -> tuple[float, float]:
        return (self.gains.get(k, 1.0), self.offsets.get(k, 0.0))

    def apply(self, image: np.ndarray, k: int) -> np.ndarray:
        a, b = self.map(k)
        if a == 1.0 and b == 0.0:
            return np.asarray(image, dtype=np.uint8)
        hsv = rgb2hsv(np.asarray(image, dtype=np.uint8))
        hsv[..., 2] = np.clip(a * hsv[..., 2] + b, 0.0, 1.0)
        return np.clip(np.rint(hsv2rgb(hsv) * 255), 0, 255).astype(np.uint8)

    def to_dict(self) -> dict:
        return {"reference": self.reference,
                "sensors": {str(k): {"a": self.gains[k], "b": self.offsets[k]} for k in sorted(self.gains)}}

    @classmethod
    def from_dict(cls, d: dict) -> "ColorCorrection":
        s = {int(k): v for k, v in d["sensors"].items()}
        return cls({k: float(v["a"]) for k, v in s.items()}, {k: float(v["b"]) for k, v in s.items()},
                   int(d["reference"]))

    @classmethod
    def identity(cls, sensors: Sequence[int], reference: int = 0) -> "ColorCorrection":
        return cls({k: 1.0 for k in sensors}, {k: 0.0 for k in sensors}, reference)

    def save(self, path: str | Path) -> None:
        fileio.write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "ColorCorrection":
        return cls.from_dict(fileio.read_json(path))


def chain_to_reference(pairwise: dict[tuple[int, int], tuple[float, float]], reference: int,
                       sensors: Sequence[int] | None = None) -> ColorCorrection:
    """Compose pairwise maps along the shortest chain from every sensor to the reference.

    ``pairwise[(k1, k2)]`` maps sensor k1's values onto sensor k2's; edges are
    usable in both directions through the inverse map.
    """
    nodes = set(sensors) if sensors is not None else {k for e in pairwise for k in e} | {reference}
    adj: dict[int, list[tuple[int, tuple[float, float]]]] = {k: [] for k in nodes}
    for (k1, k2), m in sorted(pairwise.items()):
        if m[0] <= 0:
            raise ValueError(f"map {k1}->{k2} has non-positive gain")
        adj.setdefault(k1, []).append((k2, m))
        adj.setdefault(k2, []).append((k1, invert_affine(m)))
    # to_ref[k] maps sensor k's values into the reference's
    to_ref = {reference: (1.0, 0.0)}
    queue = deque([reference])
    while queue:
        cur = queue.popleft()
        for nb, m in sorted(adj.get(cur, []), key=lambda e: e[0]):
            if nb in to_ref:
                continue
            # m maps cur -> nb, so nb -> ref is to_ref[cur] ∘ inverse(m)
            to_ref[nb] = compose_affine(to_ref[cur], invert_affine(m))
            queue.append(nb)
    missing = sorted(nodes - set(to_ref))
    if missing:
        raise ValueError(f"sensors {missing} are not connected to reference {reference}")
    return ColorCorrection({k: to_ref[k][0] for k in sorted(to_ref)}, {k: to_ref[k][1] for k in sorted(to_ref)},
                           reference)


def ring_neighbours(sensors: Sequence[int]) -> list[tuple[int, int]]:
    s = list(sensors)
    if len(s) < 2:
        return []
    if len(s) == 2:
        return [(s[0], s[1])]
    return [(s[i], s[(i + 1) % len(s)]) for i in range(len(s))]


def estimate_color_correction(gofs: Sequence[Sequence[RgbdFrame]], rig: CameraRig, reference: int = 0,
                              sensors: Sequence[int] | None = None, max_dist: float = 20.0,
                              seed: int = 0) -> ColorCorrection:
    """Colour correction from mutual-closest point pairs of adjacent sensors over several frames."""
    ids = list(rig.reconstruction_ids if sensors is None else sensors)
    acc = {e: ColorPairs() for e in ring_neighbours(ids)}
    for frames in gofs:
        clouds, colors = {}, {}
        for k in ids:
            if frames[k] is None or not frames[k].foreground.any():
                continue
            clouds[k] = build_cloud(frames[k], rig[k])
            colors[k] = cloud_colors(clouds[k], frames[k], rig[k])
        for (a, b), pairs in acc.items():
            if a in clouds and b in clouds:
                find_color_pairs(clouds[a].points, clouds[b].points, colors[a], colors[b], max_dist, pairs)
    maps = {}
    for e, pairs in acc.items():
        try:
            maps[e] = fit_value_map(pairs, seed=seed)
        except InsufficientColorDiversity:
            continue
    return chain_to_reference(maps, reference, ids)
