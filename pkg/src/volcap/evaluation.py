"""Objective evaluation: software rendering of a reconstruction into every view and four image/geometry metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import fileio, kernels
from .appearance import UNTEXTURED_GRAY, ColorCorrection, TexturedMesh, sample_bilinear, vertex_colors
from .core import Camera, CameraRig, Intrinsics, Pose, RgbdFrame, TriMesh, backproject

MODES = ("uv-blend", "color-per-vertex")

# structural-similarity constants on the 8-bit scale
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2
SSIM_C3 = SSIM_C2 / 2
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5           # 11 x 11 window
WMS3IM_ALPHA = (0.0, 0.0, 0.1333)
WMS3IM_BETA = (0.0448, 0.3001, 0.1333)
WMS3IM_GAMMA = (0.0448, 0.3001, 0.1333)


class UndefinedMetric(ValueError):
    """Metric has no value for the inputs (for example an empty mask)."""


# ---------------------------------------------------------------------------
# rendering


@dataclass(eq=False)
class RenderedView:
    """Depth and silhouette in the depth camera, colour and its coverage in the colour camera."""

    depth: np.ndarray            # (H, W) mm, inf where empty
    silhouette: np.ndarray       # (H, W) bool
    color: np.ndarray            # (Hc, Wc, 3) uint8
    color_mask: np.ndarray       # (Hc, Wc) bool


def raster_mesh(mesh: TriMesh, intr: Intrinsics, pose: Pose, near: float = 1.0):
    """Z-buffer the mesh into one camera: ``(depth, triangle id, perspective-correct barycentrics)``."""
    if mesh.is_empty:
        return (np.full(intr.shape, np.inf), np.full(intr.shape, -1, dtype=np.int64),
                np.zeros(intr.shape + (3,)))
    Xc = (mesh.vertices - pose.t) @ pose.R
    z = np.ascontiguousarray(Xc[:, 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.ascontiguousarray(intr.fx * Xc[:, 0] / z + intr.cx)
        y = np.ascontiguousarray(intr.fy * Xc[:, 1] / z + intr.cy)
    return kernels.rasterize(x, y, z, np.ascontiguousarray(mesh.faces, dtype=np.int64),
                             intr.width, intr.height, near)


def _interp(values: np.ndarray, faces: np.ndarray, tri: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """Barycentric interpolation of per-vertex ``values`` at covered pixels (flattened)."""
    f = faces[tri]
    out = bary[:, 0, None] * values[f[:, 0]]
    out += bary[:, 1, None] * values[f[:, 1]]
    out += bary[:, 2, None] * values[f[:, 2]]
    return out


def rasterize(mesh: TexturedMesh | TriMesh, camera: Camera, textures: dict[int, np.ndarray] | None = None,
              color_correction: ColorCorrection | None = None, mode: str = "uv-blend") -> RenderedView:
    """Render ``mesh`` into ``camera``.

    ``uv-blend`` samples each source view's colour image at the interpolated
    per-view UV and blends with the interpolated, per-pixel normalised weights.
    ``color-per-vertex`` interpolates equal-weight per-vertex colours.
    Pixels with no blend weight are light gray.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    tex = mesh if isinstance(mesh, TexturedMesh) else None
    tm = tex.mesh if tex is not None else mesh
    depth, _, _ = raster_mesh(tm, camera.depth, camera.pose)
    sil = np.isfinite(depth)
    cdepth, ctri, cbary = raster_mesh(tm, camera.rgb, camera.rgb_world_pose)
    cmask = ctri >= 0
    color = np.zeros(camera.rgb.shape + (3,), dtype=np.uint8)
    if not cmask.any():
        return RenderedView(depth, sil, color, cmask)
    tri = ctri[cmask]
    bary = cbary[cmask]
    gray = np.asarray(UNTEXTURED_GRAY, dtype=float)
    if tex is None or not textures:
        rgb = np.tile(gray, (len(tri), 1))
    else:
        images = {k: (color_correction.apply(img, k) if color_correction is not None else np.asarray(img))
                  for k, img in textures.items()}
        if mode == "color-per-vertex":
            rgb = _interp(vertex_colors(tex, images), tm.faces, tri, bary)
        else:
            acc = np.zeros((len(tri), 3))
            wsum = np.zeros(len(tri))
            for k in tex.sensors:
                if k not in images:
                    continue
                w = _interp(tex.weights[:, k:k + 1], tm.faces, tri, bary)[:, 0]
                use = w > 0
                if not use.any():
                    continue
                uv = _interp(tex.uv[:, k], tm.faces, tri[use], bary[use])
                H, W = images[k].shape[:2]
                acc[use] += w[use, None] * sample_bilinear(images[k], uv[:, 0] * W - 0.5, uv[:, 1] * H - 0.5)
                wsum[use] += w[use]
            rgb = np.tile(gray, (len(tri), 1))
            ok = wsum > 0
            rgb[ok] = acc[ok] / wsum[ok, None]
    color[cmask] = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return RenderedView(depth, sil, color, cmask)


def depth_points(depth: np.ndarray, intr: Intrinsics, pose: Pose, mask: np.ndarray | None = None) -> np.ndarray:
    """World points of the valid (finite, positive) pixels of a depth image."""
    d = np.asarray(depth, dtype=float)
    ok = np.isfinite(d) & (d > 0)
    if mask is not None:
        ok &= mask
    v, u = np.nonzero(ok)
    if len(u) == 0:
        return np.zeros((0, 3))
    return backproject(intr, pose, np.column_stack([u, v]).astype(float), d[v, u])


# ---------------------------------------------------------------------------
# metrics


def vre(S_r: np.ndarray, S_g: np.ndarray) -> float:
    """Silhouette disagreement |xor| / |or|; 0 when both masks are empty."""
    S_r = np.asarray(S_r, dtype=bool)
    S_g = np.asarray(S_g, dtype=bool)
    if S_r.shape != S_g.shape:
        raise ValueError(f"mask shapes differ: {S_r.shape} vs {S_g.shape}")
    union = np.count_nonzero(S_r | S_g)
    if union == 0:
        return 0.0
    return np.count_nonzero(S_r ^ S_g) / union


def hausdorff2d(S_r: np.ndarray, S_g: np.ndarray) -> float:
    """Symmetric Hausdorff distance in pixels between two pixel sets, via distance transforms."""
    S_r = np.asarray(S_r, dtype=bool)
    S_g = np.asarray(S_g, dtype=bool)
    if S_r.shape != S_g.shape:
        raise ValueError(f"mask shapes differ: {S_r.shape} vs {S_g.shape}")
    if not S_r.any() or not S_g.any():
        raise UndefinedMetric("Hausdorff distance needs two nonempty masks")
    d_to_g = ndimage.distance_transform_edt(~S_g)
    d_to_r = ndimage.distance_transform_edt(~S_r)
    return float(max(d_to_g[S_r].max(), d_to_r[S_g].max()))


def cp_rmse(ground: np.ndarray, recon: np.ndarray) -> float:
    """RMS over ground points of the distance to the nearest reconstructed point."""
    ground = np.asarray(ground, dtype=float).reshape(-1, 3)
    recon = np.asarray(recon, dtype=float).reshape(-1, 3)
    if len(ground) == 0 or len(recon) == 0:
        raise UndefinedMetric("CP-RMSE needs two nonempty clouds")
    d, _ = cKDTree(recon).query(ground)
    return float(np.sqrt(np.mean(d * d)))


def luma(rgb: np.ndarray) -> np.ndarray:
    """Rec.601 luma on the 0..255 scale."""
    x = np.asarray(rgb, dtype=float)
    if x.ndim == 2:
        return x
    return 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]


def _gauss(x: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(x, SSIM_SIGMA, mode="reflect", radius=SSIM_RADIUS)


def ssim_terms(x: np.ndarray, y: np.ndarray):
    """Per-pixel luminance, contrast and structure maps with Gaussian-weighted local statistics."""
    mx, my = _gauss(x), _gauss(y)
    vx = np.maximum(_gauss(x * x) - mx * mx, 0.0)
    vy = np.maximum(_gauss(y * y) - my * my, 0.0)
    cxy = _gauss(x * y) - mx * my
    sx, sy = np.sqrt(vx), np.sqrt(vy)
    l = (2 * mx * my + SSIM_C1) / (mx * mx + my * my + SSIM_C1)
    c = (2 * sx * sy + SSIM_C2) / (vx + vy + SSIM_C2)
    s = (cxy + SSIM_C3) / (sx * sy + SSIM_C3)
    return l, c, s


def silhouette_weights(S: np.ndarray) -> np.ndarray:
    """w(u): number of silhouette pixels in the 11 x 11 neighbourhood of u."""
    k = np.ones((2 * SSIM_RADIUS + 1,) * 2, dtype=np.int64)
    return ndimage.correlate(S.astype(np.int64), k, mode="constant", cval=0).astype(float)


def downsample(img: np.ndarray) -> np.ndarray:
    """2 x 2 box average then decimation (odd trailing row/column dropped)."""
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    x = img[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def downsample_mask(S: np.ndarray) -> np.ndarray:
    h, w = S.shape[0] // 2 * 2, S.shape[1] // 2 * 2
    x = S[:h, :w]
    return x[0::2, 0::2] | x[1::2, 0::2] | x[0::2, 1::2] | x[1::2, 1::2]


def _spow(x: float, e: float) -> float:
    # sign-preserving power: the pooled structure term may be negative
    return math.copysign(abs(x) ** e, x) if e != 0 else 1.0


def wms3im(rendered: np.ndarray, ground: np.ndarray, S_r: np.ndarray, scales: int = 3) -> float:
    """Weighted multiscale structural similarity pooled over the rendered silhouette."""
    x, y = luma(rendered), luma(ground)
    S = np.asarray(S_r, dtype=bool)
    if x.shape != y.shape or x.shape != S.shape:
        raise ValueError("image and mask dimensions differ")
    if not S.any():
        raise UndefinedMetric("WMS3IM needs a nonempty silhouette")
    score = 1.0
    for j in range(scales):
        if j:
            x, y, S = downsample(x), downsample(y), downsample_mask(S)
        l, c, s = ssim_terms(x, y)
        w = silhouette_weights(S)[S]
        wsum = w.sum()
        lj, cj, sj = ((t[S] * w).sum() / wsum for t in (l, c, s))
        score *= _spow(lj, WMS3IM_ALPHA[j]) * _spow(cj, WMS3IM_BETA[j]) * _spow(sj, WMS3IM_GAMMA[j])
    return float(score)


# ---------------------------------------------------------------------------
# sequence evaluation


METRIC_KEYS = ("vre", "hausdorff_px", "cprmse_mm", "wms3im")


@dataclass(eq=False)
class MetricsReport:
    """One row per (frame, sensor) plus means; NaN marks undefined values and gaps."""

    rows: list[dict] = field(default_factory=list)
    reconstruction_ids: tuple[int, ...] = ()
    heldout_ids: tuple[int, ...] = ()

    def values(self, key: str, sensors: Sequence[int] | None = None, frame: int | None = None) -> np.ndarray:
        return np.array([r[key] for r in self.rows if (sensors is None or r["sensor"] in sensors)
                         and (frame is None or r["frame"] == frame)], dtype=float)

    def mean(self, key: str, sensors: Sequence[int] | None = None, frame: int | None = None) -> float:
        v = self.values(key, sensors, frame)
        v = v[np.isfinite(v)]
        return float(v.mean()) if len(v) else float("nan")

    def aggregates(self) -> dict:
        groups = {"all": None, "reconstruction": self.reconstruction_ids, "heldout": self.heldout_ids}
        out = {name: {k: self.mean(k, ids) for k in METRIC_KEYS} for name, ids in groups.items()
               if ids is None or len(ids)}
        frames = sorted({r["frame"] for r in self.rows})
        out["per_frame"] = {str(n): {k: self.mean(k, frame=n) for k in METRIC_KEYS} for n in frames}
        out["gaps"] = [[r["frame"], r["sensor"]] for r in self.rows if r.get("gap")]
        return out

    def write_csv(self, path: str | Path) -> None:
        fileio.write_csv(path, ["frame", "sensor", "VRE", "H_px", "CPRMSE_mm", "WMS3IM"],
                         [[r["frame"], r["sensor"]] + [_fmt(r[k]) for k in METRIC_KEYS] for r in self.rows])

    def write_json(self, path: str | Path) -> None:
        fileio.write_json(path, _json_safe(self.aggregates()))


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else repr(float(x))


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def evaluate_view(mesh: TexturedMesh | TriMesh, frame: RgbdFrame, camera: Camera,
                  textures: dict[int, np.ndarray] | None = None, color_correction: ColorCorrection | None = None,
                  mode: str = "uv-blend", sensor: int = 0, metrics: Sequence[str] = METRIC_KEYS) -> dict:
    """All requested metrics of one rendered view against its captured frame."""
    view = rasterize(mesh, camera, textures, color_correction, mode)
    row = {k: float("nan") for k in METRIC_KEYS}
    if "vre" in metrics:
        row["vre"] = vre(view.silhouette, frame.foreground)
    if "hausdorff_px" in metrics:
        try:
            row["hausdorff_px"] = hausdorff2d(view.silhouette, frame.foreground)
        except UndefinedMetric:
            pass
    if "cprmse_mm" in metrics:
        try:
            row["cprmse_mm"] = cp_rmse(depth_points(frame.depth, camera.depth, camera.pose, frame.foreground),
                                       depth_points(view.depth, camera.depth, camera.pose))
        except UndefinedMetric:
            pass
    if "wms3im" in metrics:
        ground = frame.color
        if color_correction is not None and sensor in color_correction.gains:
            ground = color_correction.apply(ground, sensor)
        try:
            row["wms3im"] = wms3im(view.color, ground, view.color_mask)
        except UndefinedMetric:
            pass
    return row


def evaluate_sequence(meshes: Sequence[TexturedMesh | TriMesh | None], frames: Sequence[Sequence[RgbdFrame | None]],
                      rig: CameraRig, color_correction: ColorCorrection | None = None, mode: str = "uv-blend",
                      sensors: Sequence[int] | None = None, metrics: Sequence[str] = METRIC_KEYS,
                      frame_ids: Sequence[int] | None = None) -> MetricsReport:
    """Render every mesh into every view (participating and held out) and score it.

    ``frames[n][k]`` is sensor k's capture for mesh n; texture sources are the
    participating sensors' colour images of the same frame set. Missing meshes
    or frames become gap rows of NaN.
    """
    ids = list(range(len(rig)) if sensors is None else sensors)
    report = MetricsReport(reconstruction_ids=tuple(rig.reconstruction_ids), heldout_ids=tuple(rig.heldout_ids))
    for n, mesh in enumerate(meshes):
        fid = n if frame_ids is None else frame_ids[n]
        fr = frames[n] if n < len(frames) else None
        textures = None
        if fr is not None:
            textures = {k: fr[k].color for k in rig.reconstruction_ids if k < len(fr) and fr[k] is not None}
        for k in ids:
            frame = fr[k] if fr is not None and k < len(fr) else None
            if mesh is None or frame is None:
                report.rows.append({"frame": fid, "sensor": k, "gap": True, **{m: float("nan") for m in METRIC_KEYS}})
                continue
            row = evaluate_view(mesh, frame, rig[k], textures, color_correction, mode, k, metrics)
            report.rows.append({"frame": fid, "sensor": k, "gap": False, **row})
    return report
