"""Sensor calibration: depth-to-colour projection fit and sensor-to-anchor rigid alignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import rq
from scipy.optimize import least_squares
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from . import fileio
from .core import CameraRig, Intrinsics, Pose, RgbdFrame, TriMesh

log = logging.getLogger(__name__)

RANSAC_THRESHOLD_MM = 30.0
RANSAC_ITERATIONS = 500
RANSAC_MIN_MATCHES = 10


class InsufficientCorrespondences(ValueError):
    """Too few usable correspondences survive filtering."""


class DegenerateConfiguration(ValueError):
    """Correspondence geometry does not determine the transform (collinear or coplanar)."""


@dataclass(eq=False)
class Correspondences3D3D:
    """Sensor-frame points paired with anchor-model points, both in mm."""

    sensor: np.ndarray
    model: np.ndarray

    def __post_init__(self):
        self.sensor = np.asarray(self.sensor, dtype=float).reshape(-1, 3)
        self.model = np.asarray(self.model, dtype=float).reshape(-1, 3)
        if len(self.sensor) != len(self.model):
            raise ValueError("sensor and model point counts differ")
        if len(self.sensor) < 3:
            raise InsufficientCorrespondences(f"need at least 3 point pairs, got {len(self.sensor)}")
        if not (np.all(np.isfinite(self.sensor)) and np.all(np.isfinite(self.model))):
            raise ValueError("correspondences must be finite")

    def __len__(self) -> int:
        return len(self.sensor)

    def subset(self, idx) -> "Correspondences3D3D":
        return Correspondences3D3D(self.sensor[idx], self.model[idx])


@dataclass(eq=False)
class Correspondences3D2D:
    """Points in the depth-camera frame paired with their colour-image pixels."""

    points: np.ndarray
    pixels: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        if len(self.points) != len(self.pixels):
            raise ValueError("point and pixel counts differ")
        if len(self.points) < 6:
            raise InsufficientCorrespondences(f"need at least 6 point-pixel pairs, got {len(self.points)}")
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.pixels))):
            raise ValueError("correspondences must be finite")

    def __len__(self) -> int:
        return len(self.points)


# ---------------------------------------------------------------------------
# depth accumulation and match lifting


def accumulate_depth(frames: Sequence[RgbdFrame | np.ndarray]) -> np.ndarray:
    """Pixelwise median over the frames' valid (positive) depths; 0 where none is valid."""
    if len(frames) == 0:
        raise ValueError("accumulate_depth needs at least one frame")
    stack = np.stack([np.asarray(f.depth if isinstance(f, RgbdFrame) else f, dtype=float) for f in frames])
    valid = stack > 0
    out = np.zeros(stack.shape[1:])
    any_valid = valid.any(axis=0)
    if any_valid.any():
        masked = np.where(valid, stack, np.nan)
        out[any_valid] = np.nanmedian(masked[:, any_valid], axis=0)
    return out


def read_matches(path: str | Path) -> dict[int, np.ndarray]:
    """``k, u_x, u_y, um_x, um_y`` rows grouped per sensor as ``(J, 4)`` arrays."""
    out: dict[int, list] = {}
    for row in fileio.read_csv(path):
        try:
            out.setdefault(int(row["k"]), []).append([float(row[c]) for c in ("u_x", "u_y", "um_x", "um_y")])
        except (KeyError, ValueError) as exc:
            raise fileio.DataError(f"{path}: malformed match row {row}") from exc
    return {k: np.array(v).reshape(-1, 4) for k, v in sorted(out.items())}


def sample_depth(depth: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Depth at sub-pixel positions by bilinear interpolation of inverse depth.

    Inverse depth is affine in the image over a plane, so planar surfaces are
    reproduced exactly. Positions whose four neighbours are not all valid get 0.
    """
    D = np.asarray(depth, dtype=float)
    H, W = D.shape
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    x, y = uv[:, 0], uv[:, 1]
    out = np.zeros(len(uv))
    ok = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (y >= 0) & (x <= W - 1) & (y <= H - 1)
    x0 = np.minimum(np.floor(np.where(ok, x, 0)).astype(np.int64), W - 2)
    y0 = np.minimum(np.floor(np.where(ok, y, 0)).astype(np.int64), H - 2)
    fx, fy = np.where(ok, x - x0, 0), np.where(ok, y - y0, 0)
    c = [D[y0, x0], D[y0, x0 + 1], D[y0 + 1, x0], D[y0 + 1, x0 + 1]]
    ok &= np.all([ci > 0 for ci in c], axis=0)
    with np.errstate(divide="ignore"):
        inv = [np.where(ci > 0, 1.0 / np.where(ci > 0, ci, 1.0), 0.0) for ci in c]
    q = (inv[0] * (1 - fx) + inv[1] * fx) * (1 - fy) + (inv[2] * (1 - fx) + inv[3] * fx) * fy
    out[ok] = 1.0 / q[ok]
    return out


def lift_matches(matches: np.ndarray, depth: np.ndarray, intr: Intrinsics, model: TriMesh,
                 texcoord: str = "texcoord") -> Correspondences3D3D:
    """Backproject image-side matches through the depth map and look up model points by texture position."""
    m = np.asarray(matches, dtype=float).reshape(-1, 4)
    if texcoord not in model.attributes:
        raise ValueError(f"model has no {texcoord!r} attribute")
    Z = sample_depth(depth, m[:, :2])
    keep = Z > 0
    if keep.sum() < 3:
        raise InsufficientCorrespondences(f"only {int(keep.sum())} matches have valid depth")
    u = m[keep, 0]
    v = m[keep, 1]
    Zk = Z[keep]
    Xs = np.column_stack([(u - intr.cx) / intr.fx * Zk, (v - intr.cy) / intr.fy * Zk, Zk])
    dist, j = cKDTree(np.asarray(model.attributes[texcoord], dtype=float)).query(m[keep, 2:])
    log.debug("texture lookup distance: median %.3f px, max %.3f px", np.median(dist), dist.max())
    return Correspondences3D3D(Xs, model.vertices[j])


# ---------------------------------------------------------------------------
# rigid alignment


def solve_procrustes(corr: Correspondences3D3D) -> Pose:
    """Least-squares rotation and translation with ``R @ sensor + t ~ model``, reflections excluded."""
    P, Q = corr.sensor, corr.model
    cp, cq = P.mean(axis=0), Q.mean(axis=0)
    A, B = P - cp, Q - cq
    scale = max(np.abs(A).max(), np.abs(B).max(), 1e-300)
    sv = np.linalg.svd(A / scale, compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1e-300):
        raise DegenerateConfiguration("correspondences are collinear; rotation is undetermined")
    U, _, Vt = np.linalg.svd(B.T @ A)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ D @ Vt
    return Pose(R, cq - R @ cp)


def procrustes_residual(corr: Correspondences3D3D, pose: Pose) -> np.ndarray:
    """Per-pair alignment error in mm."""
    return np.linalg.norm(pose.apply(corr.sensor) - corr.model, axis=1)


def solve_procrustes_ransac(corr: Correspondences3D3D, threshold: float = RANSAC_THRESHOLD_MM,
                            iterations: int = RANSAC_ITERATIONS, seed: int = 0) -> tuple[Pose, np.ndarray]:
    """Minimal-sample consensus around :func:`solve_procrustes`, refit on the largest inlier set."""
    n = len(corr)
    rng = np.random.default_rng(seed)
    best = np.zeros(n, dtype=bool)
    best_err = np.inf
    for _ in range(iterations):
        idx = rng.choice(n, 3, replace=False)
        try:
            pose = solve_procrustes(corr.subset(idx))
        except DegenerateConfiguration:
            continue
        err = procrustes_residual(corr, pose)
        inl = err < threshold
        cnt = int(inl.sum())
        tot = float(np.minimum(err, threshold).sum())
        if cnt > best.sum() or (cnt == best.sum() and tot < best_err):
            best, best_err = inl, tot
    if best.sum() < 3:
        raise InsufficientCorrespondences("no consensus set of 3 or more matches")
    pose = solve_procrustes(corr.subset(best))
    inl = procrustes_residual(corr, pose) < threshold
    if inl.sum() >= 3 and not np.array_equal(inl, best):
        pose = solve_procrustes(corr.subset(inl))
        best = inl
    return pose, best


def estimate_sensor_pose(corr: Correspondences3D3D, seed: int = 0) -> tuple[Pose, np.ndarray]:
    """Pose of the sensor in the anchor frame; robust fit once there are enough matches."""
    if len(corr) >= RANSAC_MIN_MATCHES:
        return solve_procrustes_ransac(corr, seed=seed)
    return solve_procrustes(corr), np.ones(len(corr), dtype=bool)


# ---------------------------------------------------------------------------
# projection fit (depth camera frame -> colour pixels)


@dataclass(eq=False)
class ProjectionFit:
    """``P = K [R | t]`` taking depth-camera points to colour pixels, with its reprojection RMS."""

    P: np.ndarray
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    rms: float

    def project(self, X: np.ndarray) -> np.ndarray:
        Xh = np.column_stack([np.asarray(X, dtype=float).reshape(-1, 3), np.ones(len(X))])
        p = Xh @ self.P.T
        return p[:, :2] / p[:, 2:3]

    def intrinsics(self, width: int, height: int) -> Intrinsics:
        """Pinhole intrinsics (skew dropped)."""
        K = self.K
        return Intrinsics(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), int(width), int(height))

    def rgb_pose(self) -> Pose:
        """Colour-camera-to-depth-camera pose."""
        return Pose(self.R.T, -self.R.T @ self.t)


def _normalizer(x: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    c = x.mean(axis=0)
    s = np.sqrt(d) / max(np.sqrt(np.mean(np.sum((x - c) ** 2, axis=1))), 1e-300)
    T = np.eye(d + 1)
    T[:d, :d] *= s
    T[:d, d] = -s * c
    return T


def _rq3(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """RQ decomposition with a positive-diagonal upper-triangular factor."""
    K, R = rq(M)
    S = np.diag(np.where(np.diag(K) < 0, -1.0, 1.0))
    return K @ S, S @ R


def decompose_projection(P: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    P = np.asarray(P, dtype=float)
    if np.linalg.det(P[:, :3]) < 0:
        P = -P
    K, R = _rq3(P[:, :3])
    t = np.linalg.solve(K, P[:, 3])
    s = K[2, 2]
    return K / s, R, t


def _reproject(K, R, t, X):
    Xc = X @ R.T + t
    p = Xc @ K.T
    return p[:, :2] / p[:, 2:3]


def fit_projection(corr: Correspondences3D2D, refine: bool = True) -> ProjectionFit:
    """Normalised DLT, then reprojection-error refinement of the 11 projection parameters."""
    X, u = corr.points, corr.pixels
    c = X - X.mean(axis=0)
    sv = np.linalg.svd(c / max(np.abs(c).max(), 1e-300), compute_uv=False)
    if sv[2] < 1e-9 * sv[0]:
        raise DegenerateConfiguration("3D points are coplanar; camera resection is undetermined")
    T3, T2 = _normalizer(X), _normalizer(u)
    Xn = (np.column_stack([X, np.ones(len(X))]) @ T3.T)
    un = (np.column_stack([u, np.ones(len(u))]) @ T2.T)
    rows = []
    for Xi, (x, y, w) in zip(Xn, un):
        rows.append(np.concatenate([np.zeros(4), -w * Xi, y * Xi]))
        rows.append(np.concatenate([w * Xi, np.zeros(4), -x * Xi]))
    A = np.array(rows)
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-12 * s[0]:
        raise DegenerateConfiguration("projection fit is rank deficient")
    Pn = Vt[-1].reshape(3, 4)
    P = np.linalg.solve(T2, Pn @ T3)
    K, R, t = decompose_projection(P)
    if refine:
        def unpack(p):
            Kp = np.array([[p[0], p[1], p[2]], [0.0, p[3], p[4]], [0.0, 0.0, 1.0]])
            return Kp, Rotation.from_rotvec(p[5:8]).as_matrix(), p[8:11]

        def resid(p):
            Kp, Rp, tp = unpack(p)
            return (_reproject(Kp, Rp, tp, X) - u).ravel()

        p0 = np.concatenate([[K[0, 0], K[0, 1], K[0, 2], K[1, 1], K[1, 2]],
                             Rotation.from_matrix(R).as_rotvec(), t])
        sol = least_squares(resid, p0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
        if np.sum(sol.fun ** 2) <= np.sum(resid(p0) ** 2):
            K, R, t = unpack(sol.x)
    P = K @ np.column_stack([R, t])
    e = _reproject(K, R, t, X) - u
    return ProjectionFit(P, K, R, t, float(np.sqrt(np.mean(np.sum(e * e, axis=1)))))


def read_krt_csv(path: str | Path) -> Correspondences3D2D:
    rows = fileio.read_csv(path)
    try:
        data = np.array([[float(r[c]) for c in ("X", "Y", "Z", "u", "v")] for r in rows]).reshape(-1, 5)
    except (KeyError, ValueError) as exc:
        raise fileio.DataError(f"{path}: malformed row") from exc
    return Correspondences3D2D(data[:, :3], data[:, 3:])


# ---------------------------------------------------------------------------
# dataset-level calibration


@dataclass(eq=False)
class CalibrationReport:
    rig: CameraRig
    residual_rms_mm: dict[int, float]
    inliers: dict[int, int]
    reprojection_rms_px: dict[int, float]

    def to_dict(self) -> dict:
        return {"residual_rms_mm": {str(k): v for k, v in self.residual_rms_mm.items()},
                "inliers": {str(k): v for k, v in self.inliers.items()},
                "reprojection_rms_px": {str(k): v for k, v in self.reprojection_rms_px.items()}}


def calibrate_dataset(root: str | Path, rig: CameraRig, seed: int = 0) -> CalibrationReport:
    """Calibrate every sensor that has matches under ``root/calib``.

    Sensors keep their depth intrinsics from ``rig``; poses come from
    Procrustes on lifted box matches and the colour intrinsics and offset
    from the projection fit when ``krt_cam<k>.csv`` is present.
    """
    cal = Path(root) / "calib"
    model = fileio.read_obj(cal / "model.obj")
    matches = read_matches(cal / "matches.csv")
    residual, inliers, rms_px = {}, {}, {}
    for k in range(len(rig)):
        cam = rig[k]
        krt = cal / f"krt_cam{k}.csv"
        if krt.exists():
            fit = fit_projection(read_krt_csv(krt))
            cam = cam.with_rgb(fit.intrinsics(cam.rgb.width, cam.rgb.height), fit.rgb_pose())
            rms_px[k] = fit.rms
        if k in matches:
            files = sorted((cal / f"cam{k}").glob("*_depth.png"))
            if not files:
                raise fileio.DataError(f"no calibration depth frames under {cal / f'cam{k}'}")
            depth = accumulate_depth([fileio.read_depth_png(f) for f in files])
            corr = lift_matches(matches[k], depth, cam.depth, model)
            pose, inl = estimate_sensor_pose(corr, seed=seed)
            err = procrustes_residual(corr.subset(inl), pose)
            residual[k] = float(np.sqrt(np.mean(err * err)))
            inliers[k] = int(inl.sum())
            cam = cam.with_pose(pose)
        rig = rig.replace_camera(k, cam)
    return CalibrationReport(rig, residual, inliers, rms_px)
