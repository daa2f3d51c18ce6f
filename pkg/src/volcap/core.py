"""Shared geometric types: intrinsics, poses, camera rigs, frames, meshes and voxel grids.

Units are millimetres and milliseconds throughout. Pixel coordinates are
continuous with the pixel-centre convention: the integer coordinate ``(i, j)``
is the centre of column ``i`` / row ``j``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

_ORTHO_TOL = 1e-9


class NotProjectableError(ValueError):
    """Raised when a point lies on or behind the camera plane."""


class InvalidDepthError(ValueError):
    """Raised when a backprojection is requested with a non-positive depth."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        """Image array shape ``(height, width)``."""
        return (self.height, self.width)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R @ x + t``.

    For a camera this maps camera-frame points into the world (anchor) frame.
    """

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("R must be a proper rotation matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "Pose":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.R.T

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.R, other.R, atol=atol) and np.allclose(self.t, other.t, atol=atol))

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["R"], dtype=float), np.array(d["t"], dtype=float))


def rotation_about(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for ``angle`` radians about ``axis``."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0, 1, 0)) -> Pose:
    """Camera pose at ``eye`` looking at ``target``.

    Camera axes follow the usual computer-vision convention: +z forward,
    +x to the image right, +y down the image.
    """
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.column_stack([x, y, z]), eye)


@dataclass(frozen=True, eq=False)
class Camera:
    """One RGB-D sensor.

    ``pose`` maps depth-camera coordinates to world. ``rgb_pose`` is the fixed
    KRT approximation of the colour camera: it maps RGB-camera coordinates
    into the depth-camera frame.
    """

    depth: Intrinsics
    pose: Pose
    rgb: Intrinsics
    rgb_pose: Pose = field(default_factory=Pose.identity)
    name: str = ""

    @property
    def rgb_world_pose(self) -> Pose:
        return self.pose.compose(self.rgb_pose)

    def with_pose(self, pose: Pose) -> "Camera":
        return Camera(self.depth, pose, self.rgb, self.rgb_pose, self.name)

    def with_rgb(self, rgb: Intrinsics, rgb_pose: Pose) -> "Camera":
        return Camera(self.depth, self.pose, rgb, rgb_pose, self.name)

    def to_dict(self) -> dict:
        return {"name": self.name, "depth": self.depth.to_dict(), "pose": self.pose.to_dict(),
                "rgb": self.rgb.to_dict(), "rgb_pose": self.rgb_pose.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(Intrinsics.from_dict(d["depth"]), Pose.from_dict(d["pose"]),
                   Intrinsics.from_dict(d["rgb"]), Pose.from_dict(d["rgb_pose"]), d.get("name", ""))


@dataclass(frozen=True, eq=False)
class CameraRig:
    cameras: tuple[Camera, ...]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    # indices of the sensors used for reconstruction; the rest are held-out views
    recon_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise ValueError("a rig needs at least one camera")
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if self.recon_ids is not None:
            object.__setattr__(self, "recon_ids", tuple(int(i) for i in self.recon_ids))

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, k: int) -> Camera:
        return self.cameras[k]

    def __iter__(self) -> Iterator[Camera]:
        return iter(self.cameras)

    @property
    def K(self) -> int:
        return len(self.cameras)

    @property
    def reconstruction_ids(self) -> tuple[int, ...]:
        return self.recon_ids if self.recon_ids is not None else tuple(range(len(self)))

    @property
    def heldout_ids(self) -> tuple[int, ...]:
        used = set(self.reconstruction_ids)
        return tuple(k for k in range(len(self)) if k not in used)

    def replace_camera(self, k: int, cam: Camera) -> "CameraRig":
        cams = list(self.cameras)
        cams[k] = cam
        return CameraRig(tuple(cams), self.up, self.recon_ids)

    def allclose(self, other: "CameraRig", atol: float = 1e-9) -> bool:
        if len(self) != len(other) or self.reconstruction_ids != other.reconstruction_ids:
            return False
        for a, b in zip(self, other):
            if a.depth != b.depth or a.rgb != b.rgb:
                return False
            if not (a.pose.allclose(b.pose, atol) and a.rgb_pose.allclose(b.rgb_pose, atol)):
                return False
        return np.allclose(self.up, other.up, atol=atol)

    def to_dict(self) -> dict:
        return {"up": list(self.up),
                "reconstruction_ids": list(self.reconstruction_ids),
                "cameras": [c.to_dict() for c in self.cameras]}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        cams = tuple(Camera.from_dict(c) for c in d["cameras"])
        rid = d.get("reconstruction_ids")
        return cls(cams, tuple(d.get("up", (0.0, 1.0, 0.0))), tuple(rid) if rid is not None else None)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CameraRig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# projection model


def project_points(intr: Intrinsics, pose: Pose, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised world-to-pixel mapping.

    Returns ``(uv, z)`` where ``z`` is the camera-frame depth. Rows with
    ``z <= 0`` get ``NaN`` pixel coordinates.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xc = (X - pose.t) @ pose.R
    z = Xc[:, 2]
    uv = np.full((len(X), 2), np.nan)
    ok = z > 0
    uv[ok, 0] = intr.fx * Xc[ok, 0] / z[ok] + intr.cx
    uv[ok, 1] = intr.fy * Xc[ok, 1] / z[ok] + intr.cy
    return uv, z


def project(intr: Intrinsics, pose: Pose, X: Sequence[float]) -> np.ndarray:
    """Project a single world point; raises NotProjectableError behind the camera."""
    uv, z = project_points(intr, pose, np.asarray(X, dtype=float)[None])
    if not z[0] > 0:
        raise NotProjectableError(f"point {tuple(X)} has camera depth {z[0]:.3f} <= 0")
    return uv[0]


def backproject(intr: Intrinsics, pose: Pose, uv: np.ndarray, Z: np.ndarray | float) -> np.ndarray:
    """Pixel + camera depth to world point(s)."""
    uv = np.asarray(uv, dtype=float)
    single = uv.ndim == 1
    uv = np.atleast_2d(uv)
    Z = np.broadcast_to(np.asarray(Z, dtype=float), (len(uv),))
    if np.any(~(Z > 0)):
        raise InvalidDepthError("backprojection needs Z > 0")
    Xc = np.column_stack([(uv[:, 0] - intr.cx) / intr.fx * Z, (uv[:, 1] - intr.cy) / intr.fy * Z, Z])
    X = pose.apply(Xc)
    return X[0] if single else X


def pixel_grid(intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Column and row coordinate images ``(u, v)`` of shape ``(height, width)``."""
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    return u.astype(float), v.astype(float)


def depth_to_camera_points(intr: Intrinsics, depth: np.ndarray) -> np.ndarray:
    """Organised camera-frame point image ``(H, W, 3)``; invalid pixels have Z = 0."""
    u, v = pixel_grid(intr)
    Z = np.asarray(depth, dtype=float)
    return np.stack([(u - intr.cx) / intr.fx * Z, (v - intr.cy) / intr.fy * Z, Z], axis=-1)


def camera_rays(intr: Intrinsics, pose: Pose, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray origin and unnormalised directions with unit camera-z component."""
    d = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u, dtype=float)], axis=-1)
    return pose.t, d @ pose.R.T


# ---------------------------------------------------------------------------
# frames, meshes and voxel grids


@dataclass(eq=False)
class RgbdFrame:
    """One sensor's capture. Depth is float millimetres with 0 marking invalid pixels."""

    depth: np.ndarray
    color: np.ndarray
    foreground: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        self.color = np.asarray(self.color, dtype=np.uint8)
        self.foreground = np.asarray(self.foreground, dtype=bool)
        if self.foreground.shape != self.depth.shape:
            raise ValueError("foreground mask and depth map dimensions differ")
        if np.any(self.foreground & ~(self.depth > 0)):
            raise ValueError("foreground pixels must have valid depth")

    def check(self, camera: Camera) -> None:
        if self.depth.shape != camera.depth.shape:
            raise ValueError(f"depth shape {self.depth.shape} != intrinsics {camera.depth.shape}")
        if self.color.shape[:2] != camera.rgb.shape:
            raise ValueError(f"color shape {self.color.shape[:2]} != intrinsics {camera.rgb.shape}")


@dataclass(eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None
    attributes: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != len(self.vertices):
                raise ValueError("normals must have one row per vertex")
        for name, values in self.attributes.items():
            self._check_attribute(name, values)

    def _check_attribute(self, name: str, values: np.ndarray) -> None:
        if len(values) != len(self.vertices):
            raise ValueError(f"attribute {name!r} has {len(values)} rows for {len(self.vertices)} vertices")

    def set_attribute(self, name: str, values: np.ndarray) -> None:
        values = np.asarray(values)
        self._check_attribute(name, values)
        self.attributes[name] = values

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def transformed(self, pose: Pose) -> "TriMesh":
        n = None if self.normals is None else pose.rotate(self.normals)
        return TriMesh(pose.apply(self.vertices), self.faces.copy(), n, dict(self.attributes))

    def edges(self) -> np.ndarray:
        """Undirected edge list with multiplicity (one row per triangle side)."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.sort(e, axis=1)

    def edge_counts(self) -> np.ndarray:
        if self.is_empty:
            return np.zeros(0, dtype=np.int64)
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        """Every edge is shared by exactly two triangles."""
        return (not self.is_empty) and bool(np.all(self.edge_counts() == 2))

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        n_edges = len(np.unique(self.edges(), axis=0))
        return int(len(used) - n_edges + len(self.faces))

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def sample_surface(self, n: int, seed: int = 0) -> np.ndarray:
        """Area-weighted uniform samples on the triangles."""
        if self.is_empty:
            return np.zeros((0, 3))
        rng = np.random.default_rng(seed)
        areas = self.face_areas()
        idx = rng.choice(len(self.faces), size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        v = self.vertices[self.faces[idx]]
        return ((1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1]
                + (r1 * r2)[:, None] * v[:, 2])


@dataclass(eq=False)
class VolumeGrid:
    """Scalar or vector field on a regular lattice.

    ``data`` is indexed ``[ix, iy, iz, ...]``; voxel ``q`` has its centre at
    ``origin + q * edge``.
    """

    data: np.ndarray
    origin: np.ndarray
    edge: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        if not self.edge > 0:
            raise ValueError("voxel edge must be positive")
        self.edge = float(self.edge)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])

    def to_world(self, q: np.ndarray) -> np.ndarray:
        return self.origin + np.asarray(q, dtype=float) * self.edge

    def to_grid(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.origin) / self.edge

    def centers(self, mask: np.ndarray | None = None) -> np.ndarray:
        idx = np.argwhere(self.data if mask is None else mask)
        return self.to_world(idx)

    def like(self, data: np.ndarray) -> "VolumeGrid":
        return VolumeGrid(data, self.origin.copy(), self.edge)

    def sample(self, X: np.ndarray) -> np.ndarray:
        """Trilinear interpolation at world points (clamped to the lattice)."""
        g = self.to_grid(X)
        shape = np.array(self.shape)
        g = np.clip(g, 0, shape - 1)
        i0 = np.minimum(np.floor(g).astype(np.int64), shape - 2)
        i0 = np.maximum(i0, 0)
        f = g - i0
        out = 0.0
        D = self.data
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1 - f[:, 0]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1 - f[:, 1]
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1 - f[:, 2]
                    out = out + wx * wy * wz * D[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
        return out
