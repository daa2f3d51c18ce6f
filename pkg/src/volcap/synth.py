"""Synthetic multi-view RGB-D scenes of a capsule human with analytic ground truth.

The body is a union of capsules (sphere-swept segments), which gives exact
ray intersections, an exact signed distance and an unambiguous skeleton.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fileio
from .core import (Camera, CameraRig, Intrinsics, Pose, RgbdFrame, TriMesh, look_at, project_points,
                   rotation_about)

JOINT_NAMES = (
    "torso", "neck", "head",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
)

# parent -> child edges of the 15-joint tree: rigid trunk (torso, neck,
# shoulders, hips) plus the head and four two-bone limbs
BONES = (
    ("torso", "neck"), ("neck", "head"),
    ("neck", "l_shoulder"), ("neck", "r_shoulder"),
    ("l_shoulder", "l_elbow"), ("l_elbow", "l_wrist"),
    ("r_shoulder", "r_elbow"), ("r_elbow", "r_wrist"),
    ("torso", "l_hip"), ("torso", "r_hip"),
    ("l_hip", "l_knee"), ("l_knee", "l_ankle"),
    ("r_hip", "r_knee"), ("r_knee", "r_ankle"),
)

LIMBS = {
    "l_arm": ("l_shoulder", "l_elbow", "l_wrist"),
    "r_arm": ("r_shoulder", "r_elbow", "r_wrist"),
    "l_leg": ("l_hip", "l_knee", "l_ankle"),
    "r_leg": ("r_hip", "r_knee", "r_ankle"),
}

SKIN = (205, 155, 125)
SHIRT = (70, 120, 200)
SLEEVE = (200, 70, 60)
PANTS = (40, 45, 95)
SOCKS = (130, 120, 50)


# ---------------------------------------------------------------------------
# capsule geometry


@dataclass(frozen=True, eq=False)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float
    color: tuple[int, int, int] = SHIRT
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(3))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(3))
        if not self.radius > 0:
            raise ValueError("capsule radius must be positive")

    def closest(self, X: np.ndarray) -> np.ndarray:
        ba = self.b - self.a
        L2 = float(ba @ ba)
        if L2 == 0.0:
            return np.broadcast_to(self.a, X.shape).copy()
        s = np.clip((X - self.a) @ ba / L2, 0.0, 1.0)
        return self.a + s[:, None] * ba

    def distance(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.linalg.norm(X - self.closest(X), axis=1) - self.radius

    def intersect(self, ro: np.ndarray, rd: np.ndarray) -> np.ndarray:
        """First entry distance along unit rays ``ro + t*rd`` (inf on miss)."""
        t = np.full(len(rd), np.inf)
        r2 = self.radius ** 2
        ba = self.b - self.a
        baba = float(ba @ ba)
        if baba > 0:
            oa = ro - self.a
            bard = rd @ ba
            baoa = oa @ ba
            rdoa = rd @ oa
            oaoa = oa @ oa
            qa = baba - bard * bard
            qb = baba * rdoa - baoa * bard
            qc = baba * oaoa - baoa * baoa - r2 * baba
            h = qb * qb - qa * qc
            ok = (h >= 0) & (qa > 1e-12 * baba)
            tc = np.full(len(rd), np.inf)
            tc[ok] = (-qb[ok] - np.sqrt(h[ok])) / qa[ok]
            y = baoa + np.where(ok, tc, 0.0) * bard
            ok &= (y >= 0) & (y <= baba) & (tc > 0)
            t = np.where(ok, tc, t)
        for c in (self.a, self.b) if baba > 0 else (self.a,):
            oc = ro - c
            b = rd @ oc
            h = b * b - (oc @ oc - r2)
            ok = h >= 0
            ts = np.full(len(rd), np.inf)
            ts[ok] = -b[ok] - np.sqrt(h[ok])
            ts[ts <= 0] = np.inf
            t = np.minimum(t, ts)
        return t

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.minimum(self.a, self.b) - self.radius
        hi = np.maximum(self.a, self.b) + self.radius
        return lo, hi

    def area(self) -> float:
        L = float(np.linalg.norm(self.b - self.a))
        return 2 * math.pi * self.radius * L + 4 * math.pi * self.radius ** 2

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        L = float(np.linalg.norm(self.b - self.a))
        cyl = 2 * math.pi * self.radius * L
        n_cyl = rng.binomial(n, cyl / (cyl + 4 * math.pi * self.radius ** 2)) if L > 0 else 0
        d = rng.normal(size=(n - n_cyl, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        # sphere caps: hemisphere facing away from the segment belongs to each end
        if L > 0:
            axis = (self.b - self.a) / L
            side = d @ axis
            caps = np.where((side >= 0)[:, None], self.b, self.a) + self.radius * d
        else:
            caps = self.a + self.radius * d
        if n_cyl == 0:
            return caps
        axis = (self.b - self.a) / L
        u = np.cross(axis, [1.0, 0, 0] if abs(axis[0]) < 0.9 else [0, 1.0, 0])
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)
        phi = rng.uniform(0, 2 * math.pi, n_cyl)
        s = rng.uniform(0, L, n_cyl)
        cyl_pts = (self.a + s[:, None] * axis
                   + self.radius * (np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * v))
        return np.vstack([cyl_pts, caps])


@dataclass(eq=False)
class CapsuleBody:
    """Joint positions plus the capsules whose union forms the body surface."""

    joints: dict[str, np.ndarray]
    capsules: list[Capsule]

    def __post_init__(self):
        self.joints = {k: np.asarray(v, dtype=float).reshape(3) for k, v in self.joints.items()}

    @classmethod
    def empty(cls) -> "CapsuleBody":
        return cls({}, [])

    def joint_array(self) -> np.ndarray:
        return np.array([self.joints[n] for n in JOINT_NAMES])

    def sdf(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if not self.capsules:
            return np.full(len(X), np.inf)
        return np.min([c.distance(X) for c in self.capsules], axis=0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.min([c.bounds()[0] for c in self.capsules], axis=0)
        hi = np.max([c.bounds()[1] for c in self.capsules], axis=0)
        return lo, hi

    def surface_normals(self, X: np.ndarray) -> np.ndarray:
        """Outward normals at surface points (of the capsule that is closest)."""
        d = np.array([c.distance(X) for c in self.capsules])
        which = np.argmin(d, axis=0)
        n = np.zeros_like(X)
        for i, c in enumerate(self.capsules):
            sel = which == i
            if sel.any():
                v = X[sel] - c.closest(X[sel])
                n[sel] = v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
        return n

    def sample_surface(self, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Area-uniform samples of the union boundary with outward normals."""
        rng = np.random.default_rng(seed)
        if not self.capsules:
            return np.zeros((0, 3)), np.zeros((0, 3))
        areas = np.array([c.area() for c in self.capsules])
        # oversample, then drop points buried inside other capsules
        counts = rng.multinomial(int(n * 2.5), areas / areas.sum())
        pts = []
        for i, (c, m) in enumerate(zip(self.capsules, counts)):
            p = c.sample_surface(int(m), rng)
            others = [o.distance(p) for j, o in enumerate(self.capsules) if j != i]
            if others:
                p = p[np.min(others, axis=0) >= -1e-9]
            pts.append(p)
        pts = np.vstack(pts)
        if len(pts) > n:
            pts = pts[np.sort(rng.choice(len(pts), n, replace=False))]
        return pts, self.surface_normals(pts)

    def to_dict(self) -> dict:
        return {"joints": {k: v.tolist() for k, v in self.joints.items()},
                "capsules": [{"a": c.a.tolist(), "b": c.b.tolist(), "radius": c.radius,
                              "color": list(c.color), "name": c.name} for c in self.capsules]}

    @classmethod
    def from_dict(cls, d: dict) -> "CapsuleBody":
        caps = [Capsule(np.array(c["a"]), np.array(c["b"]), float(c["radius"]), tuple(c["color"]), c["name"])
                for c in d["capsules"]]
        return cls({k: np.array(v) for k, v in d["joints"].items()}, caps)

    def volume(self, edge: float, pad: float = 60.0, shape_multiple: int = 1):
        """Signed-distance sampled volume ``A = -sdf`` (interior positive) and its origin."""
        lo, hi = self.bounds()
        lo = np.floor((lo - pad) / edge) * edge
        n = np.ceil((hi + pad - lo) / edge).astype(int) + 1
        n = ((n + shape_multiple - 1) // shape_multiple) * shape_multiple
        g = np.stack(np.meshgrid(*[lo[i] + edge * np.arange(n[i]) for i in range(3)], indexing="ij"), -1)
        A = -self.sdf(g.reshape(-1, 3)).reshape(tuple(n))
        return A, lo


def sphere_body(center, radius: float, color=SKIN) -> CapsuleBody:
    c = np.asarray(center, dtype=float)
    return CapsuleBody({}, [Capsule(c, c, radius, color, "sphere")])


# ---------------------------------------------------------------------------
# articulated capsule human


@dataclass(frozen=True)
class BodyShape:
    """Segment lengths, joint offsets and capsule radii, in mm, of the neutral body."""

    torso_height: float = 1080.0
    neck_above_torso: float = 300.0
    head_above_neck: float = 200.0
    shoulder_x: float = 170.0
    shoulder_above_torso: float = 300.0
    hip_x: float = 120.0
    hip_below_torso: float = 220.0
    upper_arm: float = 290.0
    forearm: float = 260.0
    thigh: float = 430.0
    shank: float = 440.0
    head_radius: float = 100.0
    neck_radius: float = 50.0
    trunk_radius: float = 125.0
    trunk_half_width: float = 55.0
    trunk_top: float = 270.0
    trunk_bottom: float = -120.0
    clavicle_radius: float = 55.0
    pelvis_radius: float = 95.0
    upper_arm_radius: float = 45.0
    forearm_radius: float = 38.0
    thigh_radius: float = 65.0
    shank_radius: float = 50.0


@dataclass(frozen=True)
class PoseParams:
    """Joint angles (degrees) and global placement of the body.

    Arm elevation is measured from straight down in the frontal plane; leg
    spread likewise. Hip flexion swings a thigh forward (+z) and knee flexion
    folds the shank backwards.
    """

    yaw: float = 0.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    l_arm_elevation: float = 125.0
    r_arm_elevation: float = 125.0
    l_elbow: float = 30.0
    r_elbow: float = 30.0
    l_leg_spread: float = 14.0
    r_leg_spread: float = 14.0
    l_hip_flexion: float = 0.0
    r_hip_flexion: float = 0.0
    l_knee: float = 20.0
    r_knee: float = 20.0
    hands_on_hips: bool = False


XPOSE = PoseParams()


def _arm_dirs(elevation: float, side: float, bend: float):
    """Unit directions of the upper arm and forearm in body coordinates."""
    e = math.radians(elevation)
    # frontal-plane direction: straight down rotated outward by the elevation
    prox = np.array([side * math.sin(e), -math.cos(e), 0.0])
    # the elbow bends further upward within the frontal plane
    dist = rotation_about([0.0, 0.0, side], math.radians(bend)) @ prox
    return prox, dist


def pose_body(shape: BodyShape = BodyShape(), params: PoseParams = XPOSE) -> CapsuleBody:
    """Build the capsule body in world coordinates for the given pose."""
    s = shape
    J = {}
    J["torso"] = np.array([0.0, s.torso_height, 0.0])
    J["neck"] = J["torso"] + [0.0, s.neck_above_torso, 0.0]
    J["head"] = J["neck"] + [0.0, s.head_above_neck, 0.0]
    caps = []
    for side, pre in ((1.0, "l"), (-1.0, "r")):
        J[f"{pre}_shoulder"] = J["torso"] + [side * s.shoulder_x, s.shoulder_above_torso, 0.0]
        J[f"{pre}_hip"] = J["torso"] + [side * s.hip_x, -s.hip_below_torso, 0.0]
        if params.hands_on_hips:
            sh = J[f"{pre}_shoulder"]
            wrist = J[f"{pre}_hip"] + [side * 125.0, 70.0, 0.0]
            mid = 0.5 * (sh + wrist)
            chord = np.linalg.norm(wrist - sh)
            out = math.sqrt(max(s.upper_arm ** 2 - (chord / 2) ** 2, 0.0))
            J[f"{pre}_elbow"] = mid + [side * out, 0.0, -0.25 * out]
            J[f"{pre}_wrist"] = wrist
        else:
            el = getattr(params, f"{pre}_arm_elevation")
            bend = getattr(params, f"{pre}_elbow")
            prox, dist = _arm_dirs(el, side, bend)
            J[f"{pre}_elbow"] = J[f"{pre}_shoulder"] + s.upper_arm * prox
            J[f"{pre}_wrist"] = J[f"{pre}_elbow"] + s.forearm * dist
        spread = math.radians(getattr(params, f"{pre}_leg_spread"))
        flex = math.radians(getattr(params, f"{pre}_hip_flexion"))
        knee = math.radians(getattr(params, f"{pre}_knee"))
        thigh = np.array([side * math.sin(spread), -math.cos(spread), 0.0])
        thigh = rotation_about([1.0, 0.0, 0.0], -flex) @ thigh
        shank = rotation_about([1.0, 0.0, 0.0], knee) @ thigh
        J[f"{pre}_knee"] = J[f"{pre}_hip"] + s.thigh * thigh
        J[f"{pre}_ankle"] = J[f"{pre}_knee"] + s.shank * shank

    t = J["torso"]
    caps.append(Capsule(J["head"], J["head"], s.head_radius, SKIN, "head"))
    caps.append(Capsule(J["neck"], J["head"], s.neck_radius, SKIN, "neck"))
    for side in (1.0, -1.0):
        caps.append(Capsule(t + [side * s.trunk_half_width, s.trunk_bottom, 0.0],
                            t + [side * s.trunk_half_width, s.trunk_top, 0.0], s.trunk_radius, SHIRT, "trunk"))
    for pre in ("l", "r"):
        caps.append(Capsule(J["neck"] + [0.0, -s.neck_above_torso + s.shoulder_above_torso, 0.0],
                            J[f"{pre}_shoulder"], s.clavicle_radius, SHIRT, f"{pre}_clavicle"))
        caps.append(Capsule(J[f"{pre}_shoulder"], J[f"{pre}_elbow"], s.upper_arm_radius, SLEEVE, f"{pre}_upper_arm"))
        caps.append(Capsule(J[f"{pre}_elbow"], J[f"{pre}_wrist"], s.forearm_radius, SKIN, f"{pre}_forearm"))
        caps.append(Capsule(t + [0.0, s.trunk_bottom, 0.0], J[f"{pre}_hip"], s.pelvis_radius, PANTS, f"{pre}_pelvis"))
        caps.append(Capsule(J[f"{pre}_hip"], J[f"{pre}_knee"], s.thigh_radius, PANTS, f"{pre}_thigh"))
        caps.append(Capsule(J[f"{pre}_knee"], J[f"{pre}_ankle"], s.shank_radius, SOCKS, f"{pre}_shank"))

    R = rotation_about([0.0, 1.0, 0.0], math.radians(params.yaw))
    tr = np.asarray(params.translation, dtype=float)
    J = {k: R @ v + tr for k, v in J.items()}
    caps = [Capsule(R @ c.a + tr, R @ c.b + tr, c.radius, c.color, c.name) for c in caps]
    return CapsuleBody(J, caps)


def bone_lengths(joints: dict[str, np.ndarray]) -> dict[str, float]:
    return {f"{a}-{b}": float(np.linalg.norm(joints[b] - joints[a])) for a, b in BONES}


def flexion_angle(a: np.ndarray, joint: np.ndarray, c: np.ndarray) -> float:
    """Flexion in degrees at ``joint``: 0 for a straight limb."""
    u = np.asarray(joint) - np.asarray(a)
    v = np.asarray(c) - np.asarray(joint)
    cosang = float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
    return math.degrees(math.acos(max(-1.0, min(1.0, cosang))))


# ---------------------------------------------------------------------------
# calibration box


@dataclass(eq=False)
class BoxModel:
    """Axis-aligned textured box; its frame is the world (anchor) frame.

    ``vertices`` are surface points on a regular grid over every face and
    ``texcoords`` their pixel positions in the box's texture atlas.
    """

    size: tuple[float, float, float] = (560.0, 330.0, 410.0)
    center: tuple[float, float, float] = (0.0, 165.0, 0.0)
    spacing: float = 10.0
    vertices: np.ndarray = field(init=False)
    texcoords: np.ndarray = field(init=False)
    face_id: np.ndarray = field(init=False)

    def __post_init__(self):
        self.vertices, self.texcoords, self.face_id = self._build()

    def _build(self):
        sx, sy, sz = self.size
        c = np.asarray(self.center, dtype=float)
        h = np.array([sx, sy, sz]) / 2
        verts, uvs, fid = [], [], []
        # atlas: faces laid out left to right, each occupying its own block
        x_off = 0.0
        for f, (axis, sign) in enumerate([(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]):
            a1, a2 = [i for i in range(3) if i != axis]
            n1 = int(round(2 * h[a1] / self.spacing)) + 1
            n2 = int(round(2 * h[a2] / self.spacing)) + 1
            s1 = np.linspace(-h[a1], h[a1], n1)
            s2 = np.linspace(-h[a2], h[a2], n2)
            g1, g2 = np.meshgrid(s1, s2, indexing="ij")
            p = np.zeros((g1.size, 3))
            p[:, axis] = sign * h[axis]
            p[:, a1] = g1.ravel()
            p[:, a2] = g2.ravel()
            verts.append(p + c)
            uvs.append(np.column_stack([x_off + (g1.ravel() + h[a1]) * 0.5, (g2.ravel() + h[a2]) * 0.5]))
            fid.append(np.full(g1.size, f))
            x_off += 2 * h[a1] * 0.5 + 10.0
        return np.vstack(verts), np.vstack(uvs), np.concatenate(fid)

    @property
    def normals(self) -> np.ndarray:
        n = np.zeros((6, 3))
        for f, (axis, sign) in enumerate([(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]):
            n[f, axis] = sign
        return n[self.face_id]

    def intersect(self, ro: np.ndarray, rd: np.ndarray) -> np.ndarray:
        """Slab-method entry distance along unit rays (inf on miss)."""
        c = np.asarray(self.center, dtype=float)
        h = np.asarray(self.size, dtype=float) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / rd
            t1 = (c - h - ro) * inv
            t2 = (c + h - ro) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmin > 0)
        return np.where(hit, tmin, np.inf)

    def mesh(self) -> TriMesh:
        return TriMesh(self.vertices, np.zeros((0, 3), dtype=np.int64), self.normals.copy(),
                       {"texcoord": self.texcoords.copy()})


# ---------------------------------------------------------------------------
# rig and scene


def default_intrinsics(scale: float = 1.0) -> tuple[Intrinsics, Intrinsics]:
    """Depth (512x424-like) and colour (640x360-like) intrinsics, optionally scaled down."""
    dw, dh = int(round(512 * scale)), int(round(424 * scale))
    cw, ch = int(round(640 * scale)), int(round(360 * scale))
    depth = Intrinsics(365.0 * scale, 365.0 * scale, (dw - 1) / 2, (dh - 1) / 2, dw, dh)
    rgb = Intrinsics(440.0 * scale, 440.0 * scale, (cw - 1) / 2, (ch - 1) / 2, cw, ch)
    return depth, rgb


def make_rig(n_recon: int = 4, n_heldout: int = 2, radius: float = 2500.0, height: float = 1000.0,
             target=(0.0, 900.0, 0.0), scale: float = 1.0, rgb_baseline: float = 52.0,
             heldout_height: float | None = None) -> CameraRig:
    """Sensors on a circle around the origin looking at ``target``.

    Reconstruction sensors are evenly spaced starting in front of the body
    (+z); held-out sensors sit halfway between consecutive ones, at
    ``heldout_height`` when given.
    """
    depth, rgb = default_intrinsics(scale)
    rgb_pose = Pose(np.eye(3), np.array([rgb_baseline, 0.0, 0.0]))
    cams = []
    az = [2 * math.pi * i / n_recon for i in range(n_recon)]
    if n_heldout:
        step = 2 * math.pi / n_recon
        az += [step / 2 + 2 * math.pi * i / n_heldout for i in range(n_heldout)]
    for k, a in enumerate(az):
        h = height if k < n_recon or heldout_height is None else heldout_height
        eye = np.array([radius * math.sin(a), h, radius * math.cos(a)])
        cams.append(Camera(depth, look_at(eye, target), rgb, rgb_pose, f"cam{k}"))
    return CameraRig(tuple(cams), recon_ids=tuple(range(n_recon)))


@dataclass(eq=False)
class SyntheticScene:
    bodies: list[CapsuleBody]
    rig: CameraRig
    seed: int = 0
    depth_noise: float = 0.0          # sigma in mm at 2000 mm, growing linearly with depth
    timestamp_jitter: float = 0.0     # max |jitter| in ms
    frame_interval: float = 1000.0 / 30.0
    clock_offsets: tuple[float, ...] | None = None   # per-sensor local clock offset, ms
    color_gains: tuple[float, ...] | None = None
    dropped: dict[int, tuple[int, ...]] = field(default_factory=dict)
    light: tuple[float, float, float] = (0.3, 0.8, 0.5)
    box: BoxModel | None = None
    preset: str = ""

    @property
    def n_frames(self) -> int:
        return len(self.bodies)

    def gain(self, k: int) -> float:
        return 1.0 if self.color_gains is None else float(self.color_gains[k])

    def offset(self, k: int) -> float:
        return 0.0 if self.clock_offsets is None else float(self.clock_offsets[k])

    def frame_ids(self, k: int) -> list[int]:
        drop = set(self.dropped.get(k, ()))
        return [n for n in range(self.n_frames) if n not in drop]

    def global_time(self, k: int, n: int) -> float:
        rng = np.random.default_rng([self.seed, 7, k, n])
        j = rng.uniform(-self.timestamp_jitter, self.timestamp_jitter) if self.timestamp_jitter else 0.0
        return n * self.frame_interval + j

    def timestamp(self, k: int, n: int) -> float:
        """Sensor-local timestamp of frame ``n``."""
        return self.global_time(k, n) + self.offset(k)


def texture_factor(X: np.ndarray, square: float = 80.0, low: float = 0.45, ramp: float = 4.0) -> np.ndarray:
    """Procedural checker pattern in [low, 1] over world y and x+z, with ``ramp`` mm soft edges."""
    def wave(c):
        ph = np.mod(c, 2 * square) / square
        return np.clip((np.abs(ph - 1) - 0.5) * square / ramp + 0.5, 0.0, 1.0)

    a = wave(X[:, 1])
    b = wave(X[:, 0] + X[:, 2])
    return low + (1 - low) * (a * b + (1 - a) * (1 - b))


def _cast(intr: Intrinsics, pose: Pose, body: CapsuleBody, box: BoxModel | None = None):
    """Ray-cast the body; returns camera depth, hit point, normal and capsule colour per pixel."""
    H, W = intr.height, intr.width
    t_best = np.full(H * W, np.inf)
    which = np.full(H * W, -1)
    v, u = np.mgrid[0:H, 0:W]
    u = u.ravel().astype(float)
    v = v.ravel().astype(float)
    dcam = np.column_stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)])
    norm = np.linalg.norm(dcam, axis=1)
    rd_all = (dcam / norm[:, None]) @ pose.R.T
    ro = pose.t
    for i, cap in enumerate(body.capsules):
        lo, hi = cap.bounds()
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        uv, z = project_points(intr, pose, corners)
        if np.all(z > 0):
            umin, vmin = np.floor(uv.min(axis=0)).astype(int)
            umax, vmax = np.ceil(uv.max(axis=0)).astype(int)
            if umax < 0 or vmax < 0 or umin >= W or vmin >= H:
                continue
            umin, vmin = max(umin, 0), max(vmin, 0)
            umax, vmax = min(umax, W - 1), min(vmax, H - 1)
            rows = np.arange(vmin, vmax + 1)
            cols = np.arange(umin, umax + 1)
            idx = (rows[:, None] * W + cols[None, :]).ravel()
        else:
            idx = np.arange(H * W)
        t = cap.intersect(ro, rd_all[idx])
        better = t < t_best[idx]
        t_best[idx[better]] = t[better]
        which[idx[better]] = i
    if box is not None:
        t = box.intersect(ro[None, :].repeat(len(rd_all), 0), rd_all)
        better = t < t_best
        t_best[better] = t[better]
        which[better] = len(body.capsules)
    hit = np.isfinite(t_best)
    depth = np.zeros(H * W)
    depth[hit] = t_best[hit] / norm[hit]
    P = np.zeros((H * W, 3))
    P[hit] = ro + t_best[hit, None] * rd_all[hit]
    return depth.reshape(H, W), P, which, hit


def _shade(body: CapsuleBody, P, which, hit, light, box: BoxModel | None = None) -> np.ndarray:
    n_pix = len(which)
    col = np.zeros((n_pix, 3))
    L = np.asarray(light, dtype=float)
    L = L / np.linalg.norm(L)
    for i, cap in enumerate(body.capsules):
        sel = which == i
        if not sel.any():
            continue
        n = P[sel] - cap.closest(P[sel])
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        lam = 0.4 + 0.6 * np.maximum(n @ L, 0.0)
        col[sel] = np.asarray(cap.color, dtype=float) * (lam * texture_factor(P[sel]))[:, None]
    if box is not None:
        sel = which == len(body.capsules)
        if sel.any():
            q = P[sel]
            checker = (np.floor(q[:, 0] / 40) + np.floor(q[:, 1] / 40) + np.floor(q[:, 2] / 40)) % 2
            col[sel] = (90 + 90 * checker)[:, None]
    return col


def render_view(intr: Intrinsics, pose: Pose, body: CapsuleBody, light=(0.3, 0.8, 0.5),
                box: BoxModel | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Noise-free depth (mm, 0 = miss), linear colour (float RGB) and hit mask."""
    depth, P, which, hit = _cast(intr, pose, body, box)
    col = _shade(body, P, which, hit, light, box)
    return depth, col.reshape(intr.height, intr.width, 3), hit.reshape(intr.height, intr.width)


def render_frame(scene: SyntheticScene, sensor_index: int, frame_index: int) -> RgbdFrame:
    """Render sensor ``sensor_index`` at frame ``frame_index`` with the scene's noise model."""
    if not (0 <= sensor_index < len(scene.rig)) or not (0 <= frame_index < scene.n_frames):
        raise IndexError("sensor or frame index out of range")
    cam = scene.rig[sensor_index]
    body = scene.bodies[frame_index]
    depth, _, hit = render_view(cam.depth, cam.pose, body, scene.light)
    _, col, _ = render_view(cam.rgb, cam.rgb_world_pose, body, scene.light)
    if scene.depth_noise > 0:
        rng = np.random.default_rng([scene.seed, 1, sensor_index, frame_index])
        noise = rng.normal(size=depth.shape) * scene.depth_noise * depth / 2000.0
        depth = np.where(hit, np.maximum(depth + noise, 1.0), 0.0)
    color = np.clip(np.rint(col * scene.gain(sensor_index)), 0, 255).astype(np.uint8)
    return RgbdFrame(depth, color, hit, scene.timestamp(sensor_index, frame_index))


def render_box_depth(scene: SyntheticScene, sensor_index: int, n_frames: int = 5) -> list[RgbdFrame]:
    """Static frames of the calibration box alone (noisy if the scene has depth noise)."""
    if scene.box is None:
        raise ValueError("scene has no calibration box")
    cam = scene.rig[sensor_index]
    depth, col, hit = render_view(cam.depth, cam.pose, CapsuleBody.empty(), scene.light, scene.box)
    frames = []
    for i in range(n_frames):
        d = depth
        if scene.depth_noise > 0:
            rng = np.random.default_rng([scene.seed, 2, sensor_index, i])
            d = np.where(hit, np.maximum(depth + rng.normal(size=depth.shape) * scene.depth_noise * depth / 2000.0,
                                         1.0), 0.0)
        frames.append(RgbdFrame(d, np.zeros(cam.rgb.shape + (3,), np.uint8), hit, 0.0))
    return frames


def box_matches(scene: SyntheticScene, sensor_index: int, n_matches: int = 40, n_outliers: int = 0,
                seed: int | None = None) -> np.ndarray:
    """Feature matches ``(u_x, u_y, um_x, um_y)`` between a sensor's depth image and the box atlas.

    Inliers are box vertices visible from the sensor projected into its image;
    outliers pair random visible pixels with random atlas positions.
    """
    box = scene.box
    cam = scene.rig[sensor_index]
    rng = np.random.default_rng([scene.seed if seed is None else seed, 3, sensor_index])
    to_cam = cam.pose.t - box.vertices
    facing = np.einsum("ij,ij->i", box.normals, to_cam) > 1e-6 * np.linalg.norm(to_cam, axis=1)
    uv, z = project_points(cam.depth, cam.pose, box.vertices)
    margin = 2.0
    inb = (z > 0) & (uv[:, 0] >= margin) & (uv[:, 1] >= margin) \
        & (uv[:, 0] <= cam.depth.width - 1 - margin) & (uv[:, 1] <= cam.depth.height - 1 - margin)
    # keep away from the box edges where depth interpolation straddles faces
    c = np.asarray(box.center)
    h = np.asarray(box.size) / 2
    rel = np.abs(box.vertices - c)
    on_edge = (np.sum(rel > h - 25.0, axis=1) >= 2)
    cand = np.flatnonzero(facing & inb & ~on_edge)
    pick = rng.choice(cand, size=min(n_matches, len(cand)), replace=False)
    rows = [np.concatenate([uv[i], box.texcoords[i]]) for i in np.sort(pick)]
    for _ in range(n_outliers):
        i, j = rng.choice(cand, 2, replace=False)
        rows.append(np.concatenate([uv[i], box.texcoords[j]]))
    return np.array(rows).reshape(-1, 4)


def krt_correspondences(camera: Camera, n: int = 10, near: float = 500.0, far: float = 4500.0,
                        fov_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``n^3`` grid of depth-camera-frame points and their colour-camera pixels."""
    depth_mm = np.linspace(near, far, n)
    rgb = camera.rgb
    hx = (rgb.width / 2) / rgb.fx * fov_fraction
    hy = (rgb.height / 2) / rgb.fy * fov_fraction
    pts = []
    for Z in depth_mm:
        for a in np.linspace(-hx, hx, n):
            for b in np.linspace(-hy, hy, n):
                pts.append([a * Z, b * Z, Z])
    X = np.array(pts)
    uv, _ = project_points(rgb, camera.rgb_pose, X)
    return X, uv


# ---------------------------------------------------------------------------
# presets


def audio_tracks(scene: SyntheticScene, sample_rate: int = 16000, duration: float = 2.0,
                 clap_time: float = 700.0) -> list[np.ndarray]:
    """Per-sensor microphone signals of one hand clap at global time ``clap_time`` ms.

    Each track starts at local time 0, so the clap appears ``offset_k`` later
    relative to a zero-offset sensor.
    """
    rng = np.random.default_rng([scene.seed, 5])
    burst_len = int(0.03 * sample_rate)
    burst = rng.normal(size=burst_len) * np.exp(-np.arange(burst_len) / (0.006 * sample_rate))
    n = int(duration * sample_rate)
    tracks = []
    for k in range(len(scene.rig)):
        noise = np.random.default_rng([scene.seed, 6, k]).normal(size=n) * 0.01
        start = int(round((clap_time + scene.offset(k)) * sample_rate / 1000.0))
        sig = noise.copy()
        sig[start:start + burst_len] += 0.5 * burst[: max(0, min(burst_len, n - start))]
        tracks.append(np.clip(sig, -1, 1))
    return tracks


def kick_params(n_frames: int = 60) -> list[PoseParams]:
    """Right-leg punt-like kick: hip swings forward while the knee folds and extends."""
    out = []
    for i in range(n_frames):
        ph = i / max(n_frames - 1, 1)
        hip = 55.0 * math.sin(math.pi * ph) ** 2
        knee = 15.0 + 75.0 * math.sin(math.pi * min(1.0, 1.6 * ph)) ** 2 * (1 - 0.5 * ph)
        out.append(replace(XPOSE, r_hip_flexion=hip, r_knee=knee, r_leg_spread=8.0))
    return out


def make_scene(preset: str = "xpose", n_frames: int = 3, seed: int = 0, scale: float = 1.0,
               n_recon: int = 4, n_heldout: int = 2, depth_noise: float = 0.0,
               shape: BodyShape = BodyShape(), with_box: bool = True, **kwargs) -> SyntheticScene:
    """Named scenes: ``xpose`` (static X-pose), ``kick`` (knee-flexion sequence),
    ``hands_on_hips`` and ``walk_in_place`` (small periodic motion)."""
    if preset == "xpose":
        params = [XPOSE] * n_frames
    elif preset == "kick":
        params = kick_params(n_frames)
    elif preset == "hands_on_hips":
        params = [replace(XPOSE, hands_on_hips=True, l_knee=10.0, r_knee=10.0)] * n_frames
    elif preset == "walk_in_place":
        params = [replace(XPOSE, l_hip_flexion=20 * max(0.0, math.sin(0.3 * i)),
                          r_hip_flexion=20 * max(0.0, -math.sin(0.3 * i)),
                          l_knee=20 + 30 * max(0.0, math.sin(0.3 * i)),
                          r_knee=20 + 30 * max(0.0, -math.sin(0.3 * i)), yaw=2.0 * i)
                  for i in range(n_frames)]
    else:
        raise ValueError(f"unknown preset {preset!r}")
    rig = make_rig(n_recon, n_heldout, scale=scale)
    K = len(rig)
    rng = np.random.default_rng([seed, 11])
    offsets = kwargs.pop("clock_offsets", None)
    if offsets is None:
        offsets = tuple([0.0] + [float(x) for x in np.round(rng.uniform(-15, 15, K - 1), 2)])
    gains = kwargs.pop("color_gains", None)
    if gains is None:
        base = (1.0, 0.9, 1.1, 0.95)
        gains = tuple(base[k % 4] if k < n_recon else 1.0 for k in range(K))
    return SyntheticScene([pose_body(shape, p) for p in params], rig, seed=seed, depth_noise=depth_noise,
                          clock_offsets=offsets, color_gains=gains, box=BoxModel() if with_box else None,
                          preset=preset, **kwargs)


# ---------------------------------------------------------------------------
# export


def export_dataset(scene: SyntheticScene, out_dir: str | Path, n_samples: int = 20000,
                   box_frames: int = 5, with_audio: bool = True) -> Path:
    """Write the scene to disk in the dataset layout used by every pipeline stage."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        scene.rig.save(out / "rig.json")
        joints = []
        pts_all, nrm_all, fr_all = [], [], []
        for n, body in enumerate(scene.bodies):
            joints.append({"frame": n, "time_ms": n * scene.frame_interval,
                           "joints": {k: v.tolist() for k, v in body.joints.items()}})
            p, nn = body.sample_surface(n_samples, seed=scene.seed * 100003 + n)
            pts_all.append(p)
            nrm_all.append(nn)
            fr_all.append(np.full(len(p), n))
        gt = out / "gt"
        gt.mkdir(exist_ok=True)
        fileio.write_json(gt / "joints.json", {"joint_names": list(JOINT_NAMES), "bones": [list(b) for b in BONES],
                                               "frames": joints})
        fileio.write_json(gt / "bodies.json", [b.to_dict() for b in scene.bodies])
        fileio.write_ply(gt / "surface_samples.ply", np.vstack(pts_all), np.vstack(nrm_all),
                         extra={"frame": np.concatenate(fr_all).astype(float)})
        scene.rig.save(gt / "rig.json")
        fileio.write_json(gt / "scene.json", {
            "preset": scene.preset, "seed": scene.seed, "n_frames": scene.n_frames,
            "clock_offsets_ms": [scene.offset(k) for k in range(len(scene.rig))],
            "color_gains": [scene.gain(k) for k in range(len(scene.rig))],
            "depth_noise_mm_at_2m": scene.depth_noise, "frame_interval_ms": scene.frame_interval})
        for k in range(len(scene.rig)):
            d = out / "frames" / f"cam{k}"
            d.mkdir(parents=True, exist_ok=True)
            rows = []
            for n in scene.frame_ids(k):
                fr = render_frame(scene, k, n)
                fileio.write_depth_png(d / f"{n:04d}_depth.png", fr.depth)
                fileio.write_color_png(d / f"{n:04d}_color.png", fr.color)
                rows.append((n, f"{fr.timestamp:.3f}"))
            fileio.write_csv(d / "timestamps.csv", ["frame", "ms"], rows)
        if with_audio:
            (out / "audio").mkdir(exist_ok=True)
            for k, sig in enumerate(audio_tracks(scene)):
                fileio.write_wav(out / "audio" / f"cam{k}.wav", sig, 16000)
        if scene.box is not None:
            cal = out / "calib"
            cal.mkdir(exist_ok=True)
            fileio.write_obj(cal / "model.obj", scene.box.mesh())
            rows = []
            for k in range(len(scene.rig)):
                cd = cal / f"cam{k}"
                cd.mkdir(exist_ok=True)
                for i, fr in enumerate(render_box_depth(scene, k, box_frames)):
                    fileio.write_depth_png(cd / f"{i:04d}_depth.png", fr.depth)
                for m in box_matches(scene, k, n_matches=40, n_outliers=4):
                    rows.append((k, *(f"{x:.4f}" for x in m)))
                X, uv = krt_correspondences(scene.rig[k])
                fileio.write_csv(cal / f"krt_cam{k}.csv", ["X", "Y", "Z", "u", "v"],
                                 [tuple(f"{x:.6f}" for x in np.concatenate([a, b])) for a, b in zip(X, uv)])
            fileio.write_csv(cal / "matches.csv", ["k", "u_x", "u_y", "um_x", "um_y"], rows)
    except OSError as exc:
        raise OSError(f"failed writing dataset under {out}: {exc}") from exc
    return out
