"""Volume-based skeleton tracking and X-pose user calibration.

A frame's implicit volume is binarised and thinned to a curve skeleton, the
skeleton's radius graph is reduced to its minimum spanning tree, and the
tree's leaves, the spine and a PCA trunk frame drive joint placement.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from skimage.morphology import skeletonize as _skeletonize

from . import fileio
from .core import VolumeGrid
from .synth import BONES, JOINT_NAMES, flexion_angle

log = logging.getLogger(__name__)

CONNECT_RADIUS_MM = 150.0
SMOOTH_HALF = 2
N_EXACT = 5000
N_SUBSAMPLE = 2000
SPUR_MIN_MM = 100.0
ISOTROPY_RATIO = 1.2
TRUNK_RADIUS_FACTOR = 1.5
N_CAL = 10
TAU_REP_MM = 20.0
SYMMETRY_TOL = 0.10
SIGMA_A = 5000.0          # mm/s^2
SIGMA_Z = 15.0           # mm

EXTREMITIES = ("head", "l_wrist", "r_wrist", "l_ankle", "r_ankle")
RIGID = ("neck", "l_shoulder", "r_shoulder", "l_hip", "r_hip")
LIMBS = {"l_elbow": ("l_shoulder", "l_wrist"), "r_elbow": ("r_shoulder", "r_wrist"),
         "l_knee": ("l_hip", "l_ankle"), "r_knee": ("r_hip", "r_ankle")}
ANGLES = {"l_elbow": ("l_shoulder", "l_elbow", "l_wrist"), "r_elbow": ("r_shoulder", "r_elbow", "r_wrist"),
          "l_knee": ("l_hip", "l_knee", "l_ankle"), "r_knee": ("r_hip", "r_knee", "r_ankle")}


class TrackingLost(RuntimeError):
    """The frame does not yield a usable skeleton."""


class CalibrationFailed(RuntimeError):
    """No window of frames satisfied the repeatability and symmetry rules."""


# ---------------------------------------------------------------------------
# binary volume and skeleton


@dataclass(eq=False)
class BinaryVolume:
    """Interior voxels ``A_h`` and, once thinned, the skeleton voxels ``Q_s``."""

    grid: VolumeGrid
    skeleton: np.ndarray | None = None

    @property
    def mask(self) -> np.ndarray:
        return self.grid.data

    def points(self) -> np.ndarray:
        return self.grid.centers(self.mask)

    def skeleton_points(self) -> np.ndarray:
        if self.skeleton is None:
            raise ValueError("volume has not been skeletonised")
        return self.grid.centers(self.skeleton)


_FULL = np.ones((3, 3, 3), dtype=bool)


def largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask, structure=_FULL)
    if n <= 1:
        return mask.astype(bool)
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    return lab == int(np.argmax(sizes))


def binarize(A: VolumeGrid, level: float) -> BinaryVolume:
    """Voxels on the interior side of ``level`` (the side holding max A), largest 26-component only."""
    data = np.asarray(A.data, dtype=float)
    mask = data > level if data.max() > level else data < level
    if not mask.any():
        raise TrackingLost("volume has no interior voxels")
    return BinaryVolume(A.like(largest_component(mask)))


def skeletonize(bv: BinaryVolume) -> BinaryVolume:
    """Topology-preserving 3D thinning of the interior."""
    sk = _skeletonize(bv.mask.astype(np.uint8)).astype(bool)
    if not sk.any():
        sk = np.zeros_like(bv.mask)
        c = np.argwhere(bv.mask)
        sk[tuple(c[len(c) // 2])] = True
    return BinaryVolume(bv.grid, sk & bv.mask)


def find_torso(body_points: np.ndarray, skeleton_points: np.ndarray, n_exact: int = N_EXACT,
               n_subsample: int = N_SUBSAMPLE, seed: int = 0) -> tuple[np.ndarray, int]:
    """Most central interior voxel (least mean distance to the body) snapped to the skeleton.

    Returns the torso position and its index in ``skeleton_points``.
    """
    Q = np.asarray(body_points, dtype=float)
    ref = Q
    if len(Q) > n_exact:
        rng = np.random.default_rng(seed)
        ref = Q[np.sort(rng.choice(len(Q), n_subsample, replace=False))]
    D = np.empty(len(Q))
    for s in range(0, len(Q), 1024):
        blk = Q[s:s + 1024]
        D[s:s + 1024] = cdist(blk, ref).mean(axis=1)
    qc = Q[int(np.argmin(D))]
    _, j = cKDTree(skeleton_points).query(qc)
    return np.asarray(skeleton_points[j], dtype=float), int(j)


# ---------------------------------------------------------------------------
# graph


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, a: int) -> int:
        p = self.parent
        while p[a] != a:
            p[a] = p[p[a]]
            a = p[a]
        return a

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True


def kruskal(n: int, edges: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Indices of the minimum-spanning-forest edges (ties broken by edge order)."""
    order = np.lexsort((np.arange(len(weights)), weights))
    ds = _DisjointSet(n)
    keep = [int(e) for e in order if ds.union(int(edges[e, 0]), int(edges[e, 1]))]
    return np.array(sorted(keep), dtype=np.int64)


@dataclass(eq=False)
class SkeletonGraph:
    """Skeleton nodes, their radius graph and its minimum spanning tree."""

    nodes: np.ndarray
    edges: np.ndarray
    weights: np.ndarray
    tree_edges: np.ndarray
    adjacency: list[dict[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.adjacency:
            self.adjacency = [dict() for _ in range(len(self.nodes))]
            for e in self.tree_edges:
                a, b = (int(x) for x in self.edges[e])
                w = float(self.weights[e])
                self.adjacency[a][b] = w
                self.adjacency[b][a] = w

    def __len__(self) -> int:
        return len(self.nodes)

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    def tree_weight(self) -> float:
        return float(self.weights[self.tree_edges].sum())

    def component(self, root: int) -> list[int]:
        seen = {root}
        q = deque([root])
        while q:
            a = q.popleft()
            for b in self.adjacency[a]:
                if b not in seen:
                    seen.add(b)
                    q.append(b)
        return sorted(seen)

    def rooted(self, root: int) -> "RootedTree":
        parent = {root: -1}
        dist = {root: 0.0}
        depth = {root: 0}
        q = deque([root])
        while q:
            a = q.popleft()
            for b in sorted(self.adjacency[a]):
                if b not in parent:
                    parent[b] = a
                    dist[b] = dist[a] + self.adjacency[a][b]
                    depth[b] = depth[a] + 1
                    q.append(b)
        return RootedTree(self, root, parent, dist, depth)

    def without_nodes(self, drop: set[int]) -> "SkeletonGraph":
        adj = [dict() if i in drop else {j: w for j, w in nb.items() if j not in drop}
               for i, nb in enumerate(self.adjacency)]
        return SkeletonGraph(self.nodes, self.edges, self.weights, self.tree_edges, adj)


@dataclass(eq=False)
class RootedTree:
    graph: SkeletonGraph
    root: int
    parent: dict[int, int]
    dist: dict[int, float]
    depth: dict[int, int]

    def leaves(self) -> list[int]:
        return sorted(i for i in self.parent if self.graph.degree(i) == 1 and i != self.root)

    def path_to_root(self, a: int) -> list[int]:
        out = [a]
        while self.parent[out[-1]] >= 0:
            out.append(self.parent[out[-1]])
        return out

    def lca(self, a: int, b: int) -> int:
        while self.depth[a] > self.depth[b]:
            a = self.parent[a]
        while self.depth[b] > self.depth[a]:
            b = self.parent[b]
        while a != b:
            a, b = self.parent[a], self.parent[b]
        return a

    def path(self, a: int, b: int) -> list[int]:
        c = self.lca(a, b)
        up = []
        x = a
        while x != c:
            up.append(x)
            x = self.parent[x]
        down = []
        x = b
        while x != c:
            down.append(x)
            x = self.parent[x]
        return up + [c] + down[::-1]

    def geodesic(self, a: int, b: int) -> float:
        c = self.lca(a, b)
        return self.dist[a] + self.dist[b] - 2 * self.dist[c]


def build_mst(nodes: np.ndarray, radius: float = CONNECT_RADIUS_MM) -> SkeletonGraph:
    """Radius graph over the nodes with Euclidean costs, reduced by Kruskal's algorithm."""
    nodes = np.asarray(nodes, dtype=float).reshape(-1, 3)
    if len(nodes) == 0:
        raise TrackingLost("empty skeleton")
    pairs = cKDTree(nodes).query_pairs(radius, output_type="ndarray")
    pairs = np.sort(pairs.reshape(-1, 2), axis=1)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    w = np.linalg.norm(nodes[pairs[:, 0]] - nodes[pairs[:, 1]], axis=1) if len(pairs) else np.zeros(0)
    tree = kruskal(len(nodes), pairs, w)
    g = SkeletonGraph(nodes, pairs, w, tree)
    if len(tree) < len(nodes) - 1:
        log.warning("skeleton radius graph is disconnected; using a spanning forest")
    return g


def prune_spurs(graph: SkeletonGraph, root: int, min_length: float = SPUR_MIN_MM) -> SkeletonGraph:
    """Remove short leaf branches (leaf to nearest junction shorter than ``min_length``)."""
    adj = [dict(nb) for nb in graph.adjacency]
    changed = True
    while changed:
        changed = False
        for leaf in range(len(adj)):
            if len(adj[leaf]) != 1 or leaf == root:
                continue
            branch, length, cur, prev = [leaf], 0.0, leaf, -1
            while True:
                nxt = [b for b in adj[cur] if b != prev]
                if len(nxt) != 1:
                    break
                length += adj[cur][nxt[0]]
                prev, cur = cur, nxt[0]
                if len(adj[cur]) != 2 or cur == root:
                    break
                branch.append(cur)
            if len(adj[cur]) >= 3 and length < min_length:
                for b in branch:
                    for nb in list(adj[b]):
                        del adj[nb][b]
                    adj[b] = {}
                changed = True
    return SkeletonGraph(graph.nodes, graph.edges, graph.weights, graph.tree_edges, adj)


# ---------------------------------------------------------------------------
# extremities, spine, trunk frame


@dataclass(eq=False)
class Extremities:
    head: int
    upper: list[int]           # wrists (unlabelled side)
    lower: list[int]           # ankles (unlabelled side)
    n_detected: int


def detect_extremities(tree: RootedTree, up: np.ndarray = np.array([0.0, 1.0, 0.0]),
                       calib: "BodyCalibration | None" = None) -> Extremities:
    """Head, wrist and ankle leaves of the torso-rooted tree."""
    nodes = tree.graph.nodes
    leaves = tree.leaves()
    nd = len(leaves)
    if nd < 2:
        raise TrackingLost(f"skeleton tree has {nd} leaves")
    height = {i: float(nodes[i] @ up) for i in leaves}
    if nd > 5 and calib is not None:
        labels = ["head", "wrist", "wrist", "ankle", "ankle"]
        target = [calib.geodesic["head"], calib.geodesic["l_wrist"], calib.geodesic["r_wrist"],
                  calib.geodesic["l_ankle"], calib.geodesic["r_ankle"]]
        cost = np.array([[abs(tree.dist[i] - t) for t in target] for i in leaves])
        rows, cols = linear_sum_assignment(cost)
        sel = {labels[c]: [] for c in cols}
        for r, c in zip(rows, cols):
            sel[labels[c]].append(leaves[r])
        head = sel["head"][0]
        return Extremities(head, sorted(sel["wrist"]), sorted(sel["ankle"]), nd)
    if nd > 5:
        # no calibration yet: keep the five leaves farthest from the torso along the tree
        leaves = sorted(sorted(leaves, key=lambda i: -tree.dist[i])[:5])
        height = {i: height[i] for i in leaves}
    order = sorted(leaves, key=lambda i: (height[i], i))
    lower = sorted(order[:2]) if len(order) >= 3 else [order[0]]
    if len(leaves) >= 5:
        upper_all = [i for i in leaves if i not in lower]
    else:
        # expose the upper tree by removing the ankle-to-torso paths
        low_nodes = set()
        for a in lower:
            low_nodes.update(tree.path_to_root(a))
        sub = tree.graph.without_nodes(low_nodes)
        # leaves of the remaining upper tree, not counting the cut points
        upper_all = sorted(i for i in tree.parent if i not in low_nodes and sub.degree(i) == 1
                           and tree.parent[i] not in low_nodes)
    if not upper_all:
        raise TrackingLost("no upper-body extremity")
    head = min(upper_all, key=lambda i: (tree.dist[i], i))
    wrists = [i for i in upper_all if i != head]
    if len(wrists) > 2:
        if calib is not None:
            t = 0.5 * (calib.geodesic["l_wrist"] + calib.geodesic["r_wrist"])
            wrists = sorted(wrists, key=lambda i: (abs(tree.dist[i] - t), i))[:2]
        else:
            wrists = sorted(wrists, key=lambda i: (-tree.dist[i], i))[:2]
    return Extremities(head, sorted(wrists), lower, nd)


def extract_spine(tree: RootedTree, ext: Extremities) -> list[int]:
    """Nodes common to every extremity-pair path through the torso, ordered from the lower end."""
    ends = [ext.head] + ext.upper + ext.lower
    paths = []
    for i, a in enumerate(ends):
        for b in ends[i + 1:]:
            if tree.lca(a, b) == tree.root:
                paths.append(tree.path(a, b))
    if paths:
        common = set(paths[0])
        for p in paths[1:]:
            common &= set(p)
        if common:
            ref = tree.path(ext.lower[0], ext.head) if ext.lower else paths[0]
            return [n for n in ref if n in common]
    log.warning("empty spine intersection; using the head-to-torso path")
    return tree.path(tree.root, ext.head)


def trunk_radius(bv: BinaryVolume, spine_points: np.ndarray) -> float:
    """1.5 times the median distance from the spine to the interior boundary (mm)."""
    edt = ndimage.distance_transform_edt(bv.mask) * bv.grid.edge
    q = np.rint(bv.grid.to_grid(spine_points)).astype(np.int64)
    q = np.clip(q, 0, np.array(bv.mask.shape) - 1)
    return TRUNK_RADIUS_FACTOR * float(np.median(edt[q[:, 0], q[:, 1], q[:, 2]]))


def trunk_points(bv: BinaryVolume, spine_points: np.ndarray, r_tr: float) -> np.ndarray:
    P = bv.points()
    d, _ = cKDTree(spine_points).query(P, distance_upper_bound=r_tr)
    return P[np.isfinite(d)]


def torso_orientation(P_tr: np.ndarray, head_dir: np.ndarray, front_hint: np.ndarray = np.array([0.0, 0.0, 1.0]),
                      previous: np.ndarray | None = None) -> np.ndarray:
    """PCA trunk frame with columns ``[up, right, front]``.

    ``up`` (largest variance) points toward the head; ``front`` (smallest)
    follows the previous frame's front, else ``front_hint``. Near-isotropic
    trunks reuse ``previous``.
    """
    if len(P_tr) < 10:
        raise TrackingLost("fewer than 10 trunk voxels")
    C = np.cov((P_tr - P_tr.mean(axis=0)).T)
    lam, vec = np.linalg.eigh(C)
    lam, vec = lam[::-1], vec[:, ::-1]
    if lam[1] <= 0 or lam[0] / lam[1] < ISOTROPY_RATIO:
        if previous is None:
            raise TrackingLost("trunk is near-isotropic and no previous orientation exists")
        return previous.copy()
    up = vec[:, 0] * (1.0 if vec[:, 0] @ head_dir >= 0 else -1.0)
    front = vec[:, 2]
    ref = previous[:, 2] if previous is not None else np.asarray(front_hint, dtype=float)
    if front @ ref < 0:
        front = -front
    right = np.cross(front, up)
    right /= np.linalg.norm(right)
    front = np.cross(up, right)
    return np.column_stack([up, right, front])


# ---------------------------------------------------------------------------
# joint solvers


def solve_link_joint(path_points: np.ndarray, X_r: np.ndarray, X_x: np.ndarray, d_r: float, d_x: float) -> int:
    """Index of the path node best matching both bone lengths (full scan; ties toward the middle)."""
    P = np.asarray(path_points, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        raise ValueError("empty path")
    cost = np.abs(np.linalg.norm(P - X_r, axis=1) - d_r) + np.abs(np.linalg.norm(P - X_x, axis=1) - d_x)
    best = cost.min()
    cand = np.flatnonzero(cost == best)
    mid = (len(P) - 1) / 2
    return int(cand[np.argmin(np.abs(cand - mid))])


def point_segment_distance(P: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=float).reshape(-1, 3)
    ab = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    L2 = float(ab @ ab)
    t = np.zeros(len(P)) if L2 == 0 else np.clip((P - a) @ ab / L2, 0.0, 1.0)
    return np.linalg.norm(P - (a + t[:, None] * ab), axis=1)


def farthest_from_segment(path_points: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[int, float]:
    """Path node with maximum distance to segment ``ab`` (full scan; first on ties)."""
    d = point_segment_distance(path_points, a, b)
    i = int(np.argmax(d))
    return i, float(d[i])


# ---------------------------------------------------------------------------
# Kalman smoothing


class JointKalman:
    """Independent constant-velocity filters per joint and axis."""

    def __init__(self, names: Sequence[str] = JOINT_NAMES, sigma_a: float = SIGMA_A, sigma_z: float = SIGMA_Z,
                 sigma_v0: float = 1000.0):
        self.names = tuple(names)
        self.sigma_a = sigma_a
        self.sigma_z = sigma_z
        self.sigma_v0 = sigma_v0
        self.x: dict[str, np.ndarray] = {}     # (2, 3): position, velocity (mm, mm/s)
        self.P: dict[str, np.ndarray] = {}     # (2, 2) shared by the three axes
        self.time: float | None = None

    def _predict(self, name: str, dt: float):
        F = np.array([[1.0, dt], [0.0, 1.0]])
        q = self.sigma_a ** 2
        Q = q * np.array([[dt ** 4 / 4, dt ** 3 / 2], [dt ** 3 / 2, dt ** 2]])
        self.x[name] = F @ self.x[name]
        self.P[name] = F @ self.P[name] @ F.T + Q

    def update(self, t_ms: float, measurements: dict[str, np.ndarray | None]) -> dict[str, np.ndarray]:
        """Advance to ``t_ms`` and fuse the available measurements; returns filtered positions."""
        dt = 0.0 if self.time is None else (t_ms - self.time) / 1000.0
        self.time = t_ms
        out = {}
        for name in self.names:
            z = measurements.get(name)
            if name not in self.x:
                if z is None:
                    continue
                self.x[name] = np.vstack([np.asarray(z, dtype=float), np.zeros(3)])
                self.P[name] = np.diag([self.sigma_z ** 2, self.sigma_v0 ** 2])
                out[name] = self.x[name][0].copy()
                continue
            if dt > 0:
                self._predict(name, dt)
            if z is not None:
                P = self.P[name]
                S = P[0, 0] + self.sigma_z ** 2
                K = P[:, 0] / S
                innov = np.asarray(z, dtype=float) - self.x[name][0]
                self.x[name] = self.x[name] + K[:, None] * innov[None, :]
                self.P[name] = P - np.outer(K, P[0])
            out[name] = self.x[name][0].copy()
        return out


# ---------------------------------------------------------------------------
# calibration


@dataclass(eq=False)
class BodyCalibration:
    bone_lengths: dict[str, float]
    geodesic: dict[str, float]
    rigid_offsets: dict[str, np.ndarray]
    n_frames: int = 0

    def bone(self, a: str, b: str) -> float:
        return self.bone_lengths.get(f"{a}-{b}", self.bone_lengths.get(f"{b}-{a}"))

    def to_dict(self) -> dict:
        return {"bone_lengths_mm": dict(sorted(self.bone_lengths.items())),
                "geodesic_to_torso_mm": dict(sorted(self.geodesic.items())),
                "rigid_offsets_mm": {k: [float(x) for x in v] for k, v in sorted(self.rigid_offsets.items())},
                "frames_used": self.n_frames}

    @classmethod
    def from_dict(cls, d: dict) -> "BodyCalibration":
        return cls({k: float(v) for k, v in d["bone_lengths_mm"].items()},
                   {k: float(v) for k, v in d["geodesic_to_torso_mm"].items()},
                   {k: np.asarray(v, dtype=float) for k, v in d["rigid_offsets_mm"].items()},
                   int(d.get("frames_used", 0)))

    def save(self, path: str | Path) -> None:
        fileio.write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "BodyCalibration":
        return cls.from_dict(fileio.read_json(path))


@dataclass(eq=False)
class FrameAnalysis:
    """Everything extracted from one volume before labelling sides."""

    volume: BinaryVolume
    graph: SkeletonGraph
    tree: RootedTree
    ext: Extremities
    spine: list[int]
    r_tr: float
    R_t: np.ndarray
    p_t: np.ndarray

    @property
    def nodes(self) -> np.ndarray:
        return self.graph.nodes


def analyse_volume(A: VolumeGrid, level: float, up: np.ndarray = np.array([0.0, 1.0, 0.0]),
                   calib: BodyCalibration | None = None, previous_R: np.ndarray | None = None,
                   front_hint: np.ndarray = np.array([0.0, 0.0, 1.0]), seed: int = 0) -> FrameAnalysis:
    bv = skeletonize(binarize(A, level))
    S = bv.skeleton_points()
    p_t, ti = find_torso(bv.points(), S, seed=seed)
    g = prune_spurs(build_mst(S), ti)
    tree = g.rooted(ti)
    ext = detect_extremities(tree, up, calib)
    spine = extract_spine(tree, ext)
    r_tr = trunk_radius(bv, S[spine])
    P_tr = trunk_points(bv, S[spine], r_tr)
    R_t = torso_orientation(P_tr, S[ext.head] - p_t, front_hint, previous_R)
    return FrameAnalysis(bv, g, tree, ext, spine, r_tr, R_t, p_t)


def _side(fa: FrameAnalysis, pair: list[int]) -> dict[str, int]:
    """Assign l/r to two leaves by their position along the trunk's right axis."""
    right = fa.R_t[:, 1]
    if len(pair) == 1:
        s = (fa.nodes[pair[0]] - fa.p_t) @ right
        return {"r" if s > 0 else "l": pair[0]}
    a, b = pair
    if (fa.nodes[a] - fa.p_t) @ right > (fa.nodes[b] - fa.p_t) @ right:
        return {"r": a, "l": b}
    return {"l": a, "r": b}


def label_extremities(fa: FrameAnalysis) -> dict[str, int]:
    lab = {"head": fa.ext.head}
    for s, i in _side(fa, fa.ext.upper).items():
        lab[f"{s}_wrist"] = i
    for s, i in _side(fa, fa.ext.lower).items():
        lab[f"{s}_ankle"] = i
    return lab


def _box_exit(nodes: np.ndarray, path: list[int], lo: np.ndarray, hi: np.ndarray) -> np.ndarray | None:
    """Where a leaf-to-torso path first enters the box: the crossing point on that tree edge."""
    inside = np.all((nodes[path] >= lo) & (nodes[path] <= hi), axis=1)
    hit = np.flatnonzero(inside)
    if len(hit) == 0 or hit[0] == 0:
        return None
    a, b = nodes[path[hit[0] - 1]], nodes[path[hit[0]]]
    # a outside, b inside: smallest t in [0, 1] with a + t (b - a) inside
    d = b - a
    t_enter = 0.0
    for ax in range(3):
        if d[ax] != 0:
            t0, t1 = (lo[ax] - a[ax]) / d[ax], (hi[ax] - a[ax]) / d[ax]
            t_enter = max(t_enter, min(t0, t1))
    return a + min(max(t_enter, 0.0), 1.0) * d


def _smooth_path(P: np.ndarray, half: int = SMOOTH_HALF) -> np.ndarray:
    """Moving average along a path (window 2*half+1, shrinking at the ends)."""
    if half <= 0 or len(P) < 3:
        return P
    c = np.vstack([np.zeros((1, 3)), np.cumsum(P, axis=0)])
    i = np.arange(len(P))
    a = np.maximum(i - half, 0)
    b = np.minimum(i + half + 1, len(P))
    return (c[b] - c[a]) / (b - a)[:, None]


def calibration_frame(fa: FrameAnalysis) -> dict | None:
    """Per-frame joint estimates of the X-pose rules, or None when the frame is unusable."""
    if fa.ext.n_detected != 5 or len(fa.ext.upper) != 2 or len(fa.ext.lower) != 2:
        return None
    lab = label_extremities(fa)
    if len(lab) != 5:
        return None
    # trunk box: spine extent expanded by r_tr, axis-aligned in the trunk frame
    nodes = (fa.nodes - fa.p_t) @ fa.R_t
    spine_pts = nodes[fa.spine]
    lo = spine_pts.min(axis=0) - fa.r_tr
    hi = spine_pts.max(axis=0) + fa.r_tr
    J = {"torso": fa.p_t.copy(), "head": fa.nodes[lab["head"]].copy()}
    paths = {}
    for name, root in (("wrist", "shoulder"), ("ankle", "hip")):
        for s in ("l", "r"):
            leaf = lab[f"{s}_{name}"]
            path = fa.tree.path_to_root(leaf)
            X = _box_exit(nodes, path, lo, hi)
            if X is None:
                return None
            J[f"{s}_{root}"] = fa.R_t @ X + fa.p_t
            J[f"{s}_{name}"] = fa.nodes[leaf].copy()
            inside = np.all((nodes[path] >= lo) & (nodes[path] <= hi), axis=1)
            paths[f"{s}_{name}"] = path[:int(np.flatnonzero(inside)[0])]
    J["neck"] = 0.5 * (J["l_shoulder"] + J["r_shoulder"])
    for link, (root, end) in LIMBS.items():
        pts = _smooth_path(fa.nodes[paths[end]])
        i, dmax = farthest_from_segment(pts, J[root], J[end])
        if dmax < 1e-9:
            return None
        J[link] = pts[i].copy()
    geo = {k: float(fa.tree.dist[lab[k]]) for k in EXTREMITIES}
    offsets = {k: fa.R_t.T @ (J[k] - fa.p_t) for k in RIGID}
    bones = {f"{a}-{b}": float(np.linalg.norm(J[b] - J[a])) for a, b in BONES}
    return {"joints": J, "bones": bones, "geodesic": geo, "offsets": offsets}


def _symmetric(bones: dict[str, float], tol: float) -> bool:
    for k, v in bones.items():
        if "l_" in k:
            w = bones.get(k.replace("l_", "r_"))
            if w is not None and abs(v - w) > tol * max(v, w):
                return False
    return True


def calibrate_user(volumes: Sequence[tuple[VolumeGrid, float]], up: np.ndarray = np.array([0.0, 1.0, 0.0]),
                   front_hint: np.ndarray = np.array([0.0, 0.0, 1.0]), n_cal: int = N_CAL,
                   tau_rep: float = TAU_REP_MM, symmetry_tol: float = SYMMETRY_TOL) -> BodyCalibration:
    """X-pose calibration over consecutive frames.

    Succeeds at the first window of ``n_cal`` consecutive usable frames whose
    bone lengths vary by at most ``tau_rep`` and whose left/right lengths agree
    within ``symmetry_tol``; the window means are returned.
    """
    window: list[dict] = []
    R_prev = None
    for A, L in volumes:
        est = None
        try:
            fa = analyse_volume(A, L, up, None, R_prev, front_hint)
            R_prev = fa.R_t
            est = calibration_frame(fa)
        except TrackingLost as exc:
            log.info("calibration frame skipped: %s", exc)
        if est is None or not _symmetric(est["bones"], symmetry_tol):
            window = []
            continue
        window.append(est)
        window = window[-n_cal:]
        if len(window) == n_cal:
            spread = max(max(w["bones"][k] for w in window) - min(w["bones"][k] for w in window)
                         for k in window[0]["bones"])
            if spread <= tau_rep:
                return BodyCalibration(
                    {k: float(np.mean([w["bones"][k] for w in window])) for k in window[0]["bones"]},
                    {k: float(np.mean([w["geodesic"][k] for w in window])) for k in EXTREMITIES},
                    {k: np.mean([w["offsets"][k] for w in window], axis=0) for k in RIGID}, n_cal)
    raise CalibrationFailed(f"no {n_cal} consecutive frames met the repeatability rules")


# ---------------------------------------------------------------------------
# tracking


@dataclass(eq=False)
class SkeletonPose:
    frame: int
    joints: dict[str, np.ndarray]
    R_t: np.ndarray | None
    valid: bool
    raw: dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"frame": self.frame, "valid": self.valid,
                "joints": {k: [float(x) for x in self.joints[k]] for k in JOINT_NAMES if k in self.joints},
                "R_t": None if self.R_t is None else [[float(x) for x in row] for row in self.R_t]}

    def angles(self) -> dict[str, float]:
        out = {}
        for name, (a, j, c) in ANGLES.items():
            if all(k in self.joints for k in (a, j, c)):
                out[name] = flexion_angle(self.joints[a], self.joints[j], self.joints[c])
        return out


def place_rigid_body(R_t: np.ndarray, p_t: np.ndarray, calib: BodyCalibration) -> dict[str, np.ndarray]:
    return {k: R_t @ calib.rigid_offsets[k] + p_t for k in RIGID}


class Tracker:
    """Stateful per-subject tracker."""

    def __init__(self, calib: BodyCalibration, up: np.ndarray = np.array([0.0, 1.0, 0.0]),
                 front_hint: np.ndarray = np.array([0.0, 0.0, 1.0]), sigma_a: float = SIGMA_A,
                 sigma_z: float = SIGMA_Z, smooth: bool = True):
        self.calib = calib
        self.up = np.asarray(up, dtype=float)
        self.front_hint = np.asarray(front_hint, dtype=float)
        self.kalman = JointKalman(sigma_a=sigma_a, sigma_z=sigma_z)
        self.R_prev: np.ndarray | None = None
        self.smooth = smooth

    def measure(self, A: VolumeGrid, level: float) -> tuple[dict[str, np.ndarray], np.ndarray]:
        fa = analyse_volume(A, level, self.up, self.calib, self.R_prev, self.front_hint)
        lab = label_extremities(fa)
        J = {"torso": fa.p_t.copy()}
        J.update(place_rigid_body(fa.R_t, fa.p_t, self.calib))
        for k, i in lab.items():
            J[k] = fa.nodes[i].copy()
        for link, (root, end) in LIMBS.items():
            if end not in lab or root not in J:
                continue
            path = fa.tree.path_to_root(lab[end])
            pts = fa.nodes[path]
            i = solve_link_joint(pts, J[root], J[end], self.calib.bone(root, link), self.calib.bone(link, end))
            J[link] = pts[i].copy()
        return J, fa.R_t

    def track_frame(self, A: VolumeGrid | None, level: float, frame: int, t_ms: float) -> SkeletonPose:
        raw: dict[str, np.ndarray] = {}
        R_t = None
        valid = False
        if A is not None:
            try:
                raw, R_t = self.measure(A, level)
                self.R_prev = R_t
                valid = True
            except TrackingLost as exc:
                log.info("frame %d: tracking lost (%s)", frame, exc)
        if self.smooth:
            joints = self.kalman.update(t_ms, raw)
        else:
            joints = raw
        return SkeletonPose(frame, joints, R_t if valid else self.R_prev, valid, raw)


def write_skeleton_jsonl(path: str | Path, poses: Sequence[SkeletonPose]) -> None:
    import json
    with open(path, "w") as fh:
        for p in poses:
            fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


def write_angles_csv(path: str | Path, poses: Sequence[SkeletonPose]) -> None:
    rows = []
    for p in poses:
        for name, deg in sorted(p.angles().items()):
            rows.append((p.frame, name, f"{deg:.3f}"))
    fileio.write_csv(path, ["frame", "joint", "degrees"], rows)
