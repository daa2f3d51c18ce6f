"""Mesh, point-cloud and image file formats."""

from __future__ import annotations

import csv
import json
import wave
from pathlib import Path

import numpy as np
from PIL import Image

from .core import RgbdFrame, TriMesh, VolumeGrid


class DataError(RuntimeError):
    """Malformed or missing input data, reported with its path."""


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# OBJ: standard v/vn/f records; extra per-vertex channels go into comment
# lines of the form "#@<name> <i> <values...>" so ordinary readers ignore them.


def write_obj(path: str | Path, mesh: TriMesh) -> None:
    lines = [f"# vertices {len(mesh.vertices)} faces {len(mesh.faces)}"]
    for name, values in sorted(mesh.attributes.items()):
        arr = np.asarray(values)
        cols = 1 if arr.ndim == 1 else int(np.prod(arr.shape[1:]))
        lines.append(f"#@channel {name} {cols} {arr.dtype.str}")
    lines += [f"v {_fmt(a)} {_fmt(b)} {_fmt(c)}" for a, b, c in mesh.vertices]
    if mesh.normals is not None:
        lines += [f"vn {_fmt(a)} {_fmt(b)} {_fmt(c)}" for a, b, c in mesh.normals]
    for name, values in sorted(mesh.attributes.items()):
        arr = np.asarray(values).reshape(len(mesh.vertices), -1)
        lines += [f"#@{name} {i} " + " ".join(str(x.item()) for x in row) for i, row in enumerate(arr)]
    if mesh.normals is not None:
        lines += [f"f {a + 1}//{a + 1} {b + 1}//{b + 1} {c + 1}//{c + 1}" for a, b, c in mesh.faces]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: str | Path) -> TriMesh:
    path = Path(path)
    verts, norms, faces = [], [], []
    channels: dict[str, tuple[int, str]] = {}
    channel_rows: dict[str, list] = {}
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for line in text.splitlines():
        if line.startswith("#@channel "):
            _, name, cols, dtype = line.split()
            channels[name] = (int(cols), dtype)
            channel_rows[name] = []
        elif line.startswith("#@"):
            head, _, rest = line[2:].partition(" ")
            if head in channels:
                channel_rows[head].append(rest.split()[1:])
        elif line.startswith("v "):
            verts.append([float(x) for x in line.split()[1:4]])
        elif line.startswith("vn "):
            norms.append([float(x) for x in line.split()[1:4]])
        elif line.startswith("f "):
            faces.append([int(tok.split("/")[0]) - 1 for tok in line.split()[1:4]])
    attrs = {}
    for name, (cols, dtype) in channels.items():
        arr = np.array(channel_rows[name], dtype=float).astype(np.dtype(dtype))
        attrs[name] = arr.reshape(len(verts)) if cols == 1 else arr.reshape(len(verts), cols)
    return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3),
                   np.array(norms) if norms else None, attrs)


# ---------------------------------------------------------------------------
# binary little-endian PLY


def write_ply(path: str | Path, points: np.ndarray, normals: np.ndarray | None = None,
              faces: np.ndarray | None = None, extra: dict[str, np.ndarray] | None = None) -> None:
    points = np.asarray(points, dtype="<f8").reshape(-1, 3)
    props = ["x", "y", "z"]
    cols = [points]
    if normals is not None:
        props += ["nx", "ny", "nz"]
        cols.append(np.asarray(normals, dtype="<f8").reshape(-1, 3))
    for name, values in sorted((extra or {}).items()):
        props.append(name)
        cols.append(np.asarray(values, dtype="<f8").reshape(-1, 1))
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(points)}"]
    header += [f"property double {p}" for p in props]
    if faces is not None:
        faces = np.asarray(faces, dtype="<i4").reshape(-1, 3)
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    body = np.ascontiguousarray(np.hstack(cols), dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(body)
        if faces is not None:
            rec = np.zeros(len(faces), dtype=[("n", "u1"), ("i", "<i4", 3)])
            rec["n"] = 3
            rec["i"] = faces
            fh.write(rec.tobytes())


def read_ply(path: str | Path) -> dict[str, np.ndarray]:
    """Read files written by :func:`write_ply`.

    Returns ``points`` plus ``normals``, ``faces`` and any extra per-vertex
    properties that are present.
    """
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise DataError(f"{path} is not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise DataError(f"{path}: only binary little-endian PLY is supported")
    n_vert = n_face = 0
    props = []
    for h in header:
        parts = h.split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
        elif parts[:2] == ["property", "double"]:
            props.append(parts[2])
    off = end + len(b"end_header\n")
    data = np.frombuffer(raw, dtype="<f8", count=n_vert * len(props), offset=off).reshape(n_vert, len(props))
    out = {"points": data[:, :3].copy()}
    if "nx" in props:
        out["normals"] = data[:, 3:6].copy()
    for i, name in enumerate(props):
        if name not in ("x", "y", "z", "nx", "ny", "nz"):
            out[name] = data[:, i].copy()
    if n_face:
        rec = np.frombuffer(raw, dtype=[("n", "u1"), ("i", "<i4", 3)], count=n_face,
                            offset=off + data.nbytes)
        out["faces"] = rec["i"].astype(np.int64)
    return out


def write_mesh(path: str | Path, mesh: TriMesh) -> None:
    """PLY keeps per-vertex attributes (column ``j`` of ``name`` as ``name__j``); OBJ keeps geometry."""
    path = Path(path)
    if path.suffix.lower() == ".ply":
        extra = {}
        for name, values in mesh.attributes.items():
            v = np.asarray(values, dtype=float).reshape(len(mesh.vertices), -1)
            for j in range(v.shape[1]):
                extra[f"{name}__{j:03d}"] = v[:, j]
        write_ply(path, mesh.vertices, mesh.normals, mesh.faces, extra)
    else:
        write_obj(path, mesh)


def read_mesh(path: str | Path) -> TriMesh:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        d = read_ply(path)
        cols: dict[str, list[tuple[int, np.ndarray]]] = {}
        for k, v in d.items():
            if "__" in k:
                name, j = k.rsplit("__", 1)
                cols.setdefault(name, []).append((int(j), v))
        attrs = {name: np.column_stack([v for _, v in sorted(c, key=lambda e: e[0])]) for name, c in cols.items()}
        return TriMesh(d["points"], d.get("faces", np.zeros((0, 3), dtype=np.int64)), d.get("normals"), attrs)
    return read_obj(path)


def write_volume(path: str | Path, volume: VolumeGrid, level: float) -> None:
    """Scalar volume as ``<path>.npy`` (float32) plus ``<path>.json`` with origin, edge and iso-level."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), np.asarray(volume.data, dtype="<f4"), allow_pickle=False)
    write_json(path.with_suffix(".json"), {"origin": [float(x) for x in volume.origin], "edge": volume.edge,
                                           "level": float(level), "shape": list(volume.shape)})


def read_volume(path: str | Path) -> tuple[VolumeGrid, float]:
    path = Path(path)
    try:
        meta = read_json(path.with_suffix(".json"))
        data = np.load(path.with_suffix(".npy"), allow_pickle=False).astype(float)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read volume {path}: {exc}") from exc
    return VolumeGrid(data, np.array(meta["origin"]), float(meta["edge"])), float(meta["level"])


# ---------------------------------------------------------------------------
# images


def write_depth_png(path: str | Path, depth_mm: np.ndarray) -> None:
    """16-bit grayscale PNG in millimetres, 0 = invalid."""
    d = np.asarray(depth_mm, dtype=float)
    q = np.where(d > 0, np.clip(np.rint(d), 1, 65535), 0).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")


def read_depth_png(path: str | Path) -> np.ndarray:
    try:
        img = Image.open(path)
    except OSError as exc:
        raise DataError(f"cannot read depth image {path}: {exc}") from exc
    return np.asarray(img, dtype=np.uint16).astype(float)


def write_color_png(path: str | Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def read_color_png(path: str | Path) -> np.ndarray:
    try:
        img = Image.open(path).convert("RGB")
    except OSError as exc:
        raise DataError(f"cannot read color image {path}: {exc}") from exc
    return np.asarray(img, dtype=np.uint8)


def write_mask_png(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path, format="PNG")


# ---------------------------------------------------------------------------
# audio, csv, json


def write_wav(path: str | Path, signal: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.rint(np.asarray(signal, dtype=float) * 32767), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Mono 16-bit PCM WAV to float samples in [-1, 1]."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM")
            rate = w.getframerate()
            data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
            if w.getnchannels() > 1:
                data = data.reshape(-1, w.getnchannels())[:, 0]
    except (OSError, wave.Error) as exc:
        raise DataError(f"cannot read audio {path}: {exc}") from exc
    return data.astype(float) / 32767.0, rate


def write_csv(path: str | Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path: str | Path) -> list[dict[str, str]]:
    try:
        with open(path, newline="") as fh:
            return [{k.strip(): v.strip() for k, v in row.items()} for row in csv.DictReader(fh)]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def read_frame(root: str | Path, sensor: int, frame: int, timestamp: float = 0.0) -> RgbdFrame:
    """One capture from the dataset layout; foreground is every pixel with valid depth."""
    d = Path(root) / "frames" / f"cam{sensor}"
    depth = read_depth_png(d / f"{frame:04d}_depth.png")
    color = read_color_png(d / f"{frame:04d}_color.png")
    return RgbdFrame(depth, color, depth > 0, timestamp)
