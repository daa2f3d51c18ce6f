"""NumPy implementations of the hot kernels.

These mirror ``_kernels.pyx`` operation for operation so that both backends
return identical meshes and raster buffers; splat sums agree to rounding.
"""

from __future__ import annotations

import numpy as np

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE

MC_T_MIN = 1e-7


def _edge_lookup():
    """Per local cube edge: (axis, offset of the edge's lower corner)."""
    axes = np.empty(12, dtype=np.int64)
    base = np.empty((12, 3), dtype=np.int64)
    for e, (a, b) in enumerate(EDGE_CORNERS):
        oa, ob = CORNER_OFFSETS[a], CORNER_OFFSETS[b]
        axes[e] = int(np.flatnonzero(oa != ob)[0])
        base[e] = np.minimum(oa, ob)
    return axes, base


EDGE_AXIS, EDGE_BASE = _edge_lookup()


def splat_weighted(points, normals, weights, origin, edge, shape, sigma1, sigma2):
    """Accumulate kernel-weighted normals and densities over the 4x4x4 support of each point.

    Returns ``(num, den)`` with ``num`` of shape ``shape + (3,)``.
    """
    nx, ny, nz = shape
    num = np.zeros((nx * ny * nz, 3))
    den = np.zeros(nx * ny * nz)
    if len(points) == 0:
        return num.reshape(nx, ny, nz, 3), den.reshape(nx, ny, nz)
    g = (points - origin) / edge
    base = np.floor(g).astype(np.int64) - 1
    inv1 = 1.0 / (sigma1 * sigma1)
    inv2 = 1.0 / (sigma2 * sigma2)
    for dx in range(4):
        ix = base[:, 0] + dx
        for dy in range(4):
            iy = base[:, 1] + dy
            for dz in range(4):
                iz = base[:, 2] + dz
                ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
                if not ok.any():
                    continue
                cx = origin[0] + ix[ok] * edge
                cy = origin[1] + iy[ok] * edge
                cz = origin[2] + iz[ok] * edge
                px = points[ok, 0] - cx
                py = points[ok, 1] - cy
                pz = points[ok, 2] - cz
                d2 = px * px + py * py + pz * pz
                w = weights[ok]
                g1 = np.exp(-d2 * inv1) / sigma1 * w
                g2 = np.exp(-d2 * inv2) / sigma2 * w
                flat = (ix[ok] * ny + iy[ok]) * nz + iz[ok]
                for c in range(3):
                    num[:, c] += np.bincount(flat, g1 * normals[ok, c], minlength=len(den))
                den += np.bincount(flat, g2, minlength=len(den))
    return num.reshape(nx, ny, nz, 3), den.reshape(nx, ny, nz)


def marching_cubes(A, level, flip=False):
    """Triangulate the level set of ``A``; vertices in fractional grid coordinates.

    Vertices sit on lattice edges whose endpoints straddle ``level`` and are
    numbered x-edges first, then y-edges, then z-edges, each in C order.
    """
    A = np.ascontiguousarray(A, dtype=float)
    out = A < level
    verts = []
    ids = []
    count = 0
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        a = A[tuple(lo)]
        b = A[tuple(hi)]
        cross = out[tuple(lo)] != out[tuple(hi)]
        idx = np.full(cross.shape, -1, dtype=np.int64)
        n = int(cross.sum())
        idx[cross] = np.arange(count, count + n)
        count += n
        ids.append(idx)
        va, vb = a[cross], b[cross]
        t = (level - va) / (vb - va)
        t = np.minimum(np.maximum(t, MC_T_MIN), 1.0 - MC_T_MIN)
        p = np.argwhere(cross).astype(float)
        p[:, axis] += t
        verts.append(p)
    verts = np.concatenate(verts) if verts else np.zeros((0, 3))

    nx, ny, nz = A.shape
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for c, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        case |= out[ox:nx - 1 + ox, oy:ny - 1 + oy, oz:nz - 1 + oz].astype(np.int64) << c
    cubes = np.argwhere((case != 0) & (case != 255))
    if len(cubes) == 0:
        return verts, np.zeros((0, 3), dtype=np.int64)
    rows = TRI_TABLE[case[cubes[:, 0], cubes[:, 1], cubes[:, 2]]]
    valid = rows >= 0
    local = np.where(valid, rows, 0)
    gid = np.empty(local.shape, dtype=np.int64)
    for e in range(12):
        sel = local == e
        if not sel.any():
            continue
        cell = np.nonzero(sel)[0]
        q = cubes[cell] + EDGE_BASE[e]
        gid[sel] = ids[EDGE_AXIS[e]][q[:, 0], q[:, 1], q[:, 2]]
    faces = gid[valid].reshape(-1, 3)
    if flip:
        faces = faces[:, [0, 2, 1]]
    return verts, np.ascontiguousarray(faces)


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _owns(ex, ey):
    # tie rule for pixels lying exactly on an edge
    return (ey > 0) | ((ey == 0) & (ex < 0))


def rasterize(x, y, z, faces, width, height, near=1.0):
    """Z-buffered triangle rasterization at pixel centres.

    ``x, y`` are continuous pixel coordinates and ``z`` camera depth per
    vertex. Returns depth (inf where empty), triangle id (-1 where empty)
    and perspective-correct barycentrics per pixel.
    """
    depth = np.full((height, width), np.inf)
    tri = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    for f in range(len(faces)):
        i0, i1, i2 = faces[f]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        if not (z0 > near and z1 > near and z2 > near):
            continue
        x0, y0, x1, y1, x2, y2 = x[i0], y[i0], x[i1], y[i1], x[i2], y[i2]
        area = _edge(x0, y0, x1, y1, x2, y2)
        if area == 0 or not np.isfinite(area):
            continue
        swap = area < 0
        if swap:
            x1, y1, x2, y2 = x2, y2, x1, y1
            z1, z2 = z2, z1
            area = -area
        xmin = max(0, int(np.ceil(min(x0, x1, x2))))
        xmax = min(width - 1, int(np.floor(max(x0, x1, x2))))
        ymin = max(0, int(np.ceil(min(y0, y1, y2))))
        ymax = min(height - 1, int(np.floor(max(y0, y1, y2))))
        if xmin > xmax or ymin > ymax:
            continue
        py, px = np.mgrid[ymin:ymax + 1, xmin:xmax + 1].astype(float)
        w0 = _edge(x1, y1, x2, y2, px, py)
        w1 = _edge(x2, y2, x0, y0, px, py)
        w2 = _edge(x0, y0, x1, y1, px, py)
        inside = (((w0 > 0) | ((w0 == 0) & _owns(x2 - x1, y2 - y1)))
                  & ((w1 > 0) | ((w1 == 0) & _owns(x0 - x2, y0 - y2)))
                  & ((w2 > 0) | ((w2 == 0) & _owns(x1 - x0, y1 - y0))))
        if not inside.any():
            continue
        l0 = w0[inside] / area
        l1 = w1[inside] / area
        l2 = w2[inside] / area
        q0 = l0 / z0
        q1 = l1 / z1
        q2 = l2 / z2
        inv = q0 + q1 + q2
        d = 1.0 / inv
        rr = py[inside].astype(np.int64)
        cc = px[inside].astype(np.int64)
        closer = d < depth[rr, cc]
        rr, cc, d = rr[closer], cc[closer], d[closer]
        b0, b1, b2 = q0[closer] / inv[closer], q1[closer] / inv[closer], q2[closer] / inv[closer]
        if swap:
            b1, b2 = b2, b1
        depth[rr, cc] = d
        tri[rr, cc] = f
        bary[rr, cc, 0] = b0
        bary[rr, cc, 1] = b1
        bary[rr, cc, 2] = b2
    return depth, tri, bary
