# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: weighted splatting, marching cubes and triangle rasterization."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor, ceil, fmin, fmax, isfinite

from ._mc_tables import TRI_TABLE
from ._pykernels import EDGE_AXIS, EDGE_BASE, MC_T_MIN

cnp.import_array()


def splat_weighted(double[:, ::1] points, double[:, ::1] normals, double[::1] weights,
                   origin, double edge, shape, double sigma1, double sigma2):
    cdef Py_ssize_t nx = shape[0], ny = shape[1], nz = shape[2]
    num_arr = np.zeros((nx, ny, nz, 3))
    den_arr = np.zeros((nx, ny, nz))
    cdef double[:, :, :, ::1] num = num_arr
    cdef double[:, :, ::1] den = den_arr
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef double inv1 = 1.0 / (sigma1 * sigma1), inv2 = 1.0 / (sigma2 * sigma2)
    cdef Py_ssize_t n = points.shape[0], p, bx, by, bz, ix, iy, iz, dx, dy, dz
    cdef double px, py, pz, d2, w, g1, g2
    with nogil:
        for p in range(n):
            w = weights[p]
            bx = <Py_ssize_t>floor((points[p, 0] - ox) / edge) - 1
            by = <Py_ssize_t>floor((points[p, 1] - oy) / edge) - 1
            bz = <Py_ssize_t>floor((points[p, 2] - oz) / edge) - 1
            for dx in range(4):
                ix = bx + dx
                if ix < 0 or ix >= nx:
                    continue
                for dy in range(4):
                    iy = by + dy
                    if iy < 0 or iy >= ny:
                        continue
                    for dz in range(4):
                        iz = bz + dz
                        if iz < 0 or iz >= nz:
                            continue
                        px = points[p, 0] - (ox + ix * edge)
                        py = points[p, 1] - (oy + iy * edge)
                        pz = points[p, 2] - (oz + iz * edge)
                        d2 = px * px + py * py + pz * pz
                        g1 = exp(-d2 * inv1) / sigma1 * w
                        g2 = exp(-d2 * inv2) / sigma2 * w
                        num[ix, iy, iz, 0] += g1 * normals[p, 0]
                        num[ix, iy, iz, 1] += g1 * normals[p, 1]
                        num[ix, iy, iz, 2] += g1 * normals[p, 2]
                        den[ix, iy, iz] += g2
    return num_arr, den_arr


def marching_cubes(A_in, double level, bint flip=False):
    cdef double[:, :, ::1] A = np.ascontiguousarray(A_in, dtype=np.float64)
    cdef Py_ssize_t nx = A.shape[0], ny = A.shape[1], nz = A.shape[2]
    cdef Py_ssize_t i, j, k, e, c, m, count = 0
    cdef double a, b, t, tmin = MC_T_MIN, tmax = 1.0 - MC_T_MIN
    idx_x_arr = np.full((max(nx - 1, 0), ny, nz), -1, dtype=np.int64)
    idx_y_arr = np.full((nx, max(ny - 1, 0), nz), -1, dtype=np.int64)
    idx_z_arr = np.full((nx, ny, max(nz - 1, 0)), -1, dtype=np.int64)
    cdef cnp.int64_t[:, :, ::1] idx_x = idx_x_arr
    cdef cnp.int64_t[:, :, ::1] idx_y = idx_y_arr
    cdef cnp.int64_t[:, :, ::1] idx_z = idx_z_arr

    # pass 1: count crossings
    with nogil:
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    a = A[i, j, k]
                    if i + 1 < nx and ((a < level) != (A[i + 1, j, k] < level)):
                        count += 1
                    if j + 1 < ny and ((a < level) != (A[i, j + 1, k] < level)):
                        count += 1
                    if k + 1 < nz and ((a < level) != (A[i, j, k + 1] < level)):
                        count += 1
    verts_arr = np.empty((count, 3))
    cdef double[:, ::1] verts = verts_arr
    m = 0
    with nogil:
        for i in range(nx - 1):
            for j in range(ny):
                for k in range(nz):
                    a = A[i, j, k]
                    b = A[i + 1, j, k]
                    if (a < level) != (b < level):
                        t = fmin(fmax((level - a) / (b - a), tmin), tmax)
                        verts[m, 0] = i + t
                        verts[m, 1] = j
                        verts[m, 2] = k
                        idx_x[i, j, k] = m
                        m += 1
        for i in range(nx):
            for j in range(ny - 1):
                for k in range(nz):
                    a = A[i, j, k]
                    b = A[i, j + 1, k]
                    if (a < level) != (b < level):
                        t = fmin(fmax((level - a) / (b - a), tmin), tmax)
                        verts[m, 0] = i
                        verts[m, 1] = j + t
                        verts[m, 2] = k
                        idx_y[i, j, k] = m
                        m += 1
        for i in range(nx):
            for j in range(ny):
                for k in range(nz - 1):
                    a = A[i, j, k]
                    b = A[i, j, k + 1]
                    if (a < level) != (b < level):
                        t = fmin(fmax((level - a) / (b - a), tmin), tmax)
                        verts[m, 0] = i
                        verts[m, 1] = j
                        verts[m, 2] = k + t
                        idx_z[i, j, k] = m
                        m += 1

    cdef cnp.int64_t[:, ::1] table = np.ascontiguousarray(TRI_TABLE, dtype=np.int64)
    cdef cnp.int64_t[::1] eaxis = np.ascontiguousarray(EDGE_AXIS, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] ebase = np.ascontiguousarray(EDGE_BASE, dtype=np.int64)
    cdef int ci
    cdef Py_ssize_t nface = 0, f, qx, qy, qz
    # corner offsets in table order
    cdef int cox[8]
    cdef int coy[8]
    cdef int coz[8]
    cox[:] = [0, 1, 1, 0, 0, 1, 1, 0]
    coy[:] = [0, 0, 1, 1, 0, 0, 1, 1]
    coz[:] = [0, 0, 0, 0, 1, 1, 1, 1]
    with nogil:
        for i in range(nx - 1):
            for j in range(ny - 1):
                for k in range(nz - 1):
                    ci = 0
                    for c in range(8):
                        if A[i + cox[c], j + coy[c], k + coz[c]] < level:
                            ci |= 1 << c
                    f = 0
                    while f < 16 and table[ci, f] >= 0:
                        f += 1
                    nface += f // 3
    faces_arr = np.empty((nface, 3), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] faces = faces_arr
    cdef Py_ssize_t[3] tmp
    m = 0
    with nogil:
        for i in range(nx - 1):
            for j in range(ny - 1):
                for k in range(nz - 1):
                    ci = 0
                    for c in range(8):
                        if A[i + cox[c], j + coy[c], k + coz[c]] < level:
                            ci |= 1 << c
                    if ci == 0 or ci == 255:
                        continue
                    f = 0
                    while f < 16 and table[ci, f] >= 0:
                        for c in range(3):
                            e = table[ci, f + c]
                            qx = i + ebase[e, 0]
                            qy = j + ebase[e, 1]
                            qz = k + ebase[e, 2]
                            if eaxis[e] == 0:
                                tmp[c] = idx_x[qx, qy, qz]
                            elif eaxis[e] == 1:
                                tmp[c] = idx_y[qx, qy, qz]
                            else:
                                tmp[c] = idx_z[qx, qy, qz]
                        faces[m, 0] = tmp[0]
                        if flip:
                            faces[m, 1] = tmp[2]
                            faces[m, 2] = tmp[1]
                        else:
                            faces[m, 1] = tmp[1]
                            faces[m, 2] = tmp[2]
                        m += 1
                        f += 3
    return verts_arr, faces_arr


cdef inline double _edge(double ax, double ay, double bx, double by, double px, double py) nogil:
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


cdef inline bint _owns(double ex, double ey) nogil:
    return ey > 0 or (ey == 0 and ex < 0)


cdef inline bint _covers(double w, double ex, double ey) nogil:
    return w > 0 or (w == 0 and _owns(ex, ey))


def rasterize(double[::1] x, double[::1] y, double[::1] z, cnp.int64_t[:, ::1] faces,
              Py_ssize_t width, Py_ssize_t height, double near=1.0):
    depth_arr = np.full((height, width), np.inf)
    tri_arr = np.full((height, width), -1, dtype=np.int64)
    bary_arr = np.zeros((height, width, 3))
    cdef double[:, ::1] depth = depth_arr
    cdef cnp.int64_t[:, ::1] tri = tri_arr
    cdef double[:, :, ::1] bary = bary_arr
    cdef Py_ssize_t f, nf = faces.shape[0], i0, i1, i2, r, col, xmin, xmax, ymin, ymax
    cdef double x0, y0, x1, y1, x2, y2, z0, z1, z2, area, w0, w1, w2, px, py
    cdef double q0, q1, q2, inv, d, tx, ty, tz
    cdef bint swap
    with nogil:
        for f in range(nf):
            i0 = faces[f, 0]
            i1 = faces[f, 1]
            i2 = faces[f, 2]
            z0 = z[i0]
            z1 = z[i1]
            z2 = z[i2]
            if not (z0 > near and z1 > near and z2 > near):
                continue
            x0 = x[i0]
            y0 = y[i0]
            x1 = x[i1]
            y1 = y[i1]
            x2 = x[i2]
            y2 = y[i2]
            area = _edge(x0, y0, x1, y1, x2, y2)
            if area == 0 or not isfinite(area):
                continue
            swap = area < 0
            if swap:
                tx = x1
                x1 = x2
                x2 = tx
                ty = y1
                y1 = y2
                y2 = ty
                tz = z1
                z1 = z2
                z2 = tz
                area = -area
            xmin = <Py_ssize_t>ceil(fmin(fmin(x0, x1), x2))
            xmax = <Py_ssize_t>floor(fmax(fmax(x0, x1), x2))
            ymin = <Py_ssize_t>ceil(fmin(fmin(y0, y1), y2))
            ymax = <Py_ssize_t>floor(fmax(fmax(y0, y1), y2))
            if xmin < 0:
                xmin = 0
            if ymin < 0:
                ymin = 0
            if xmax > width - 1:
                xmax = width - 1
            if ymax > height - 1:
                ymax = height - 1
            for r in range(ymin, ymax + 1):
                py = r
                for col in range(xmin, xmax + 1):
                    px = col
                    w0 = _edge(x1, y1, x2, y2, px, py)
                    if not _covers(w0, x2 - x1, y2 - y1):
                        continue
                    w1 = _edge(x2, y2, x0, y0, px, py)
                    if not _covers(w1, x0 - x2, y0 - y2):
                        continue
                    w2 = _edge(x0, y0, x1, y1, px, py)
                    if not _covers(w2, x1 - x0, y1 - y0):
                        continue
                    q0 = (w0 / area) / z0
                    q1 = (w1 / area) / z1
                    q2 = (w2 / area) / z2
                    inv = q0 + q1 + q2
                    d = 1.0 / inv
                    if d < depth[r, col]:
                        depth[r, col] = d
                        tri[r, col] = f
                        bary[r, col, 0] = q0 / inv
                        if swap:
                            bary[r, col, 1] = q2 / inv
                            bary[r, col, 2] = q1 / inv
                        else:
                            bary[r, col, 1] = q1 / inv
                            bary[r, col, 2] = q2 / inv
    return depth_arr, tri_arr, bary_arr
