# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rendering kernels.  Same contracts as ``_kernels_py``."""

import numpy as np
from libc.math cimport floor, sqrt, fmax, fmin, M_PI


def bilinear_wrap(double[:, :, ::1] src, double[::1] x, double[::1] y):
    cdef Py_ssize_t c_n = src.shape[0], h = src.shape[1], w = src.shape[2]
    cdef Py_ssize_t p_n = x.shape[0]
    out_arr = np.empty((c_n, p_n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, c, x0, x1, y0, y1
    cdef double xx, yy, fx, fy
    for p in range(p_n):
        yy = fmin(fmax(y[p], 0.0), h - 1.0)
        xx = x[p]
        fx = xx - floor(xx)
        x0 = <Py_ssize_t>floor(xx) % w
        if x0 < 0:
            x0 += w
        x1 = (x0 + 1) % w
        y0 = <Py_ssize_t>floor(yy)
        fy = yy - y0
        y1 = y0 + 1 if y0 + 1 < h else h - 1
        for c in range(c_n):
            out[c, p] = ((src[c, y0, x0] * (1.0 - fx) + src[c, y0, x1] * fx) * (1.0 - fy)
                         + (src[c, y1, x0] * (1.0 - fx) + src[c, y1, x1] * fx) * fy)
    return out_arr


def diffuse_integrate(double[:, ::1] normals, double[:, ::1] dirs,
                      double[::1] weights, double[:, ::1] radiance):
    cdef Py_ssize_t p_n = normals.shape[0], t_n = dirs.shape[0], c_n = radiance.shape[1]
    out_arr = np.zeros((p_n, c_n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, t, c
    cdef double cos
    for p in range(p_n):
        for t in range(t_n):
            cos = (normals[p, 0] * dirs[t, 0] + normals[p, 1] * dirs[t, 1]
                   + normals[p, 2] * dirs[t, 2])
            if cos <= 0.0:
                continue
            cos *= weights[t]
            for c in range(c_n):
                out[p, c] += cos * radiance[t, c]
    return out_arr


cdef inline bint _blocked(double px, double py, double pz, double dx, double dy, double dz,
                          double cx, double cy, double cz, double r) nogil:
    cdef double ox = px - cx, oy = py - cy, oz = pz - cz
    cdef double b = dx * ox + dy * oy + dz * oz
    cdef double c = ox * ox + oy * oy + oz * oz - r * r
    cdef double disc = b * b - c
    cdef double sq
    if disc <= 0.0:
        return False
    sq = sqrt(disc)
    if -b + sq <= 1e-6:
        return False
    return (-b - sq > 1e-6) or (c < 0.0)


def diffuse_integrate_shadowed(double[:, ::1] points, double[:, ::1] normals,
                               long long[::1] owner, double[:, ::1] spheres,
                               double[:, ::1] dirs, double[::1] weights,
                               double[:, ::1] radiance):
    cdef Py_ssize_t p_n = normals.shape[0], t_n = dirs.shape[0], c_n = radiance.shape[1]
    cdef Py_ssize_t k_n = spheres.shape[0]
    out_arr = np.zeros((p_n, c_n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, t, c, k
    cdef double cos
    cdef bint vis
    for p in range(p_n):
        for t in range(t_n):
            cos = (normals[p, 0] * dirs[t, 0] + normals[p, 1] * dirs[t, 1]
                   + normals[p, 2] * dirs[t, 2])
            if cos <= 0.0:
                continue
            vis = True
            for k in range(k_n):
                if k == owner[p]:
                    continue
                if _blocked(points[p, 0], points[p, 1], points[p, 2],
                            dirs[t, 0], dirs[t, 1], dirs[t, 2],
                            spheres[k, 0], spheres[k, 1], spheres[k, 2], spheres[k, 3]):
                    vis = False
                    break
            if not vis:
                continue
            cos *= weights[t]
            for c in range(c_n):
                out[p, c] += cos * radiance[t, c]
    return out_arr


def specular_integrate(double[:, ::1] normals, double[::1] view, double[::1] alpha,
                       double[:, ::1] dirs, double[::1] weights, double[:, ::1] radiance):
    cdef Py_ssize_t p_n = normals.shape[0], t_n = dirs.shape[0], c_n = radiance.shape[1]
    base_arr = np.zeros((p_n, c_n), dtype=np.float64)
    edge_arr = np.zeros((p_n, c_n), dtype=np.float64)
    cdef double[:, ::1] base = base_arr
    cdef double[:, ::1] edge = edge_arr
    # per-texel half vectors and Schlick factors do not depend on the pixel
    sch_arr = np.empty(t_n, dtype=np.float64)
    half_arr = np.empty((t_n, 3), dtype=np.float64)
    cdef double[::1] sch = sch_arr
    cdef double[:, ::1] half = half_arr
    cdef Py_ssize_t p, t, c
    cdef double hx, hy, hz, hn, vh, s
    cdef double nx, ny, nz, a2, nv, nl, nh, tt, d, g1v, g1l, k
    for t in range(t_n):
        hx = dirs[t, 0] + view[0]
        hy = dirs[t, 1] + view[1]
        hz = dirs[t, 2] + view[2]
        hn = sqrt(hx * hx + hy * hy + hz * hz) + 1e-300
        half[t, 0] = hx / hn
        half[t, 1] = hy / hn
        half[t, 2] = hz / hn
        vh = half[t, 0] * view[0] + half[t, 1] * view[1] + half[t, 2] * view[2]
        s = fmin(fmax(1.0 - vh, 0.0), 1.0)
        sch[t] = s * s * s * s * s
    for p in range(p_n):
        nx = normals[p, 0]
        ny = normals[p, 1]
        nz = normals[p, 2]
        nv = nx * view[0] + ny * view[1] + nz * view[2]
        if nv <= 0.0:
            continue
        a2 = alpha[p] * alpha[p]
        g1v = 2.0 * nv / (nv + sqrt(a2 + (1.0 - a2) * nv * nv))
        for t in range(t_n):
            nl = nx * dirs[t, 0] + ny * dirs[t, 1] + nz * dirs[t, 2]
            if nl <= 0.0:
                continue
            nh = nx * half[t, 0] + ny * half[t, 1] + nz * half[t, 2]
            tt = nh * nh * (a2 - 1.0) + 1.0
            d = a2 / (M_PI * tt * tt)
            g1l = 2.0 * nl / (nl + sqrt(a2 + (1.0 - a2) * nl * nl))
            k = d * g1v * g1l / (4.0 * nv) * weights[t]
            for c in range(c_n):
                base[p, c] += k * (1.0 - sch[t]) * radiance[t, c]
                edge[p, c] += k * sch[t] * radiance[t, c]
    return base_arr, edge_arr
