# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Ray/rectangle and segment/point kernels.

Arithmetic mirrors :mod:`raysurrogate.kernels_py` operation for operation so
both backends agree bit-for-bit (the extension is built with
``-ffp-contract=off``).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt, INFINITY

cnp.import_array()

cdef int[3] U_IDX = [1, 0, 0]
cdef int[3] V_IDX = [2, 2, 1]


def first_hits(const double[:, ::1] origins, const double[:, ::1] dirs,
               const cnp.int64_t[::1] axes, const double[:, ::1] planes,
               double tmin):
    cdef Py_ssize_t m = origins.shape[0]
    cdef Py_ssize_t n = axes.shape[0]
    t_out = np.full(m, np.inf)
    idx_out = np.full(m, -1, dtype=np.int64)
    cdef double[::1] tv = t_out
    cdef cnp.int64_t[::1] iv = idx_out
    cdef Py_ssize_t i, j
    cdef int k, u, v
    cdef double dk, t, pu, pv, best
    cdef cnp.int64_t bj
    with nogil:
        for i in range(m):
            best = INFINITY
            bj = -1
            for j in range(n):
                k = <int>axes[j]
                dk = dirs[i, k]
                if fabs(dk) < 1e-12:
                    continue
                t = (planes[j, 0] - origins[i, k]) / dk
                if t <= tmin or t >= best:
                    continue
                u = U_IDX[k]
                v = V_IDX[k]
                pu = origins[i, u] + t * dirs[i, u]
                pv = origins[i, v] + t * dirs[i, v]
                if pu < planes[j, 1] - 1e-9 or pu > planes[j, 3] + 1e-9:
                    continue
                if pv < planes[j, 2] - 1e-9 or pv > planes[j, 4] + 1e-9:
                    continue
                best = t
                bj = j
            tv[i] = best
            iv[i] = bj
    return t_out, idx_out


def segment_point_distances(const double[:, ::1] starts, const double[:, ::1] ends,
                            const double[::1] p):
    cdef Py_ssize_t m = starts.shape[0]
    dist_out = np.empty(m)
    u_out = np.empty(m)
    cdef double[::1] dv = dist_out
    cdef double[::1] uv = u_out
    cdef Py_ssize_t i
    cdef double sx, sy, sz, ex, ey, ez, l2, u, cx, cy, cz
    with nogil:
        for i in range(m):
            ex = ends[i, 0] - starts[i, 0]
            ey = ends[i, 1] - starts[i, 1]
            ez = ends[i, 2] - starts[i, 2]
            sx = p[0] - starts[i, 0]
            sy = p[1] - starts[i, 1]
            sz = p[2] - starts[i, 2]
            l2 = ex * ex + ey * ey + ez * ez
            if l2 > 0.0:
                u = (sx * ex + sy * ey + sz * ez) / l2
                if u < 0.0:
                    u = 0.0
                elif u > 1.0:
                    u = 1.0
            else:
                u = 0.0
            cx = sx - u * ex
            cy = sy - u * ey
            cz = sz - u * ez
            dv[i] = sqrt(cx * cx + cy * cy + cz * cz)
            uv[i] = u
    return dist_out, u_out
