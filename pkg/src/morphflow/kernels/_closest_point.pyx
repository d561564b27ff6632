# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled closest-point-on-mesh kernels.

Scalar mirror of `numpy_backend`: identical arithmetic per (point, triangle)
pair, identical tie rule (lowest face index wins on equal distance).
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

NAME = "compiled"


cdef inline double _pair(const double* p, const double* a, const double* b,
                         const double* c, double* out_v, double* out_w) nogil:
    """Closest point on triangle abc to p; returns squared distance and writes
    the (v, w) barycentric weights of vertices b and c."""
    cdef double ab0 = b[0] - a[0], ab1 = b[1] - a[1], ab2 = b[2] - a[2]
    cdef double ac0 = c[0] - a[0], ac1 = c[1] - a[1], ac2 = c[2] - a[2]
    cdef double ap0 = p[0] - a[0], ap1 = p[1] - a[1], ap2 = p[2] - a[2]
    cdef double d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    cdef double d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    cdef double bp0, bp1, bp2, d3, d4, cp0, cp1, cp2, d5, d6
    cdef double vc, vb, va, denom, v, w
    cdef double cx, cy, cz, dx, dy, dz

    v = 0.0
    w = 0.0
    if d1 <= 0.0 and d2 <= 0.0:
        pass
    else:
        bp0 = p[0] - b[0]; bp1 = p[1] - b[1]; bp2 = p[2] - b[2]
        d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
        d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
        if d3 >= 0.0 and d4 <= d3:
            v = 1.0
        else:
            cp0 = p[0] - c[0]; cp1 = p[1] - c[1]; cp2 = p[2] - c[2]
            d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
            d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
            if d6 >= 0.0 and d5 <= d6:
                w = 1.0
            else:
                vc = d1 * d4 - d3 * d2
                if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
                    v = d1 / (d1 - d3)
                else:
                    vb = d5 * d2 - d1 * d6
                    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
                        w = d2 / (d2 - d6)
                    else:
                        va = d3 * d6 - d5 * d4
                        if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
                            w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                            v = 1.0 - w
                        else:
                            denom = va + vb + vc
                            v = vb / denom
                            w = vc / denom

    cx = a[0] + v * ab0 + w * ac0
    cy = a[1] + v * ab1 + w * ac1
    cz = a[2] + v * ab2 + w * ac2
    dx = cx - p[0]; dy = cy - p[1]; dz = cz - p[2]
    out_v[0] = v
    out_w[0] = w
    return dx * dx + dy * dy + dz * dz


def closest_points(const double[:, ::1] points, const double[:, :, ::1] tris):
    """Exhaustive nearest triangle per point. Returns (face, bary, sqdist)."""
    cdef Py_ssize_t n_pts = points.shape[0]
    cdef Py_ssize_t n_tri = tris.shape[0]
    if n_tri == 0:
        raise ValueError("empty triangle set")

    face_arr = np.empty(n_pts, dtype=np.int64)
    bary_arr = np.empty((n_pts, 3), dtype=np.float64)
    sq_arr = np.empty(n_pts, dtype=np.float64)
    cdef long long[::1] face = face_arr
    cdef double[:, ::1] bary = bary_arr
    cdef double[::1] sq = sq_arr

    cdef Py_ssize_t i, f
    cdef double best, d, v, w, bv, bw
    cdef long long bf
    with nogil:
        for i in range(n_pts):
            best = 1e308
            bf = -1
            bv = 0.0
            bw = 0.0
            for f in range(n_tri):
                d = _pair(&points[i, 0], &tris[f, 0, 0], &tris[f, 1, 0],
                          &tris[f, 2, 0], &v, &w)
                if d < best:
                    best = d
                    bf = f
                    bv = v
                    bw = w
            face[i] = bf
            bary[i, 0] = 1.0 - bv - bw
            bary[i, 1] = bv
            bary[i, 2] = bw
            sq[i] = best
    return face_arr, bary_arr, sq_arr


def closest_points_subset(const double[:, ::1] points,
                          const double[:, :, ::1] tris,
                          const long long[::1] cand,
                          const long long[::1] offsets):
    """Nearest triangle per point over CSR candidate lists."""
    cdef Py_ssize_t n_pts = points.shape[0]
    face_arr = np.empty(n_pts, dtype=np.int64)
    bary_arr = np.empty((n_pts, 3), dtype=np.float64)
    sq_arr = np.empty(n_pts, dtype=np.float64)
    cdef long long[::1] face = face_arr
    cdef double[:, ::1] bary = bary_arr
    cdef double[::1] sq = sq_arr

    cdef Py_ssize_t i, k
    cdef long long f, bf
    cdef double best, d, v, w, bv, bw
    for i in range(n_pts):
        if offsets[i + 1] <= offsets[i]:
            raise ValueError("every candidate segment must be non-empty")
    with nogil:
        for i in range(n_pts):
            best = 1e308
            bf = -1
            bv = 0.0
            bw = 0.0
            for k in range(offsets[i], offsets[i + 1]):
                f = cand[k]
                d = _pair(&points[i, 0], &tris[f, 0, 0], &tris[f, 1, 0],
                          &tris[f, 2, 0], &v, &w)
                if d < best or (d == best and f < bf):
                    best = d
                    bf = f
                    bv = v
                    bw = w
            face[i] = bf
            bary[i, 0] = 1.0 - bv - bw
            bary[i, 1] = bv
            bary[i, 2] = bw
            sq[i] = best
    return face_arr, bary_arr, sq_arr
