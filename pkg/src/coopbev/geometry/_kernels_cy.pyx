# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels: rotated-rectangle IoU and greedy NMS.

Mirrors `_kernels_py` operation for operation so both backends produce
bit-identical float64 results.
"""

from libc.math cimport cos, sin

import numpy as np

BACKEND = "cython"


cdef int _corners(double x, double y, double l, double w, double yaw,
                  double* px, double* py) nogil:
    cdef double c = cos(yaw)
    cdef double s = sin(yaw)
    cdef double hl = 0.5 * l
    cdef double hw = 0.5 * w
    px[0] = x + hl * c - hw * s; py[0] = y + hl * s + hw * c
    px[1] = x - hl * c - hw * s; py[1] = y - hl * s + hw * c
    px[2] = x - hl * c + hw * s; py[2] = y - hl * s - hw * c
    px[3] = x + hl * c + hw * s; py[3] = y + hl * s - hw * c
    return 4


cdef int _clip_edge(double* inx, double* iny, int n,
                    double x1, double y1, double ex, double ey,
                    double* outx, double* outy) nogil:
    cdef int m = 0
    cdef int i
    cdef double px, py, sp, cx, cy, sc, t
    if n == 0:
        return 0
    px = inx[n - 1]; py = iny[n - 1]
    sp = ex * (py - y1) - ey * (px - x1)
    for i in range(n):
        cx = inx[i]; cy = iny[i]
        sc = ex * (cy - y1) - ey * (cx - x1)
        if sc >= 0.0:
            if sp < 0.0:
                t = sp / (sp - sc)
                outx[m] = px + t * (cx - px); outy[m] = py + t * (cy - py)
                m += 1
            outx[m] = cx; outy[m] = cy
            m += 1
        elif sp >= 0.0:
            t = sp / (sp - sc)
            outx[m] = px + t * (cx - px); outy[m] = py + t * (cy - py)
            m += 1
        px = cx; py = cy; sp = sc
    return m


cdef double _poly_area(double* px, double* py, int n) nogil:
    cdef double acc = 0.0
    cdef double ax, ay
    cdef int i
    if n < 3:
        return 0.0
    ax = px[n - 1]; ay = py[n - 1]
    for i in range(n):
        acc += ax * py[i] - px[i] * ay
        ax = px[i]; ay = py[i]
    return 0.5 * acc


cdef void memcpy_poly(double* sx, double* sy, double* dx, double* dy, int n) nogil:
    cdef int i
    for i in range(n):
        dx[i] = sx[i]
        dy[i] = sy[i]


cdef double _inter_area(double ax, double ay, double al, double aw, double ayaw,
                        double bx, double by, double bl, double bw, double byaw) nogil:
    cdef double polyx[16]
    cdef double polyy[16]
    cdef double tmpx[16]
    cdef double tmpy[16]
    cdef double clipx[4]
    cdef double clipy[4]
    cdef int n, i
    cdef double px, py, area
    n = _corners(ax, ay, al, aw, ayaw, polyx, polyy)
    _corners(bx, by, bl, bw, byaw, clipx, clipy)
    px = clipx[3]; py = clipy[3]
    for i in range(4):
        n = _clip_edge(polyx, polyy, n, px, py, clipx[i] - px, clipy[i] - py,
                       tmpx, tmpy)
        if n == 0:
            return 0.0
        memcpy_poly(tmpx, tmpy, polyx, polyy, n)
        px = clipx[i]; py = clipy[i]
    area = _poly_area(polyx, polyy, n)
    if area > 0.0:
        return area
    return 0.0


cdef double _pair_iou(double ax, double ay, double al, double aw, double ayaw,
                      double bx, double by, double bl, double bw, double byaw) nogil:
    cdef double t
    cdef bint swap = False
    if ax == bx and ay == by and al == bl and aw == bw and ayaw == byaw:
        return 1.0
    if bx < ax:
        swap = True
    elif bx == ax:
        if by < ay:
            swap = True
        elif by == ay:
            if bl < al:
                swap = True
            elif bl == al:
                if bw < aw:
                    swap = True
                elif bw == aw:
                    if byaw < ayaw:
                        swap = True
    if swap:
        t = ax; ax = bx; bx = t
        t = ay; ay = by; by = t
        t = al; al = bl; bl = t
        t = aw; aw = bw; bw = t
        t = ayaw; ayaw = byaw; byaw = t
    cdef double inter = _inter_area(ax, ay, al, aw, ayaw, bx, by, bl, bw, byaw)
    if inter <= 0.0:
        return 0.0
    cdef double union_ = al * aw + bl * bw - inter
    cdef double iou = inter / union_
    if iou > 1.0:
        return 1.0
    return iou


def rect_intersection_area(a, b):
    cdef double[:] av = np.ascontiguousarray(a[:5], dtype=np.float64)
    cdef double[:] bv = np.ascontiguousarray(b[:5], dtype=np.float64)
    return _inter_area(av[0], av[1], av[2], av[3], av[4],
                       bv[0], bv[1], bv[2], bv[3], bv[4])


def rect_iou(a, b):
    cdef double[:] av = np.ascontiguousarray(a[:5], dtype=np.float64)
    cdef double[:] bv = np.ascontiguousarray(b[:5], dtype=np.float64)
    return _pair_iou(av[0], av[1], av[2], av[3], av[4],
                     bv[0], bv[1], bv[2], bv[3], bv[4])


def iou_matrix(boxes_a, boxes_b):
    cdef double[:, ::1] A = np.ascontiguousarray(boxes_a, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(boxes_b, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0]
    cdef Py_ssize_t m = B.shape[0]
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(m):
                out[i, j] = _pair_iou(A[i, 0], A[i, 1], A[i, 2], A[i, 3], A[i, 4],
                                      B[j, 0], B[j, 1], B[j, 2], B[j, 3], B[j, 4])
    return out_arr


def nms_ordered(boxes, double thresh):
    cdef double[:, ::1] B = np.ascontiguousarray(boxes, dtype=np.float64)
    cdef Py_ssize_t n = B.shape[0]
    kept_arr = np.zeros(n, dtype=np.intp)
    cdef Py_ssize_t[:] kept = kept_arr
    cdef Py_ssize_t nk = 0
    cdef Py_ssize_t i, j
    cdef bint ok
    with nogil:
        for i in range(n):
            ok = True
            for j in range(nk):
                if _pair_iou(B[i, 0], B[i, 1], B[i, 2], B[i, 3], B[i, 4],
                             B[kept[j], 0], B[kept[j], 1], B[kept[j], 2],
                             B[kept[j], 3], B[kept[j], 4]) > thresh:
                    ok = False
                    break
            if ok:
                kept[nk] = i
                nk += 1
    return [int(kept[i]) for i in range(nk)]
