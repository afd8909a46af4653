# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch/pool kernels. Same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def im2col(double[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t h = xp.shape[2], w = xp.shape[3]
    cdef Py_ssize_t oh = (h - kh) // sh + 1
    cdef Py_ssize_t ow = (w - kw) // sw + 1
    cdef Py_ssize_t ncol = c * kh * kw
    out_arr = np.empty((n * oh * ow, ncol), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, ch, i, j, row, col
    with nogil:
        for b in range(n):
            for y in range(oh):
                for x in range(ow):
                    row = (b * oh + y) * ow + x
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[row, col] = xp[b, ch, y * sh + i, x * sw + j]
                                col += 1
    return out_arr


def col2im(double[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
           Py_ssize_t w, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh,
           Py_ssize_t sw):
    cdef Py_ssize_t oh = (h - kh) // sh + 1
    cdef Py_ssize_t ow = (w - kw) // sw + 1
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, ch, i, j
    # (i, j) outermost per element: same summation order as the numpy version.
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(oh):
                            for x in range(ow):
                                out[b, ch, y * sh + i, x * sw + j] += cols[
                                    (b * oh + y) * ow + x, (ch * kh + i) * kw + j]
    return out_arr


def maxpool_forward(double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t oh = x.shape[2] // kh, ow = x.shape[3] // kw
    out_arr = np.empty((n, c, oh, ow), dtype=np.float64)
    arg_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, ch, y, xx, i, j, best_k
    cdef double best, v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(oh):
                    for xx in range(ow):
                        best = x[b, ch, y * kh, xx * kw]
                        best_k = 0
                        for i in range(kh):
                            for j in range(kw):
                                v = x[b, ch, y * kh + i, xx * kw + j]
                                if v > best:
                                    best = v
                                    best_k = i * kw + j
                        out[b, ch, y, xx] = best
                        arg[b, ch, y, xx] = best_k
    return out_arr, arg_arr


def maxpool_backward(double[:, :, :, ::1] g, cnp.int64_t[:, :, :, ::1] arg,
                     Py_ssize_t h, Py_ssize_t w, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1]
    cdef Py_ssize_t oh = g.shape[2], ow = g.shape[3]
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, y, xx, k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(oh):
                    for xx in range(ow):
                        k = arg[b, ch, y, xx]
                        out[b, ch, y * kh + k // kw, xx * kw + k % kw] = g[b, ch, y, xx]
    return out_arr
