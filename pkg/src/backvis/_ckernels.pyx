# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loops for patch gather/scatter and max-pooling.

Every routine here has a numpy twin in ``_pykernels`` with the same
signature and the same accumulation order, so both backends agree bit for
bit on identical inputs.
"""
import numpy as np

ctypedef Py_ssize_t idx_t


def gather_patches(const double[:, ::1] x, const idx_t[:, ::1] index):
    cdef idx_t B = x.shape[0], J = index.shape[0], P = index.shape[1]
    cdef idx_t b, j, t, k
    out = np.empty((B, J, P), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    with nogil:
        for b in range(B):
            for j in range(J):
                for t in range(P):
                    k = index[j, t]
                    o[b, j, t] = x[b, k] if k >= 0 else 0.0
    return out


def scatter_patches(const double[:, :, ::1] rows, const idx_t[:, ::1] index, idx_t d):
    cdef idx_t B = rows.shape[0], J = index.shape[0], P = index.shape[1]
    cdef idx_t b, j, t, k
    out = np.zeros((B, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for b in range(B):
            for j in range(J):
                for t in range(P):
                    k = index[j, t]
                    if k >= 0:
                        o[b, k] += rows[b, j, t]
    return out


def maxpool_forward(const double[:, :, :, ::1] x, idx_t wh, idx_t ww, idx_t sh, idx_t sw):
    cdef idx_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef idx_t Ho = (H - wh) // sh + 1, Wo = (W - ww) // sw + 1
    cdef idx_t b, oh, ow, c, a, e, h, w, best_idx
    cdef double best, v
    out = np.empty((B, Ho, Wo, C), dtype=np.float64)
    arg = np.empty((B, Ho, Wo, C), dtype=np.intp)
    cdef double[:, :, :, ::1] o = out
    cdef idx_t[:, :, :, ::1] am = arg
    with nogil:
        for b in range(B):
            for oh in range(Ho):
                for ow in range(Wo):
                    for c in range(C):
                        h = oh * sh
                        w = ow * sw
                        best = x[b, h, w, c]
                        best_idx = (h * W + w) * C + c
                        for a in range(wh):
                            for e in range(ww):
                                v = x[b, h + a, w + e, c]
                                # strict comparison keeps the lowest flat index on ties
                                if v > best:
                                    best = v
                                    best_idx = ((h + a) * W + (w + e)) * C + c
                        o[b, oh, ow, c] = best
                        am[b, oh, ow, c] = best_idx
    return out, arg


def maxpool_backward(const double[:, :, :, ::1] grad, const idx_t[:, :, :, ::1] arg,
                     idx_t H, idx_t W, idx_t C):
    cdef idx_t B = grad.shape[0], Ho = grad.shape[1], Wo = grad.shape[2]
    cdef idx_t b, oh, ow, c
    out = np.zeros((B, H * W * C), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for b in range(B):
            for oh in range(Ho):
                for ow in range(Wo):
                    for c in range(C):
                        o[b, arg[b, oh, ow, c]] += grad[b, oh, ow, c]
    return out.reshape(B, H, W, C)
