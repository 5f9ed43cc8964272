# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for 5x5 stride-2 convolutions (NHWC layout)."""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int k, int stride, int wo, int ho):
    """Gather ``k x k`` windows of a padded NHWC array.

    Returns an array of shape ``(B, wo, ho, k, k, C)``.
    """
    cdef Py_ssize_t b, i, j, di, dj, c
    cdef Py_ssize_t nb = xp.shape[0], nc = xp.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((nb, wo, ho, k, k, nc), dtype=dtype)
    cdef real[:, :, :, :, :, ::1] out = out_arr
    with nogil:
        for b in range(nb):
            for i in range(wo):
                for j in range(ho):
                    for di in range(k):
                        for dj in range(k):
                            for c in range(nc):
                                out[b, i, j, di, dj, c] = xp[b, i * stride + di, j * stride + dj, c]
    return out_arr


def col2im(real[:, :, :, :, :, ::1] cols, int wp, int hp, int stride):
    """Scatter-add windows back into a zero padded NHWC array of extent ``(wp, hp)``."""
    cdef Py_ssize_t b, i, j, di, dj, c
    cdef Py_ssize_t nb = cols.shape[0], wo = cols.shape[1], ho = cols.shape[2]
    cdef Py_ssize_t k = cols.shape[3], nc = cols.shape[5]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((nb, wp, hp, nc), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    with nogil:
        for b in range(nb):
            for i in range(wo):
                for j in range(ho):
                    for di in range(k):
                        for dj in range(k):
                            for c in range(nc):
                                out[b, i * stride + di, j * stride + dj, c] += cols[b, i, j, di, dj, c]
    return out_arr
