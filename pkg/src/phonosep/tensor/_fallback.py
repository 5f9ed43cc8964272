"""Pure numpy implementations of the convolution gather/scatter kernels."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp: np.ndarray, k: int, stride: int, wo: int, ho: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (wo - 1) * stride + 1 : stride, : (ho - 1) * stride + 1 : stride]
    # (B, wo, ho, C, k, k) -> (B, wo, ho, k, k, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def col2im(cols: np.ndarray, wp: int, hp: int, stride: int) -> np.ndarray:
    nb, wo, ho, k, _, nc = cols.shape
    out = np.zeros((nb, wp, hp, nc), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            out[:, di : di + stride * wo : stride, dj : dj + stride * ho : stride] += cols[:, :, :, di, dj]
    return out
