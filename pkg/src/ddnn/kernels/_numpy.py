"""Pure-numpy reference path for the hot kernels.

Convolutions go through a strided window view and a single tensordot so
that BLAS does the reduction.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N, C, H, W, 3, 3)


def conv3x3_forward(x, w):
    win = _windows(x)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, F)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2), dtype=np.float32)


def conv3x3_backward_weight(x, g):
    win = _windows(x)
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (F, C, 3, 3)
    return np.ascontiguousarray(gw, dtype=np.float32)


def conv3x3_backward_input(g, w):
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv3x3_forward(g, wt)


def maxpool3x3s2_forward(x):
    n, c, h, w = x.shape
    ho = (h - 1) // 2 + 1
    wo = (w - 1) // 2 + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::2, ::2]
    win = win[:, :, :ho, :wo].reshape(n, c, ho, wo, 9)
    k = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]
    ki, kj = np.divmod(k, 3)
    rows = 2 * np.arange(ho)[:, None] + ki - 1
    cols = 2 * np.arange(wo)[None, :] + kj - 1
    idx = (rows * w + cols).astype(np.int32)
    return np.ascontiguousarray(out, dtype=np.float32), idx


def maxpool3x3s2_backward(g, idx, h, w):
    n, c, ho, wo = g.shape
    base = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1, 1)
    flat = (idx + base).ravel()
    gi = np.bincount(flat, weights=g.ravel(), minlength=n * c * h * w)
    return gi.astype(np.float32).reshape(n, c, h, w)
