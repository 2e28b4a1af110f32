"""numba-compiled versions of the hot kernels.

Same signatures and index conventions as the numpy path. All loops are
serial so that reductions happen in a fixed order.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv3x3_forward(x, w):
    n, c, h, wd = x.shape
    f = w.shape[0]
    out = np.empty((n, f, h, wd), np.float32)
    acc = np.empty((h, wd), np.float64)
    for b in range(n):
        for o in range(f):
            acc[:, :] = 0.0
            for ci in range(c):
                for i in range(3):
                    y0 = max(0, 1 - i)
                    y1 = min(h, h + 1 - i)
                    for j in range(3):
                        x0 = max(0, 1 - j)
                        x1 = min(wd, wd + 1 - j)
                        wv = w[o, ci, i, j]
                        for y in range(y0, y1):
                            for xx in range(x0, x1):
                                acc[y, xx] += wv * x[b, ci, y + i - 1, xx + j - 1]
            for y in range(h):
                for xx in range(wd):
                    out[b, o, y, xx] = acc[y, xx]
    return out


@njit(cache=True)
def conv3x3_backward_weight(x, g):
    n, c, h, wd = x.shape
    f = g.shape[1]
    gw = np.zeros((f, c, 3, 3), np.float64)
    for b in range(n):
        for o in range(f):
            for ci in range(c):
                for i in range(3):
                    y0 = max(0, 1 - i)
                    y1 = min(h, h + 1 - i)
                    for j in range(3):
                        x0 = max(0, 1 - j)
                        x1 = min(wd, wd + 1 - j)
                        s = 0.0
                        for y in range(y0, y1):
                            for xx in range(x0, x1):
                                s += g[b, o, y, xx] * x[b, ci, y + i - 1, xx + j - 1]
                        gw[o, ci, i, j] += s
    return gw.astype(np.float32)


@njit(cache=True)
def conv3x3_backward_input(g, w):
    f, c = w.shape[0], w.shape[1]
    wt = np.empty((c, f, 3, 3), np.float32)
    for o in range(f):
        for ci in range(c):
            for i in range(3):
                for j in range(3):
                    wt[ci, o, i, j] = w[o, ci, 2 - i, 2 - j]
    return conv3x3_forward(g, wt)


@njit(cache=True)
def maxpool3x3s2_forward(x):
    n, c, h, w = x.shape
    ho = (h - 1) // 2 + 1
    wo = (w - 1) // 2 + 1
    out = np.empty((n, c, ho, wo), np.float32)
    idx = np.empty((n, c, ho, wo), np.int32)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = -np.inf
                    bi = -1
                    for i in range(3):
                        y = 2 * oy + i - 1
                        if y < 0 or y >= h:
                            continue
                        for j in range(3):
                            xx = 2 * ox + j - 1
                            if xx < 0 or xx >= w:
                                continue
                            v = x[b, ch, y, xx]
                            if bi < 0 or v > best:
                                best = v
                                bi = y * w + xx
                    out[b, ch, oy, ox] = best
                    idx[b, ch, oy, ox] = bi
    return out, idx


@njit(cache=True)
def maxpool3x3s2_backward(g, idx, h, w):
    n, c, ho, wo = g.shape
    gi = np.zeros((n, c, h * w), np.float64)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    gi[b, ch, idx[b, ch, oy, ox]] += g[b, ch, oy, ox]
    return gi.astype(np.float32).reshape(n, c, h, w)
