"""Compiled loops for stride-1 depthwise convolution.

All three kernels take an already padded input (or gradient buffer) and
accumulate into ``out`` in place. Iteration order is fixed, so results are
bit-reproducible for a given build.
"""
import numba


@numba.njit(cache=True)
def dw_forward(xp, k, out):
    n, c, ho, wo = out.shape
    kh, kw = k.shape[1], k.shape[2]
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    wv = k[ch, i, j]
                    for y in range(ho):
                        for x in range(wo):
                            out[b, ch, y, x] += wv * xp[b, ch, y + i, x + j]


@numba.njit(cache=True)
def dw_grad_input(g, k, gxp):
    n, c, ho, wo = g.shape
    kh, kw = k.shape[1], k.shape[2]
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    wv = k[ch, i, j]
                    for y in range(ho):
                        for x in range(wo):
                            gxp[b, ch, y + i, x + j] += wv * g[b, ch, y, x]


@numba.njit(cache=True, fastmath=True)
def dw_grad_weight(g, xp, gk):
    n, c, ho, wo = g.shape
    kh, kw = gk.shape[1], gk.shape[2]
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for y in range(ho):
                        for x in range(wo):
                            acc += g[b, ch, y, x] * xp[b, ch, y + i, x + j]
                    gk[ch, i, j] += acc
