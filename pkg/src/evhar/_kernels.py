"""Fused elementwise kernels for the memory-bound layers.

Plain numpy makes several full passes (and temporaries) per batch-norm or
pooling call; on full-resolution activations those passes cost as much as
the convolutions. These loops do the same arithmetic in one or two passes.
Accumulations run in float64 in a fixed order, so results do not depend on
chunking.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def bn_stats(x3):
    """Per-channel mean and biased variance of ``x3`` shaped ``(B, C, N)``."""
    b, c, n = x3.shape
    mean = np.zeros(c)
    var = np.zeros(c)
    count = b * n
    for ci in range(c):
        s = 0.0
        for bi in range(b):
            for i in range(n):
                s += x3[bi, ci, i]
        m = s / count
        q = 0.0
        for bi in range(b):
            for i in range(n):
                d = x3[bi, ci, i] - m
                q += d * d
        mean[ci] = m
        var[ci] = q / count
    return mean, var


@njit(cache=True)
def bn_apply(x3, mean, inv_std, gamma, beta, x_hat, out):
    b, c, n = x3.shape
    for bi in range(b):
        for ci in range(c):
            m = mean[ci]
            s = inv_std[ci]
            g = gamma[ci]
            be = beta[ci]
            for i in range(n):
                h = (x3[bi, ci, i] - m) * s
                x_hat[bi, ci, i] = h
                out[bi, ci, i] = h * g + be


@njit(cache=True)
def bn_grad_sums(g3, xh3):
    b, c, n = g3.shape
    sum_g = np.zeros(c)
    sum_gx = np.zeros(c)
    for ci in range(c):
        sg = 0.0
        sgx = 0.0
        for bi in range(b):
            for i in range(n):
                g = g3[bi, ci, i]
                sg += g
                sgx += g * xh3[bi, ci, i]
        sum_g[ci] = sg
        sum_gx[ci] = sgx
    return sum_g, sum_gx


@njit(cache=True)
def bn_grad_input(g3, xh3, scale, mean_g, mean_gx, out):
    b, c, n = g3.shape
    for bi in range(b):
        for ci in range(c):
            s = scale[ci]
            mg = mean_g[ci]
            mgx = mean_gx[ci]
            for i in range(n):
                out[bi, ci, i] = s * (g3[bi, ci, i] - mg - xh3[bi, ci, i] * mgx)


@njit(cache=True)
def maxpool_forward(x, kt, kh, kw, out, argmax):
    """Non-overlapping max pool; the first maximal window position wins."""
    b, c, t, h, w = out.shape
    for bi in range(b):
        for ci in range(c):
            for ti in range(t):
                for hi in range(h):
                    for wi in range(w):
                        best = x[bi, ci, ti * kt, hi * kh, wi * kw]
                        arg = 0
                        pos = 0
                        for dt in range(kt):
                            for dh in range(kh):
                                for dw in range(kw):
                                    v = x[bi, ci, ti * kt + dt, hi * kh + dh, wi * kw + dw]
                                    if v > best:
                                        best = v
                                        arg = pos
                                    pos += 1
                        out[bi, ci, ti, hi, wi] = best
                        argmax[bi, ci, ti, hi, wi] = arg


@njit(cache=True)
def maxpool_backward(grad_out, argmax, kt, kh, kw, grad_x):
    b, c, t, h, w = grad_out.shape
    for bi in range(b):
        for ci in range(c):
            for ti in range(t):
                for hi in range(h):
                    for wi in range(w):
                        a = argmax[bi, ci, ti, hi, wi]
                        dt = a // (kh * kw)
                        rem = a - dt * kh * kw
                        dh = rem // kw
                        dw = rem - dh * kw
                        grad_x[bi, ci, ti * kt + dt, hi * kh + dh, wi * kw + dw] = grad_out[bi, ci, ti, hi, wi]
