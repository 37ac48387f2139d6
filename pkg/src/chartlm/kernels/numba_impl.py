"""numba @njit twins of the kernels in ``numpy_impl.py``.

Loop bodies are written row-wise with sequential accumulation (no fastmath,
no parallel reductions) so results are deterministic across reruns. The
signatures are left lazy so the same kernels serve float32 and the float64
tapes used by the finite-difference oracles.
"""
from __future__ import annotations

import numpy as np
from numba import njit

GELU_C = 0.7978845608028654
GELU_A = 0.044715


@njit(cache=True)
def softmax_fwd(x):
    r, c = x.shape
    y = np.empty_like(x)
    for i in range(r):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            e = np.exp(x[i, j] - m)
            y[i, j] = e
            s += e
        for j in range(c):
            y[i, j] /= s
    return y


@njit(cache=True)
def softmax_bwd(y, gy):
    r, c = y.shape
    gx = np.empty_like(y)
    for i in range(r):
        dot = 0.0
        for j in range(c):
            dot += y[i, j] * gy[i, j]
        for j in range(c):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return gx


@njit(cache=True)
def log_softmax_fwd(x):
    r, c = x.shape
    y = np.empty_like(x)
    for i in range(r):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            s += np.exp(x[i, j] - m)
        lse = np.log(s) + m
        for j in range(c):
            y[i, j] = x[i, j] - lse
    return y


@njit(cache=True)
def log_softmax_bwd(y, gy):
    r, c = y.shape
    gx = np.empty_like(y)
    for i in range(r):
        s = 0.0
        for j in range(c):
            s += gy[i, j]
        for j in range(c):
            gx[i, j] = gy[i, j] - np.exp(y[i, j]) * s
    return gx


@njit(cache=True)
def layer_norm_fwd(x, gain, bias, eps):
    r, c = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(r, dtype=x.dtype)
    for i in range(r):
        mean = 0.0
        for j in range(c):
            mean += x[i, j]
        mean /= c
        var = 0.0
        for j in range(c):
            d = x[i, j] - mean
            var += d * d
        var /= c
        rs = 1.0 / np.sqrt(var + eps)
        rstd[i] = rs
        for j in range(c):
            xh = (x[i, j] - mean) * rs
            xhat[i, j] = xh
            y[i, j] = xh * gain[j] + bias[j]
    return y, xhat, rstd


@njit(cache=True)
def layer_norm_bwd(xhat, rstd, gain, gy):
    r, c = xhat.shape
    gx = np.empty_like(xhat)
    ggain = np.zeros(c, dtype=xhat.dtype)
    gbias = np.zeros(c, dtype=xhat.dtype)
    for i in range(r):
        m1 = 0.0
        m2 = 0.0
        for j in range(c):
            dxh = gy[i, j] * gain[j]
            m1 += dxh
            m2 += dxh * xhat[i, j]
        m1 /= c
        m2 /= c
        for j in range(c):
            dxh = gy[i, j] * gain[j]
            gx[i, j] = (dxh - m1 - xhat[i, j] * m2) * rstd[i]
            ggain[j] += gy[i, j] * xhat[i, j]
            gbias[j] += gy[i, j]
    return gx, ggain, gbias


@njit(cache=True)
def gelu_fwd(x):
    flat = x.ravel()
    y = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        y[i] = 0.5 * v * (1.0 + np.tanh(GELU_C * (v + GELU_A * v ** 3)))
    return y.reshape(x.shape)


@njit(cache=True)
def gelu_bwd(x, gy):
    flat = x.ravel()
    gf = gy.ravel()
    gx = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        u = GELU_C * (v + GELU_A * v ** 3)
        t = np.tanh(u)
        du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        gx[i] = gf[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    return gx.reshape(x.shape)


@njit(cache=True)
def adamw_update(p, g, m, v, t, lr, b1, b2, eps, wd):
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i in range(p.size):
        m[i] = b1 * m[i] + (1.0 - b1) * g[i]
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        p[i] -= lr * ((m[i] / c1) / (np.sqrt(v[i] / c2) + eps) + wd * p[i])


@njit(cache=True)
def scatter_add_rows(out, ids, g):
    b, d = g.shape
    for i in range(b):
        row = ids[i]
        for j in range(d):
            out[row, j] += g[i, j]
