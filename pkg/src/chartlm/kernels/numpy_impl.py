"""Pure-numpy reference implementations of the hot inner kernels.

Every function here has a numba twin in ``numba_impl.py`` with the same
signature. Reductions run in a fixed order (plain row loops / numpy axis
reductions) so reruns are bit-stable within a backend.
"""
from __future__ import annotations

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array, max-subtraction stabilized."""
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=1, keepdims=True)


def softmax_bwd(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    dot = np.sum(y * gy, axis=1, keepdims=True)
    return y * (gy - dot)


def log_softmax_fwd(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    return z - lse


def log_softmax_bwd(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    s = np.sum(gy, axis=1, keepdims=True)
    return gy - np.exp(y) * s


def layer_norm_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    """Row-wise layer norm. Returns (y, xhat, rstd); xhat/rstd feed backward."""
    mean = np.mean(x, axis=1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    return xhat * gain + bias, xhat, rstd[:, 0].copy()


def layer_norm_bwd(xhat: np.ndarray, rstd: np.ndarray, gain: np.ndarray, gy: np.ndarray):
    d = xhat.shape[1]
    dxhat = gy * gain
    m1 = np.sum(dxhat, axis=1, keepdims=True) / d
    m2 = np.sum(dxhat * xhat, axis=1, keepdims=True) / d
    gx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    ggain = np.sum(gy * xhat, axis=0)
    gbias = np.sum(gy, axis=0)
    return gx, ggain, gbias


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    """tanh-approximation GELU (BERT flavour)."""
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x ** 3)))


def gelu_bwd(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    u = GELU_C * (x + GELU_A * x ** 3)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * GELU_A * x ** 2)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du)


def adamw_update(p, g, m, v, t: int, lr: float, b1: float, b2: float,
                 eps: float, wd: float) -> None:
    """One decoupled-weight-decay Adam step, in place, on flat arrays."""
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)


def scatter_add_rows(out: np.ndarray, ids: np.ndarray, g: np.ndarray) -> None:
    """out[ids[b]] += g[b], duplicate ids accumulated (embedding-table grads)."""
    np.add.at(out, ids, g)
