"""Minimal dense-array reverse-mode autodiff.

A ``Tape`` records every primitive in execution order (a topological order by
construction); ``backward`` walks it once in reverse. Values are numpy arrays,
float32 by default; the finite-difference oracles build float64 tapes via
``Tape(dtype=np.float64)``. Broadcasting is supported only where the model
needs it (bias adds, gating scalars) and is undone in backward by summing the
broadcast axes.

Tapes are single-threaded; parameters are read-shared across tapes and updated
only by the optimizer between tapes.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels

LN_EPS = 1e-12


class ADError(Exception):
    """Shape/contract violation in a primitive."""


class Tape:
    def __init__(self, dtype=np.float32, check_finite: bool = False):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self._nodes: list[tuple[int, tuple[int, ...], Callable]] = []
        self._n_tensors = 0

    def _new_id(self) -> int:
        self._n_tensors += 1
        return self._n_tensors - 1

    def _record(self, out: "Tensor", inputs: Sequence["Tensor"], vjp: Callable) -> None:
        self._nodes.append((out.tid, tuple(t.tid for t in inputs), vjp))

    def tensor(self, data, param: bool = False, name: str = "") -> "Tensor":
        arr = np.asarray(data, dtype=self.dtype)
        return Tensor(self, arr, param=param, name=name)

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every reachable tensor.

        Unreached tensors simply have no entry; callers treat that as zero.
        Rerunning on the same tape is deterministic (fixed reverse order,
        fresh accumulators).
        """
        if loss.data.size != 1:
            raise ADError(f"loss must be scalar, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
        for out_id, input_ids, vjp in reversed(self._nodes):
            g = grads.get(out_id)
            if g is None:
                continue
            for tid, gin in zip(input_ids, vjp(g)):
                if gin is None:
                    continue
                acc = grads.get(tid)
                # functional accumulation: vjp outputs may alias each other
                grads[tid] = gin if acc is None else acc + gin
        return grads


class Tensor:
    __slots__ = ("tape", "data", "tid", "is_param", "name")

    def __init__(self, tape: Tape, data: np.ndarray, param: bool = False, name: str = ""):
        if data.dtype != tape.dtype:
            data = data.astype(tape.dtype)
        if tape.check_finite and not np.all(np.isfinite(data)):
            raise ADError(f"non-finite values entering tape ({name or 'tensor'})")
        self.tape = tape
        self.data = data
        self.tid = tape._new_id()
        self.is_param = param
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.tensor(np.asarray(x))


def _out(tape: Tape, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    if tape.check_finite and not np.all(np.isfinite(data)):
        raise ADError("primitive produced non-finite values")
    t = Tensor(tape, data)
    tape._record(t, inputs, vjp)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b) -> Tensor:
    b = _wrap(a.tape, b)
    return _out(a.tape, a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(a.tape, b)
    return _out(a.tape, a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(a.tape, b)
    return _out(a.tape, a.data * b.data, (a, b),
                lambda g: (_unbroadcast(g * b.data, a.data.shape),
                           _unbroadcast(g * a.data, b.data.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    return _out(a.tape, a.data * a.tape.dtype.type(s), (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ADError("matmul operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ADError(f"matmul dim mismatch: {a.data.shape} @ {b.data.shape}")

    def vjp(g):
        if b.data.ndim == 2 and a.data.ndim > 2:
            # x @ W with batched x: one flat GEMM instead of a batched
            # outer product followed by a reduction over the batch axes
            k, n = a.data.shape[-1], g.shape[-1]
            ga = np.matmul(g, b.data.T)
            gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
            return ga, gb
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _out(a.tape, np.matmul(a.data, b.data), (a, b), vjp)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _out(a.tape, np.ascontiguousarray(np.transpose(a.data, axes)), (a,),
                lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.data.shape
    return _out(a.tape, a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tape = tensors[0].tape
    data = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.moveaxis(g, axis, 0))

    return _out(tape, data, tensors, vjp)


def index_axis1(x: Tensor, i: int) -> Tensor:
    """x[:, i, ...] with zero-padded backward."""

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, i] = g
        return (gx,)

    return _out(x.tape, np.ascontiguousarray(x.data[:, i]), (x,), vjp)


def pick(x: Tensor, i: int) -> Tensor:
    """Scalar x[i] from a 1-D tensor."""

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return _out(x.tape, np.asarray(x.data[i]), (x,), vjp)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        gx = np.zeros_like(x.data)
        if x.data.ndim == 1:
            np.add.at(gx, idx, g)
        else:
            kernels.scatter_add_rows(gx, idx, g)
        return (gx,)

    return _out(x.tape, x.data[idx], (x,), vjp)


def slice_rows(x: Tensor, a: int, b: int) -> Tensor:
    """Contiguous axis-0 slice x[a:b]; backward zero-pads."""

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[a:b] = g
        return (gx,)

    return _out(x.tape, np.ascontiguousarray(x.data[a:b]), (x,), vjp)


def row(x: Tensor, i: int) -> Tensor:
    """Single row x[i] of a 2-D tensor as a (d,) vector."""

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return _out(x.tape, x.data[i].copy(), (x,), vjp)


def embed(table: Tensor, ids) -> Tensor:
    """Row gather from an embedding table; grads scatter-add back."""
    return take_rows(table, np.asarray(ids, dtype=np.int64))


def sum_all(x: Tensor) -> Tensor:
    return _out(x.tape, np.asarray(x.data.sum(), dtype=x.tape.dtype), (x,),
                lambda g: (np.broadcast_to(g, x.data.shape).astype(x.tape.dtype),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    def vjp(g):
        return (np.repeat(np.expand_dims(g, axis), x.data.shape[axis], axis=axis),)

    return _out(x.tape, x.data.sum(axis=axis), (x,), vjp)


def _rows2d(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis; rows sum to one."""
    if x.data.size == 0:
        raise ADError("softmax of empty input")
    y = kernels.softmax_fwd(_rows2d(x.data)).reshape(x.data.shape)
    return _out(x.tape, y, (x,),
                lambda g: (kernels.softmax_bwd(_rows2d(y), _rows2d(g)).reshape(x.data.shape),))


def log_softmax(x: Tensor) -> Tensor:
    y = kernels.log_softmax_fwd(_rows2d(x.data)).reshape(x.data.shape)
    return _out(x.tape, y, (x,),
                lambda g: (kernels.log_softmax_bwd(_rows2d(y), _rows2d(g)).reshape(x.data.shape),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    if x.data.shape[-1] < 2:
        raise ADError("layer_norm needs width >= 2")
    x2 = _rows2d(x.data)
    y, xhat, rstd = kernels.layer_norm_fwd(x2, gain.data, bias.data, x.tape.dtype.type(LN_EPS))

    def vjp(g):
        gx, ggain, gbias = kernels.layer_norm_bwd(xhat, rstd, gain.data, _rows2d(g))
        return gx.reshape(x.data.shape), ggain, gbias

    return _out(x.tape, y.reshape(x.data.shape), (x, gain, bias), vjp)


def gelu(x: Tensor) -> Tensor:
    return _out(x.tape, kernels.gelu_fwd(x.data), (x,),
                lambda g: (kernels.gelu_bwd(x.data, g),))


def sigmoid(x: Tensor) -> Tensor:
    y = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-x.data)),
                 np.exp(x.data) / (1.0 + np.exp(x.data))).astype(x.tape.dtype)
    return _out(x.tape, y, (x,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) = -softplus(-x), overflow-safe on both tails."""
    d = x.data
    y = np.where(d >= 0, -np.log1p(np.exp(-d)), d - np.log1p(np.exp(d))).astype(x.tape.dtype)
    sig_neg = np.where(d >= 0, np.exp(-d) / (1.0 + np.exp(-d)),
                       1.0 / (1.0 + np.exp(d))).astype(x.tape.dtype)
    return _out(x.tape, y, (x,), lambda g: (g * sig_neg,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.tape.dtype) / (1.0 - rate)
    return _out(x.tape, x.data * keep, (x,), lambda g: (g * keep,))


def st_mix(cands: Tensor, logits: Tensor, noise: np.ndarray | None) -> tuple[Tensor, int, np.ndarray]:
    """Straight-through selection over K candidate rows.

    Forward returns (bit-exactly) the argmax row of ``logits + noise``.
    Backward treats the output as the soft mixture: every candidate row gets
    ``soft_k * g`` and the logits get the softmax-weighted vjp, so gradients
    reach all split points.
    """
    z = logits.data if noise is None else logits.data + noise.astype(logits.data.dtype)
    kstar = int(np.argmax(z))  # ties: lowest index (np.argmax convention)
    soft = kernels.softmax_fwd(z[None, :])[0]

    def vjp(g):
        gc = soft[:, None] * g[None, :]
        ds = cands.data @ g
        gl = soft * (ds - float(soft @ ds))
        return gc.astype(cands.data.dtype), gl.astype(logits.data.dtype)

    out = _out(cands.tape, cands.data[kstar].copy(), (cands, logits), vjp)
    return out, kstar, soft


def soft_mix(cands: Tensor, logits: Tensor, noise: np.ndarray | None) -> tuple[Tensor, int, np.ndarray]:
    """Fully soft counterpart of ``st_mix`` (used by the gradient oracles).

    Output is the softmax-weighted sum of candidate rows; argmax is still
    reported so callers can record a discrete split.
    """
    z_arr = logits.data if noise is None else logits.data + noise.astype(logits.data.dtype)
    kstar = int(np.argmax(z_arr))
    if noise is None:
        w = softmax(logits)
    else:
        w = softmax(add(logits, noise.astype(logits.data.dtype)))
    out = matmul(reshape(w, (1, w.data.shape[0])), cands)
    return reshape(out, (cands.data.shape[1],)), kstar, w.data.copy()


def nll(logprobs: Tensor, targets) -> Tensor:
    """Summed negative log-likelihood of target ids under (B, V) log-probs."""
    t = np.asarray(targets, dtype=np.int64)
    rows = np.arange(t.shape[0])
    val = -logprobs.data[rows, t].sum()

    def vjp(g):
        gx = np.zeros_like(logprobs.data)
        gx[rows, t] = -g
        return (gx,)

    return _out(logprobs.tape, np.asarray(val, dtype=logprobs.tape.dtype), (logprobs,), vjp)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: dict, lr: float, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """AdamW with decoupled decay, in place. Parameters without a gradient
    entry this step still decay (decay is independent of the gradient)."""
    state.setdefault("t", 0)
    state["t"] += 1
    t = state["t"]
    for name in params:
        p = params[name]
        if name not in state:
            state[name] = (np.zeros_like(p), np.zeros_like(p))
        m, v = state[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        kernels.adamw_update(p.reshape(-1), g.reshape(-1).astype(p.dtype),
                             m.reshape(-1), v.reshape(-1),
                             t, lr, betas[0], betas[1], eps, weight_decay)
