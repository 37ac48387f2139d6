"""The composition function and cloze head.

A single composition fuses two child-span vectors through N transformer
layers. The input is always the 4-slot sequence

    [SUM] [CLS] left+[LEFT] right+[RIGHT]

with no positional embeddings anywhere; the two role embeddings are the only
thing that distinguishes left from right. After the encoder:

* a scalar head on h_[SUM] gives the single-step plausibility p (sigmoid),
* a 2-way head on h_[CLS] gates h_left vs h_right into the fused vector c,
  so c always lies in the convex hull of the two child hidden states.

Word prediction swaps [SUM] for [MASK] and reads a vocabulary distribution
off h_[MASK] through the tied embedding table. A missing context (sentence
boundary) is replaced by a learned null-context vector.

Layers are post-LN BERT-style: LN(x + MHA(x)), LN(x + GELU-FFN(x)).
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict, field
from types import SimpleNamespace

import numpy as np

from . import ad

MAGIC = b"CLM1"

# global counter of composition calls (one per candidate pair, batched or not)
_compose_calls = 0


def call_counter() -> int:
    return _compose_calls


def reset_call_counter() -> None:
    global _compose_calls
    _compose_calls = 0


def _count(n: int) -> None:
    global _compose_calls
    _compose_calls += n


class ModelError(Exception):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1
    m: int = 4  # pruning threshold carried in checkpoints

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ModelError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class CompositionOutput:
    c: np.ndarray
    p: float
    log_p: float
    weights: np.ndarray  # left/right gate, sums to 1
    h_sum: np.ndarray
    h_cls: np.ndarray
    h_left: np.ndarray
    h_right: np.ndarray


class ModelParams:
    """Named parameter arrays plus the architecture config.

    Arrays are plain float32 numpy buffers; ``bind`` wraps them as leaf
    tensors on a tape (zero copy) so several tapes can share one parameter
    set read-only.
    """

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        self.arrays = arrays

    @staticmethod
    def init(config: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        d, ffn, v = config.dim, config.ffn_dim, config.vocab_size

        def norm(*shape):
            return rng.normal(0.0, 0.02, size=shape).astype(np.float32)

        a: dict[str, np.ndarray] = {
            "emb": norm(v, d),
            "sum_emb": norm(d), "cls_emb": norm(d), "mask_emb": norm(d),
            "left_emb": norm(d), "right_emb": norm(d),
            "null_ctx": norm(d),
            "p_w": norm(d, 1), "p_b": np.zeros(1, dtype=np.float32),
            "w_w": norm(d, 2), "w_b": np.zeros(2, dtype=np.float32),
            "out_b": np.zeros(v, dtype=np.float32),
        }
        for i in range(config.layers):
            a[f"l{i}.wq"] = norm(d, d)
            a[f"l{i}.wk"] = norm(d, d)
            a[f"l{i}.wv"] = norm(d, d)
            a[f"l{i}.wo"] = norm(d, d)
            a[f"l{i}.bq"] = np.zeros(d, dtype=np.float32)
            a[f"l{i}.bk"] = np.zeros(d, dtype=np.float32)
            a[f"l{i}.bv"] = np.zeros(d, dtype=np.float32)
            a[f"l{i}.bo"] = np.zeros(d, dtype=np.float32)
            a[f"l{i}.ln1_g"] = np.ones(d, dtype=np.float32)
            a[f"l{i}.ln1_b"] = np.zeros(d, dtype=np.float32)
            a[f"l{i}.ln2_g"] = np.ones(d, dtype=np.float32)
            a[f"l{i}.ln2_b"] = np.zeros(d, dtype=np.float32)
            a[f"l{i}.w1"] = norm(d, ffn)
            a[f"l{i}.b1"] = np.zeros(ffn, dtype=np.float32)
            a[f"l{i}.w2"] = norm(ffn, d)
            a[f"l{i}.b2"] = np.zeros(d, dtype=np.float32)
        return ModelParams(config, a)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def bind(self, tape: ad.Tape) -> SimpleNamespace:
        bound = {k.replace(".", "_"): tape.tensor(v, param=True, name=k)
                 for k, v in self.arrays.items()}
        ns = SimpleNamespace(**bound)
        ns.config = self.config
        ns.by_name = {k: bound[k.replace(".", "_")] for k in self.arrays}
        return ns

    def grads_by_name(self, tape: ad.Tape, bound: SimpleNamespace,
                      grads: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for name, t in bound.by_name.items():
            g = grads.get(t.tid)
            if g is not None:
                out[name] = g
        return out

    # -- checkpoint container: MAGIC, u32 header length, JSON header, raw
    #    little-endian tensor bytes at the offsets listed in the header --

    def save(self, path: str) -> None:
        entries = []
        offset = 0
        for name in sorted(self.arrays):
            arr = self.arrays[name]
            nbytes = arr.astype("<f4").nbytes
            entries.append({"name": name, "shape": list(arr.shape),
                            "offset": offset, "nbytes": nbytes})
            offset += nbytes
        header = json.dumps({"config": asdict(self.config), "tensors": entries}).encode()
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            for name in sorted(self.arrays):
                f.write(self.arrays[name].astype("<f4").tobytes())

    @staticmethod
    def load(path: str) -> "ModelParams":
        with open(path, "rb") as f:
            if f.read(4) != MAGIC:
                raise ModelError(f"{path}: not a chartlm checkpoint")
            (hlen,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen).decode())
            data = f.read()
        config = ModelConfig(**header["config"])
        arrays = {}
        for e in header["tensors"]:
            raw = data[e["offset"]: e["offset"] + e["nbytes"]]
            arrays[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
        return ModelParams(config, arrays)


def encoder_forward(bound: SimpleNamespace, x: ad.Tensor, *, train: bool = False,
                    rng: np.random.Generator | None = None) -> ad.Tensor:
    """N transformer layers over (B, 4, d)."""
    cfg: ModelConfig = bound.config
    b, s, d = x.data.shape
    h, dh = cfg.heads, cfg.dim // cfg.heads
    drop = cfg.dropout if train else 0.0
    for i in range(cfg.layers):
        L = lambda suffix: getattr(bound, f"l{i}_{suffix}")
        q = ad.add(ad.matmul(x, L("wq")), L("bq"))
        k = ad.add(ad.matmul(x, L("wk")), L("bk"))
        v = ad.add(ad.matmul(x, L("wv")), L("bv"))
        q = ad.transpose(ad.reshape(q, (b, s, h, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (b, s, h, dh)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, (b, s, h, dh)), (0, 2, 1, 3))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = ad.softmax(scores)
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
        ctx = ad.add(ad.matmul(ctx, L("wo")), L("bo"))
        if drop > 0.0:
            ctx = ad.dropout(ctx, drop, rng)
        x = ad.layer_norm(ad.add(x, ctx), L("ln1_g"), L("ln1_b"))
        ff = ad.gelu(ad.add(ad.matmul(x, L("w1")), L("b1")))
        ff = ad.add(ad.matmul(ff, L("w2")), L("b2"))
        if drop > 0.0:
            ff = ad.dropout(ff, drop, rng)
        x = ad.layer_norm(ad.add(x, ff), L("ln2_g"), L("ln2_b"))
    return x


def _slots(bound: SimpleNamespace, first: ad.Tensor, left: ad.Tensor,
           right: ad.Tensor) -> ad.Tensor:
    """Assemble (B, 4, d): [first, CLS, left+LEFT, right+RIGHT].

    Role embeddings go on slots 3/4 only; the special slots stay bare.
    """
    b = left.data.shape[0]
    tape = left.tape
    zeros = tape.tensor(np.zeros((b, left.data.shape[1]), dtype=tape.dtype))
    s0 = ad.add(zeros, first)
    s1 = ad.add(zeros, bound.cls_emb)
    s2 = ad.add(left, bound.left_emb)
    s3 = ad.add(right, bound.right_emb)
    return ad.stack([s0, s1, s2, s3], axis=1)


def compose_batch(bound: SimpleNamespace, left: ad.Tensor, right: ad.Tensor, *,
                  train: bool = False, rng: np.random.Generator | None = None) -> dict:
    """Composition of B (left, right) pairs in one encoder pass.

    Returns tensors: c (B, d), log_p (B,), and the four hidden slots; plus
    plain-float p values for merge scoring.
    """
    if not np.all(np.isfinite(left.data)) or not np.all(np.isfinite(right.data)):
        raise ModelError("non-finite composition inputs")
    _count(left.data.shape[0])
    x = _slots(bound, bound.sum_emb, left, right)
    out = encoder_forward(bound, x, train=train, rng=rng)
    h_sum = ad.index_axis1(out, 0)
    h_cls = ad.index_axis1(out, 1)
    h_left = ad.index_axis1(out, 2)
    h_right = ad.index_axis1(out, 3)
    z = ad.add(ad.matmul(h_sum, bound.p_w), bound.p_b)       # (B, 1)
    log_p = ad.reshape(ad.log_sigmoid(z), (left.data.shape[0],))
    w = ad.softmax(ad.add(ad.matmul(h_cls, bound.w_w), bound.w_b))  # (B, 2)
    w1 = ad.reshape(ad.index_axis1(w, 0), (left.data.shape[0], 1))
    w2 = ad.reshape(ad.index_axis1(w, 1), (left.data.shape[0], 1))
    c = ad.add(ad.mul(w1, h_left), ad.mul(w2, h_right))
    return {
        "c": c, "log_p": log_p, "p": np.exp(log_p.data.astype(np.float64)),
        "w": w, "h_sum": h_sum, "h_cls": h_cls, "h_left": h_left, "h_right": h_right,
    }


def compose(left: np.ndarray, right: np.ndarray, params: ModelParams) -> CompositionOutput:
    """Single-pair convenience wrapper (fresh tape, no noise, no dropout)."""
    tape = ad.Tape(dtype=params.arrays["emb"].dtype)
    bound = params.bind(tape)
    out = compose_batch(bound, tape.tensor(np.asarray(left)[None, :]),
                        tape.tensor(np.asarray(right)[None, :]))
    return CompositionOutput(
        c=out["c"].data[0].copy(), p=float(out["p"][0]), log_p=float(out["log_p"].data[0]),
        weights=out["w"].data[0].copy(), h_sum=out["h_sum"].data[0].copy(),
        h_cls=out["h_cls"].data[0].copy(), h_left=out["h_left"].data[0].copy(),
        h_right=out["h_right"].data[0].copy())


def predict_word_batch(bound: SimpleNamespace, left: ad.Tensor, right: ad.Tensor, *,
                       train: bool = False, rng: np.random.Generator | None = None) -> ad.Tensor:
    """Log-probabilities (B, V) for the token between two context vectors.

    Callers substitute ``bound.null_ctx`` rows for absent contexts; the
    output projection is the tied embedding table plus a free bias.
    """
    x = _slots(bound, bound.mask_emb, left, right)
    out = encoder_forward(bound, x, train=train, rng=rng)
    h_mask = ad.index_axis1(out, 0)
    logits = ad.add(ad.matmul(h_mask, ad.transpose(bound.emb, (1, 0))), bound.out_b)
    return ad.log_softmax(logits)


def predict_word(left_ctx: np.ndarray | None, right_ctx: np.ndarray | None,
                 params: ModelParams) -> np.ndarray:
    """Spec-level single prediction; at least one context must be present."""
    if left_ctx is None and right_ctx is None:
        raise ModelError("predict_word needs at least one context (skip length-1 sentences)")
    tape = ad.Tape(dtype=params.arrays["emb"].dtype)
    bound = params.bind(tape)

    def side(v):
        return tape.tensor(np.asarray(v)[None, :]) if v is not None else \
            ad.reshape(bound.null_ctx, (1, params.config.dim))

    out = predict_word_batch(bound, side(left_ctx), side(right_ctx))
    return out.data[0].copy()
