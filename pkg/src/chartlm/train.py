"""Bidirectional cloze pretraining.

For every sentence the encoder runs once (with pruning, Gumbel noise on);
each position i is then predicted from the longest computed cell ending at
i-1 and the longest starting at i+1 — the full-span contexts when the chart
is dense, the nearest surviving cells when pruning left holes. No input is
masked; boundary positions use the learned null context. The loss is the
summed cross-entropy normalized by token count, optimized with AdamW, and
gradients flow through both the prediction head and the chart.

Gumbel streams are seeded from (step seed, sentence content), so the batch
loss does not depend on sentence order (dropout, when enabled, does).
"""
from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import ad
from .chart import Chart
from .model import ModelConfig, ModelParams, predict_word_batch, call_counter
from .prune import tree_induction, induce_batch, ConfigError
from .data import batch_by_length

log = logging.getLogger("chartlm")


@dataclass
class TrainConfig:
    m: int = 4
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    batch_size: int = 32
    max_total_len: int = 512
    max_sentence_len: int = 128
    epochs: int = 10
    seed: int = 0
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1

    def __post_init__(self):
        if self.m < 2:
            raise ConfigError("m must be >= 2")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, dim=self.dim, layers=self.layers,
                           heads=self.heads, ffn_dim=self.ffn_dim,
                           dropout=self.dropout, m=self.m)


@dataclass
class LossReport:
    total_nll: float
    token_count: int
    per_sentence: list[tuple[float, int]] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return self.total_nll / max(self.token_count, 1)


def adjacent_context(chart: Chart, i: int):
    """Longest computed cell ending at i-1 and longest starting at i+1.
    Either side is None at the sentence boundary."""
    left = None
    if i > 1:
        for x in range(1, i):
            cell = chart.cells.get((x, i - 1))
            if cell is not None:
                left = cell
                break
    right = None
    if i < chart.n:
        for y in range(chart.n, i, -1):
            cell = chart.cells.get((i + 1, y))
            if cell is not None:
                right = cell
                break
    return left, right


def _context_slots(bound, charts: list[Chart]):
    lefts, rights, targets = [], [], []
    for chart in charts:
        for i in range(1, chart.n + 1):
            lcell, rcell = adjacent_context(chart, i)
            lefts.append(lcell.e if lcell is not None else bound.null_ctx)
            rights.append(rcell.e if rcell is not None else bound.null_ctx)
            targets.append(chart.tokens[i - 1])
    return lefts, rights, targets


def sentence_nll(tape: ad.Tape, bound, chart: Chart, *,
                 train: bool = False, rng=None) -> ad.Tensor:
    """Summed cloze NLL of a sentence given its filled chart (tape-attached)."""
    lefts, rights, targets = _context_slots(bound, [chart])
    logprobs = predict_word_batch(bound, ad.stack(lefts, axis=0),
                                  ad.stack(rights, axis=0), train=train, rng=rng)
    return ad.nll(logprobs, targets)


def sentence_loss(tokens: list[int], params: ModelParams, config: TrainConfig,
                  rng: np.random.Generator, *, test_mode: bool = False,
                  soft_mode: bool = False, train: bool = False) -> LossReport:
    """Single-sentence loss on a fresh tape; sentences need n >= 2."""
    if len(tokens) < 2:
        raise ValueError("length-1 sentences have no context and are skipped")
    tape = ad.Tape(dtype=params.arrays["emb"].dtype)
    chart = tree_induction(tokens, config.m, params, rng, tape=tape,
                           test_mode=test_mode, soft_mode=soft_mode, train=train)
    loss = sentence_nll(tape, chart.bound, chart, train=train, rng=rng)
    return LossReport(float(loss.data), len(tokens), [(float(loss.data), len(tokens))])


def _sentence_rng(step_seed: int, tokens: list[int]) -> np.random.Generator:
    """Deterministic, order-independent noise stream for one sentence."""
    digest = zlib.crc32(np.asarray(tokens, dtype=np.int64).tobytes())
    return np.random.default_rng((step_seed << 32) ^ digest)


def batch_step(params: ModelParams, batch: list[list[int]], config: TrainConfig,
               step_seed: int, opt_state: dict) -> LossReport:
    """One optimizer step over a batch: all charts share a tape, the loss is
    the summed NLL normalized by the batch token count."""
    tape = ad.Tape()
    bound = params.bind(tape)
    rngs = [_sentence_rng(step_seed, toks) for toks in batch]
    drop_rng = np.random.default_rng(step_seed) if config.dropout > 0 else None
    charts = induce_batch(batch, config.m, params, rngs, tape=tape, bound=bound,
                          drop_rng=drop_rng, train=True)
    lefts, rights, targets = _context_slots(bound, charts)
    logprobs = predict_word_batch(bound, ad.stack(lefts, axis=0),
                                  ad.stack(rights, axis=0),
                                  train=True, rng=drop_rng)
    total = ad.nll(logprobs, targets)
    total_tokens = len(targets)
    loss = ad.scale(total, 1.0 / total_tokens)
    grads = tape.backward(loss)
    named = {name: grads[t.tid] for name, t in bound.by_name.items() if t.tid in grads}
    ad.adamw_step(params.arrays, named, opt_state, config.lr, config.betas,
                  weight_decay=config.weight_decay)
    # per-sentence breakdown from the realized log-probs, no extra tape work
    per_sentence = []
    lp = logprobs.data
    row = 0
    for toks in batch:
        n = len(toks)
        nll = -float(lp[np.arange(row, row + n), toks].sum())
        per_sentence.append((nll, n))
        row += n
    return LossReport(float(total.data), total_tokens, per_sentence)


def train(corpus: list[list[int]], config: TrainConfig, vocab_size: int, *,
          params: ModelParams | None = None, checkpoint_path: str | None = None,
          log_lines: list[str] | None = None,
          stop_after_seconds: float | None = None,
          epoch_callback=None) -> tuple[ModelParams, list[LossReport]]:
    """Epoch loop. Deterministic given the seed; a checkpoint is written
    after every epoch when a path is given."""
    if not corpus:
        raise ConfigError("empty training corpus")
    if params is None:
        params = ModelParams.init(config.model_config(vocab_size), seed=config.seed)
    usable = [s for s in corpus if len(s) >= 2]
    skipped = len(corpus) - len(usable)
    if skipped:
        log.warning("skipping %d length-1 sentences (no cloze context)", skipped)
    batches, dropped = batch_by_length(usable, config.batch_size,
                                       config.max_total_len, config.max_sentence_len)
    if dropped:
        log.warning("dropped %d sentences over %d tokens", dropped, config.max_sentence_len)
    if not batches:
        raise ConfigError("no usable sentences after filtering")
    opt_state: dict = {}
    reports: list[LossReport] = []
    start = time.monotonic()
    for epoch in range(config.epochs):
        epoch_nll, epoch_tokens = 0.0, 0
        for step, batch in enumerate(batches):
            step_seed = (config.seed * 1_000_003 + epoch) * 1_000_003 + step
            rep = batch_step(params, batch, config, step_seed, opt_state)
            epoch_nll += rep.total_nll
            epoch_tokens += rep.token_count
            line = f"epoch {epoch}, step {step}, loss {rep.mean:.4f}, calls {call_counter()}"
            log.info(line)
            if log_lines is not None:
                log_lines.append(line)
        reports.append(LossReport(epoch_nll, epoch_tokens))
        if checkpoint_path is not None:
            params.save(checkpoint_path)
        if epoch_callback is not None and epoch_callback(epoch, reports[-1]):
            break
        if stop_after_seconds is not None and time.monotonic() - start > stop_after_seconds:
            log.warning("time budget reached after epoch %d", epoch)
            break
    return params, reports
