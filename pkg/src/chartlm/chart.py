"""Differentiable binary chart over a token sequence.

Every span cell holds a fused vector ``e`` plus two log-domain scores: the
single-step composition probability ``log_p`` and the subtree probability
``log_ptilde`` (sum of ``log_p`` along the chosen derivation — probabilities
are kept in log space so long sentences cannot underflow float32).

A non-terminal cell is built from all admissible split points: each split is
one composition call; the split is then selected by straight-through Gumbel
over the candidate subtree log-probabilities (temperature 1). Forward, the
cell's ``e`` is bit-identical to the winning candidate's ``c``; backward,
gradients flow to every candidate through the soft distribution. ``log_p`` /
``log_ptilde`` are taken from the winning candidate only.

``test_mode`` drops the Gumbel noise (plain argmax, lowest index on ties) for
reproducible parses. ``soft_mode`` replaces the hard selection by the full
softmax mixture; the training path never uses it, but it makes the whole
encoder differentiable end-to-end for the finite-difference oracles.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ad
from .model import ModelParams, compose_batch

GUMBEL_EPS = 1e-20


class ChartError(Exception):
    pass


class VocabError(ChartError):
    pass


@dataclass
class GumbelSelection:
    hard: np.ndarray
    soft: np.ndarray
    noise: np.ndarray | None


def gumbel_st(logits: np.ndarray, rng: np.random.Generator | None,
              test_mode: bool = False) -> GumbelSelection:
    """Straight-through Gumbel-max over a logit vector (temperature 1)."""
    logits = np.asarray(logits, dtype=np.float64)
    if test_mode or logits.shape[0] == 1:
        noise = None
        z = logits
    else:
        u = rng.random(logits.shape[0])
        noise = -np.log(-np.log(u + GUMBEL_EPS) + GUMBEL_EPS)
        z = logits + noise
    k = int(np.argmax(z))
    hard = np.zeros_like(z)
    hard[k] = 1.0
    e = np.exp(z - np.max(z))
    return GumbelSelection(hard=hard, soft=e / e.sum(), noise=noise)


class ChartCell:
    __slots__ = ("span", "e", "log_p", "log_ptilde", "p_val", "left", "right",
                 "is_terminal")

    def __init__(self, span, e, log_p, log_ptilde, p_val, left=None, right=None,
                 is_terminal=False):
        self.span = span                  # original token range, 1-based inclusive
        self.e = e                        # Tensor (d,)
        self.log_p = log_p                # Tensor ()
        self.log_ptilde = log_ptilde      # Tensor ()
        self.p_val = p_val                # float, for merge scoring
        self.left = left
        self.right = right
        self.is_terminal = is_terminal    # original token, not a merged span

    @property
    def chosen_split(self):
        """Original-coordinate split point k (left child covers span[0]..k)."""
        return None if self.left is None else self.left.span[1]

    def __repr__(self):
        return f"ChartCell{self.span}(log_p={float(self.log_p.data):.4f})"


@dataclass
class BinaryTree:
    span: tuple[int, int]
    left: "BinaryTree | None" = None
    right: "BinaryTree | None" = None
    token: int | None = None  # leaf: 1-based token position

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def leaves(self) -> list[int]:
        if self.is_leaf:
            return [self.token]
        return self.left.leaves() + self.right.leaves()

    def spans(self) -> list[tuple[int, int]]:
        """All node spans, leaves included, preorder."""
        out = [self.span]
        if not self.is_leaf:
            out += self.left.spans() + self.right.spans()
        return out

    def bracket(self, tokens: list[str]) -> str:
        """One-line `( ... )` export with token leaves."""
        if self.is_leaf:
            return tokens[self.token - 1]
        return f"({self.left.bracket(tokens)} {self.right.bracket(tokens)})"


class Chart:
    """All cells ever computed for one sentence, keyed by original span.

    Pruning never removes cells from here (the table views in ``prune`` do
    the forgetting); the cloze objective scans this accumulated structure
    for the longest adjacent non-empty cells.
    """

    def __init__(self, tokens: list[int], params: ModelParams, *,
                 rng: np.random.Generator | None = None, tape: ad.Tape | None = None,
                 bound=None, test_mode: bool = False, soft_mode: bool = False,
                 train: bool = False, split_override: dict | None = None):
        if len(tokens) < 1:
            raise ChartError("empty sentence")
        v = params.config.vocab_size
        for t in tokens:
            if not (0 <= t < v):
                raise VocabError(f"token id {t} outside vocabulary of size {v}")
        self.tokens = list(tokens)
        self.n = len(tokens)
        self.params = params
        self.tape = tape if tape is not None else ad.Tape(dtype=params.arrays["emb"].dtype)
        # charts sharing a tape must share one parameter binding, otherwise
        # gradients split across duplicate leaf tensors
        self.bound = bound if bound is not None else params.bind(self.tape)
        self.rng = rng
        self.test_mode = test_mode
        self.soft_mode = soft_mode
        self.train = train
        self.split_override = split_override or {}
        self.cells: dict[tuple[int, int], ChartCell] = {}
        self.merges = []          # filled by prune.tree_induction
        self.final_table = None
        d = params.config.dim
        zero = self.tape.tensor(np.zeros((), dtype=self.tape.dtype))
        emb_rows = ad.embed(self.bound.emb, self.tokens)  # one gather per sentence
        for i in range(1, self.n + 1):
            e = ad.row(emb_rows, i - 1)
            self.cells[(i, i)] = ChartCell((i, i), e, zero, zero, 1.0, is_terminal=True)
        self._zero = zero

    @property
    def root(self) -> ChartCell:
        cell = self.cells.get((1, self.n))
        if cell is None:
            raise ChartError("root cell not filled")
        return cell

    def compose_cells(self, specs: list[list[tuple[ChartCell, ChartCell]]]) -> list[ChartCell]:
        """Fill one new cell per spec; each spec lists its admissible
        (left, right) candidate pairs. All pairs share one batched encoder
        call; Gumbel draws are consumed per cell, in spec order."""
        return compose_specs([(self, spec) for spec in specs],
                             train=self.train, drop_rng=self.rng)

    def _select(self, spec, pooled, a: int) -> ChartCell:
        """Build one cell from rows [a, a+len(spec)) of the pooled encoder
        output: Gumbel-select the split, wire up children."""
        if not spec:
            raise ChartError("no admissible split for cell (pruning bug)")
        k = len(spec)
        logits = ad.slice_rows(pooled["logpt"], a, a + k)
        span = (spec[0][0].span[0], spec[0][1].span[1])

        if self.test_mode:
            noise = None
        else:
            u = self.rng.random(k)
            noise = -np.log(-np.log(u + GUMBEL_EPS) + GUMBEL_EPS)

        cands = ad.slice_rows(pooled["c"], a, a + k)
        override = self.split_override.get(span)
        if self.soft_mode:
            z = logits if noise is None else ad.add(logits, noise.astype(self.tape.dtype))
            w = ad.softmax(z)
            e = ad.reshape(ad.matmul(ad.reshape(w, (1, k)), cands),
                           (cands.data.shape[1],))
            kstar = int(np.argmax(z.data))
            log_p = ad.sum_all(ad.mul(w, ad.slice_rows(pooled["log_p"], a, a + k)))
            log_pt = ad.sum_all(ad.mul(w, logits))
            if override is not None:
                kstar = next(j for j, (l, _) in enumerate(spec) if l.span[1] == override)
        else:
            e, kstar, _soft = ad.st_mix(cands, logits, noise)
            if override is not None:
                kstar = next(j for j, (l, _) in enumerate(spec) if l.span[1] == override)
                e = ad.row(pooled["c"], a + kstar)
            log_p = ad.pick(pooled["log_p"], a + kstar)
            log_pt = ad.pick(logits, kstar)

        l, r = spec[kstar]
        cell = ChartCell(span, e, log_p, log_pt, float(np.exp(log_p.data)), l, r)
        self.cells[span] = cell
        return cell

    def fill_cell(self, i: int, j: int) -> ChartCell:
        """Dense-chart single-cell fill: every split of (i, j) is admissible."""
        spec = []
        for k in range(i, j):
            l = self.cells.get((i, k))
            r = self.cells.get((k + 1, j))
            if l is None or r is None:
                raise ChartError(f"sub-cells of ({i},{j}) at split {k} missing")
            spec.append((l, r))
        return self.compose_cells([spec])[0]

    def tree(self, i: int | None = None, j: int | None = None) -> BinaryTree:
        if i is None:
            i, j = 1, self.n
        cell = self.cells.get((i, j))
        if cell is None:
            raise ChartError(f"cell ({i},{j}) not filled")
        return recover_tree(cell)


def compose_specs(items: list[tuple[Chart, list]], *, train: bool = False,
                  drop_rng: np.random.Generator | None = None) -> list[ChartCell]:
    """Fill cells across one or more charts with a single pooled encoder
    call. Charts must share a tape and parameter binding; Gumbel draws come
    from each chart's own stream (in item order), dropout from `drop_rng`."""
    items = [(c, s) for c, s in items if s is not None]
    if not items:
        return []
    chart0 = items[0][0]
    pairs = [pr for _, spec in items for pr in spec]
    lefts = ad.stack([l.e for l, _ in pairs], axis=0)
    rights = ad.stack([r.e for _, r in pairs], axis=0)
    out = compose_batch(chart0.bound, lefts, rights, train=train, rng=drop_rng)
    lpt_l = ad.stack([l.log_ptilde for l, _ in pairs], axis=0)
    lpt_r = ad.stack([r.log_ptilde for _, r in pairs], axis=0)
    pooled = {"c": out["c"], "log_p": out["log_p"],
              "logpt": ad.add(ad.add(out["log_p"], lpt_l), lpt_r)}
    made = []
    a = 0
    for chart, spec in items:
        made.append(chart._select(spec, pooled, a))
        a += len(spec)
    return made


def init_chart(tokens: list[int], params: ModelParams, **kw) -> Chart:
    return Chart(tokens, params, **kw)


def encode_full(tokens: list[int], params: ModelParams,
                rng: np.random.Generator | None = None, **kw) -> Chart:
    """Exhaustive CKY encode: every span of every length, n(n^2-1)/6
    composition calls. The oracle the pruned path is checked against."""
    chart = Chart(tokens, params, rng=rng, **kw)
    n = chart.n
    for length in range(2, n + 1):
        specs = []
        for i in range(1, n - length + 2):
            j = i + length - 1
            specs.append([(chart.cells[(i, k)], chart.cells[(k + 1, j)])
                          for k in range(i, j)])
        chart.compose_cells(specs)
    return chart


def recover_tree(cell: ChartCell) -> BinaryTree:
    """Top-down readout of the chosen splits. Merged spans expand to the
    subtree recorded when they were built, so leaves are always original
    tokens."""
    if cell.is_terminal:
        return BinaryTree(cell.span, token=cell.span[0])
    if cell.left is None or cell.right is None:
        raise ChartError(f"cell {cell.span} has a dangling split reference")
    lt = recover_tree(cell.left)
    rt = recover_tree(cell.right)
    if lt.span[1] + 1 != rt.span[0] or (lt.span[0], rt.span[1]) != cell.span:
        raise ChartError(f"children of {cell.span} do not partition it")
    return BinaryTree(cell.span, left=lt, right=rt)
