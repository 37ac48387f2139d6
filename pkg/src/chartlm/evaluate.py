"""Evaluation: pseudo-perplexity, sentence-level unlabeled F1, per-label
constituent recall, dependency-tree compatibility, and constrained parsing.

Span conventions for F1 (documented, matching the usual comparison script):
width-1 spans and the whole-sentence span are excluded on both sides; a
sentence where both span sets are empty scores 100, where exactly one is
empty scores 0; the corpus score is the mean of sentence F1s.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ad
from .chart import BinaryTree
from .data import DepGraph, Tree, TokenSequence, DataError
from .model import ModelParams, predict_word_batch
from .prune import tree_induction, ConfigError


class AlignmentError(DataError):
    pass


# ---------------------------------------------------------------- spans

def tree_spans(t: Tree | BinaryTree, *, keep_trivial: bool = False) -> set[tuple[int, int]]:
    """Spans over leaf positions (1-based, inclusive). By default width-1
    spans and the whole-sentence span are dropped."""
    spans: list[tuple[int, int]] = []

    def walk(node, start: int) -> int:
        if isinstance(node, BinaryTree):
            if node.is_leaf:
                return start + 1
            end = walk(node.left, start)
            end = walk(node.right, end)
            spans.append((start + 1, end))
            return end
        if node.is_leaf:
            return start + 1
        end = start
        for c in node.children:
            end = walk(c, end)
        spans.append((start + 1, end))
        return end

    n = walk(t, 0)
    if keep_trivial:
        out = set(spans)
        out.update((i, i) for i in range(1, n + 1))
        return out
    return {s for s in spans if s[1] > s[0] and s != (1, n)}


def _leaf_texts(t: Tree | BinaryTree, tokens: list[str] | None) -> list[str]:
    if isinstance(t, BinaryTree):
        return [tokens[i - 1] for i in t.leaves()] if tokens else [str(i) for i in t.leaves()]
    return t.leaves()


def sentence_f1(pred_spans: set, gold_spans: set) -> tuple[float, float, float]:
    """(precision, recall, F1) on a 0-100 scale with the empty-set rules."""
    if not pred_spans and not gold_spans:
        return 100.0, 100.0, 100.0
    if not pred_spans or not gold_spans:
        return 0.0, 0.0, 0.0
    hit = len(pred_spans & gold_spans)
    p = hit / len(pred_spans)
    r = hit / len(gold_spans)
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p * 100.0, r * 100.0, f * 100.0


def unlabeled_f1(pred: Tree | BinaryTree, gold: Tree,
                 pred_tokens: list[str] | None = None) -> tuple[float, float, float]:
    pl = _leaf_texts(pred, pred_tokens)
    gl = gold.leaves()
    if pl != gl:
        raise AlignmentError(f"leaf mismatch: {pl} vs {gl}")
    return sentence_f1(tree_spans(pred), tree_spans(gold))


def corpus_f1(preds, golds, pred_tokens=None) -> tuple[float, list[float]]:
    if len(preds) != len(golds):
        raise AlignmentError(f"{len(preds)} predictions vs {len(golds)} gold trees")
    scores = []
    for idx, (p, g) in enumerate(zip(preds, golds)):
        toks = pred_tokens[idx] if pred_tokens is not None else None
        scores.append(unlabeled_f1(p, g, toks)[2])
    return float(np.mean(scores)) if scores else 0.0, scores


# ------------------------------------------------- constituent recall

def _labeled_word_spans(gold: Tree, label: str) -> list[tuple[int, int]]:
    spans = []

    def walk(node, start: int) -> int:
        if node.is_leaf:
            return start + 1
        end = start
        for c in node.children:
            end = walk(c, end)
        if node.label == label:
            spans.append((start + 1, end))
        return end

    walk(gold, 0)
    return spans


def _nnp_chunks(gold: Tree) -> list[tuple[int, int]]:
    """Maximal runs (length >= 2) of adjacent NNP preterminals under one parent."""
    chunks = []

    def walk(node, start: int) -> int:
        if node.is_leaf:
            return start + 1
        end = start
        child_spans = []
        for c in node.children:
            s = end
            end = walk(c, end)
            child_spans.append((c, s + 1, end))
        run_start = None
        prev_end = None
        for c, s, e in child_spans + [(None, 0, 0)]:
            is_nnp = c is not None and c.is_leaf and c.label == "NNP"
            if is_nnp and run_start is None:
                run_start, prev_end = s, e
            elif is_nnp:
                prev_end = e
            elif run_start is not None:
                if prev_end > run_start:
                    chunks.append((run_start, prev_end))
                run_start = None
        return end

    walk(gold, 0)
    return chunks


def _to_piece_span(word_span: tuple[int, int], groups) -> tuple[int, int]:
    a, b = word_span
    return groups[a - 1][0], groups[b - 1][1]


def constituent_recall(pred_trees, gold_trees, token_seqs: list[TokenSequence],
                       labels=("NP", "VP", "SBAR")) -> dict[str, tuple[int, int]]:
    """Per-label (hits, total) of gold spans found in the predictions.

    Gold trees are word-level; predictions and token grouping are piece-level.
    `word` counts multi-piece words kept contiguous; `NNP` counts proper-noun
    chunks. The full prediction span set (leaves and root included) is used.
    """
    out = {lab: [0, 0] for lab in list(labels) + ["NNP", "word"]}
    for pred, gold, seq in zip(pred_trees, gold_trees, token_seqs):
        pspans = tree_spans(pred, keep_trivial=True)
        for lab in labels:
            for ws in _labeled_word_spans(gold, lab):
                out[lab][1] += 1
                if _to_piece_span(ws, seq.groups) in pspans:
                    out[lab][0] += 1
        for ws in _nnp_chunks(gold):
            out["NNP"][1] += 1
            if _to_piece_span(ws, seq.groups) in pspans:
                out["NNP"][0] += 1
        for g in seq.groups:
            if g[1] > g[0]:
                out["word"][1] += 1
                if g in pspans:
                    out["word"][0] += 1
    return {k: (v[0], v[1]) for k, v in out.items()}


# ------------------------------------------------- dependency compatibility

def span_compatible(word_span: tuple[int, int], dep: DepGraph) -> bool:
    """I(z) for a word-level span: the covered subgraph must have out-degree
    one and every node with a child outside must be that out-node."""
    a, b = word_span
    inside = set(range(a, b + 1))
    out_nodes = {w for w in inside if dep.heads[w - 1] not in inside}
    if len(out_nodes) != 1:
        return False
    in_nodes = {w for w in inside
                if any(c not in inside for c in dep.children[w])}
    return in_nodes <= out_nodes


def dep_compat(pred: Tree | BinaryTree, dep: DepGraph,
               groups: list[tuple[int, int]] | None = None) -> float | None:
    """Fraction of internal-node spans forming independent subtrees of the
    gold dependency graph, denominator |words| - 1.

    Piece-level spans that break a word score zero, as do spans covering a
    single word. Sentences with one word have no internal structure to score
    (None is returned and skipped by corpus aggregation).
    """
    n_words = len(dep.tokens)
    if groups is None:
        groups = [(i, i) for i in range(1, n_words + 1)]
    if len(groups) != n_words:
        raise AlignmentError(f"{len(groups)} word groups vs {n_words} dependency tokens")
    if n_words < 2:
        return None
    n_pieces = groups[-1][1]
    leaves = (pred.leaves() if isinstance(pred, BinaryTree)
              else list(range(1, len(pred.leaves()) + 1)))
    if len(leaves) != n_pieces:
        raise AlignmentError(f"{len(leaves)} tree leaves vs {n_pieces} pieces")
    start_of = {g[0]: w for w, g in enumerate(groups, 1)}
    end_of = {g[1]: w for w, g in enumerate(groups, 1)}
    # internal nodes only; the whole-sentence span is a member of Z
    internal = [s for s in tree_spans(pred, keep_trivial=True) if s[0] != s[1]]
    score = 0
    for a, b in internal:
        wa, wb = start_of.get(a), end_of.get(b)
        if wa is None or wb is None:
            continue  # breaks a word: I(z) = 0
        if wa == wb:
            continue  # single word: forced zero
        if span_compatible((wa, wb), dep):
            score += 1
    return score / (n_words - 1)


# ---------------------------------------------------------------- PPPL

@dataclass
class PPPLReport:
    pppl: float
    per_sentence: list[float] = field(default_factory=list)  # mean log-lik L(S)
    skipped: int = 0


def _root_context(tokens: list[int], params: ModelParams, m: int):
    if not tokens:
        return None
    if len(tokens) == 1:
        chart = tree_induction(tokens, m, params, test_mode=True)
        return chart.cells[(1, 1)]
    return tree_induction(tokens, m, params, test_mode=True).root


def pppl(corpus: list[list[int]], params: ModelParams, m: int) -> PPPLReport:
    """Pseudo-perplexity: each token is predicted from its prefix and suffix
    encoded as two complete, independent sentences (fresh charts per side);
    the root cells are the contexts."""
    per_sentence = []
    skipped = 0
    for tokens in corpus:
        n = len(tokens)
        if n < 2:
            skipped += 1
            continue
        tape = ad.Tape(dtype=params.arrays["emb"].dtype)
        bound = params.bind(tape)
        lefts, rights = [], []
        for i in range(1, n + 1):
            lc = _root_context(tokens[:i - 1], params, m)
            rc = _root_context(tokens[i:], params, m)
            lefts.append(tape.tensor(lc.e.data) if lc is not None else bound.null_ctx)
            rights.append(tape.tensor(rc.e.data) if rc is not None else bound.null_ctx)
        logprobs = predict_word_batch(bound, ad.stack(lefts, axis=0),
                                      ad.stack(rights, axis=0))
        ll = logprobs.data.astype(np.float64)[np.arange(n), tokens]
        per_sentence.append(float(ll.mean()))
    if not per_sentence:
        return PPPLReport(float("nan"), [], skipped)
    return PPPLReport(float(math.exp(-np.mean(per_sentence))), per_sentence, skipped)


# ---------------------------------------------------------------- parsing

def parse(tokens: TokenSequence | list[int], params: ModelParams, m: int,
          word_constraint: bool = False) -> BinaryTree:
    """Deterministic (noise-free) parse. With the word constraint on, split
    and merge candidates crossing word boundaries are masked out, so every
    multi-piece word surfaces as a contiguous subtree."""
    if isinstance(tokens, TokenSequence):
        ids, groups = tokens.ids, tokens.groups
    else:
        ids, groups = list(tokens), None
    if word_constraint and groups is None:
        raise ConfigError("word constraint needs word grouping information")
    chart = tree_induction(ids, m, params, test_mode=True,
                           word_groups=groups if word_constraint else None)
    return chart.tree()


def merge_word_leaves(tree: BinaryTree, groups: list[tuple[int, int]]) -> BinaryTree:
    """Collapse each word's piece span to a single leaf (word positions)."""
    span_to_word = {g: w for w, g in enumerate(groups, 1)}

    def walk(node: BinaryTree) -> BinaryTree:
        w = span_to_word.get(node.span)
        if w is not None:
            return BinaryTree((w, w), token=w)
        if node.is_leaf:
            raise AlignmentError(f"piece leaf {node.span} not aligned to a word")
        lt, rt = walk(node.left), walk(node.right)
        return BinaryTree((lt.span[0], rt.span[1]), left=lt, right=rt)

    return walk(tree)


def random_tree(n: int, rng: np.random.Generator, start: int = 1) -> BinaryTree:
    """Uniform random binary bracketing over n leaves (baseline trees)."""
    if n == 1:
        return BinaryTree((start, start), token=start)
    k = int(rng.integers(1, n))
    lt = random_tree(k, rng, start)
    rt = random_tree(n - k, rng, start + k)
    return BinaryTree((start, start + n - 1), left=lt, right=rt)
