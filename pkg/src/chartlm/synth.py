"""Synthetic bracketing-grammar corpora with known binary gold trees.

The default grammar is a nested bracket language: phrases open and close
with one of two typed bracket pairs and wrap short filler runs. Structure is
recoverable from co-occurrence alone, which makes it a fair target for the
cloze objective, and the gold trees are binary so a perfect inducer can reach
F1 = 100.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Tree
from .prune import ConfigError


@dataclass
class Rule:
    prob: float
    rhs: tuple[str, ...]  # one terminal, or two symbols


class ToyGrammar:
    def __init__(self, rules: dict[str, list[Rule]], start: str = "S",
                 max_depth: int = 14):
        self.rules = rules
        self.start = start
        self.max_depth = max_depth
        for nt, alts in rules.items():
            total = sum(r.prob for r in alts)
            if abs(total - 1.0) > 1e-9:
                raise ConfigError(f"rule probabilities for {nt} sum to {total}, not 1")
            for r in alts:
                if len(r.rhs) not in (1, 2):
                    raise ConfigError(f"{nt}: rules must be unary-terminal or binary")
        self._min_height = self._compute_min_heights()
        if self.start not in self._min_height:
            raise ConfigError("start symbol cannot terminate")

    def is_terminal(self, sym: str) -> bool:
        return sym not in self.rules

    def _compute_min_heights(self) -> dict[str, int]:
        h = {s: 0 for alts in self.rules.values() for r in alts
             for s in r.rhs if self.is_terminal(s)}
        changed = True
        while changed:
            changed = False
            for nt, alts in self.rules.items():
                best = None
                for r in alts:
                    if all(s in h for s in r.rhs):
                        cand = 1 + max(h[s] for s in r.rhs)
                        if best is None or cand < best:
                            best = cand
                if best is not None and h.get(nt, 10 ** 9) > best:
                    h[nt] = best
                    changed = True
        return h

    def sample_tree(self, rng: np.random.Generator, sym: str | None = None,
                    depth: int = 0) -> Tree:
        sym = sym or self.start
        if self.is_terminal(sym):
            return Tree(label="", word=sym)
        budget = self.max_depth - depth
        alts = [r for r in self.rules[sym]
                if 1 + max(self._min_height[s] for s in r.rhs) <= budget]
        if not alts:
            raise ConfigError(f"{sym} cannot terminate within max depth")
        probs = np.array([r.prob for r in alts])
        probs /= probs.sum()
        rule = alts[int(rng.choice(len(alts), p=probs))]
        if len(rule.rhs) == 1:
            child = self.sample_tree(rng, rule.rhs[0], depth + 1)
            return Tree(label=sym, word=child.word) if child.is_leaf else \
                Tree(label=sym, children=[child])
        kids = [self.sample_tree(rng, s, depth + 1) for s in rule.rhs]
        return Tree(label=sym, children=kids)


def default_grammar() -> ToyGrammar:
    r = {
        "S": [Rule(0.55, ("P", "P")), Rule(0.45, ("P", "S"))],
        "P": [Rule(0.5, ("LA", "CA")), Rule(0.5, ("LB", "CB"))],
        "CA": [Rule(1.0, ("M", "RA"))],
        "CB": [Rule(1.0, ("M", "RB"))],
        "M": [Rule(0.45, ("W", "W")), Rule(0.25, ("W", "M")),
              Rule(0.15, ("P", "W")), Rule(0.15, ("W", "P"))],
        "LA": [Rule(1.0, ("<a",))],
        "RA": [Rule(1.0, ("a>",))],
        "LB": [Rule(1.0, ("<b",))],
        "RB": [Rule(1.0, ("b>",))],
        "W": [Rule(0.3, ("w1",)), Rule(0.25, ("w2",)), Rule(0.2, ("w3",)),
              Rule(0.12, ("w4",)), Rule(0.08, ("w5",)), Rule(0.05, ("w6",))],
    }
    return ToyGrammar(r)


def sample(grammar: ToyGrammar, n_sentences: int, seed: int) -> list[tuple[list[str], Tree]]:
    """Paired (tokens, gold tree) samples, deterministic per seed."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_sentences):
        tree = grammar.sample_tree(rng)
        out.append((tree.leaves(), tree))
    return out


def write_corpus(samples, corpus_path: str, trees_path: str | None = None) -> None:
    with open(corpus_path, "w", encoding="utf-8") as f:
        for tokens, _ in samples:
            f.write(" ".join(tokens) + "\n")
    if trees_path is not None:
        with open(trees_path, "w", encoding="utf-8") as f:
            for _, tree in samples:
                f.write(tree.to_string() + "\n")
