"""Corpus ingestion: vocabulary, word-piece tokenization, bracketed trees,
CoNLL dependencies, length-capped batching.

File formats:
  vocab   one token per line, id = line number; must contain the special
          tokens [SUM] [CLS] [MASK] [UNK] exactly once each
  corpus  UTF-8, one sentence per line, whitespace-tokenized words
  trees   PTB-style brackets, one per line
  deps    tab-separated blocks (token index, form, head index, relation),
          blank line between sentences; 10-column CoNLL-X files are accepted
          by picking the standard columns
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

log = logging.getLogger("chartlm")

SPECIALS = ("[SUM]", "[CLS]", "[MASK]", "[UNK]")
CONTINUATION = "##"
PUNCT_TAGS = {".", ",", ":", "``", "''", "-LRB-", "-RRB-", "-NONE-"}


class DataError(Exception):
    pass


class Vocab:
    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("duplicate tokens in vocabulary")
        for s in SPECIALS:
            if s not in self.index:
                raise DataError(f"vocabulary missing special token {s}")
        self.unk = self.index["[UNK]"]

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok: str):
        return tok in self.index

    @staticmethod
    def load(path: str) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return Vocab([line.rstrip("\n") for line in f if line.rstrip("\n")])

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @staticmethod
    def build(lines: list[str], min_freq: int = 1, max_size: int | None = None) -> "Vocab":
        """Frequency vocabulary over whole words, plus a character piece
        inventory (`c`, `##c`) so rare words still tokenize."""
        from collections import Counter
        words = Counter()
        chars = set()
        for line in lines:
            for w in line.split():
                words[w] += 1
                chars.update(w)
        kept = [w for w, c in words.most_common() if c >= min_freq]
        if max_size is not None:
            kept = kept[:max_size]
        pieces = sorted(chars) + [CONTINUATION + c for c in sorted(chars)]
        seen = set(SPECIALS)
        out = list(SPECIALS)
        for t in kept + pieces:
            if t not in seen:
                seen.add(t)
                out.append(t)
        return Vocab(out)


@dataclass
class TokenSequence:
    ids: list[int]
    pieces: list[str]
    groups: list[tuple[int, int]]  # 1-based piece ranges, one per word
    words: list[str]

    def __len__(self):
        return len(self.ids)

    def detokenize(self) -> list[str]:
        out = []
        for s, e in self.groups:
            out.append("".join(p[len(CONTINUATION):] if p.startswith(CONTINUATION) else p
                               for p in self.pieces[s - 1:e]))
        return out


def wordpiece_tokenize(text: str | list[str], vocab: Vocab) -> TokenSequence:
    """Greedy longest-match-first segmentation, one word at a time.
    A word with no matching decomposition becomes a single [UNK] group."""
    words = text.split() if isinstance(text, str) else list(text)
    ids, pieces, groups = [], [], []
    for w in words:
        segs = _split_word(w, vocab)
        start = len(pieces) + 1
        if segs is None:
            pieces.append("[UNK]")
            ids.append(vocab.unk)
        else:
            pieces.extend(segs)
            ids.extend(vocab.index[p] for p in segs)
        groups.append((start, len(pieces)))
    return TokenSequence(ids, pieces, groups, words)


def _split_word(w: str, vocab: Vocab) -> list[str] | None:
    segs = []
    pos = 0
    while pos < len(w):
        prefix = CONTINUATION if pos > 0 else ""
        end = len(w)
        while end > pos:
            cand = prefix + w[pos:end]
            if cand in vocab:
                segs.append(cand)
                break
            end -= 1
        else:
            return None
        pos = end
    return segs


# ---------------------------------------------------------------- trees

@dataclass
class Tree:
    label: str
    children: list["Tree"] = field(default_factory=list)
    word: str | None = None

    @property
    def is_leaf(self):
        return self.word is not None

    def leaves(self) -> list[str]:
        if self.is_leaf:
            return [self.word]
        out = []
        for c in self.children:
            out.extend(c.leaves())
        return out

    def to_string(self) -> str:
        if self.is_leaf:
            return f"({self.label} {self.word})" if self.label else self.word
        inner = " ".join(c.to_string() for c in self.children)
        return f"({self.label} {inner})" if self.label else f"({inner})"


def parse_tree(line: str) -> Tree:
    """Parse one bracketed tree; labels are optional (bare `( ... )` output
    from the parser reads back fine)."""
    toks = line.replace("(", " ( ").replace(")", " ) ").split()
    pos = 0

    def parse() -> Tree:
        nonlocal pos
        if toks[pos] != "(":
            word = toks[pos]
            pos += 1
            return Tree(label="", word=word)
        pos += 1  # (
        label = ""
        if pos < len(toks) and toks[pos] not in ("(", ")"):
            label = toks[pos]
            pos += 1
        children = []
        while pos < len(toks) and toks[pos] != ")":
            children.append(parse())
        if pos >= len(toks):
            raise DataError("unbalanced brackets")
        pos += 1  # )
        if not children:
            # "(tok)": a bare single-token tree, e.g. one-word parser output
            if label:
                return Tree(label="", word=label)
            raise DataError("empty constituent")
        if len(children) == 1 and children[0].is_leaf and not children[0].label:
            return Tree(label=label, word=children[0].word)  # (TAG word)
        return Tree(label=label, children=children)

    if not toks:
        raise DataError("empty tree line")
    t = parse()
    if pos != len(toks):
        raise DataError("trailing material after tree")
    return t


def load_trees(path: str, strip_punct: bool = False, lowercase: bool = False) -> list[Tree]:
    out = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                log.warning("%s:%d: empty line skipped", path, ln)
                continue
            try:
                t = parse_tree(line)
            except DataError as e:
                raise DataError(f"{path}:{ln}: {e}") from None
            if strip_punct:
                t = remove_punct(t)
                if t is None:
                    log.warning("%s:%d: tree empty after punctuation removal", path, ln)
                    continue
            if lowercase:
                t = lower_tree(t)
            out.append(t)
    return out


def remove_punct(t: Tree) -> Tree | None:
    """Drop punctuation-tagged terminals; constituents emptied by the
    removal disappear (their unary remainder collapses upward)."""
    if t.is_leaf:
        return None if t.label in PUNCT_TAGS else t
    kept = [c for c in (remove_punct(c) for c in t.children) if c is not None]
    if not kept:
        return None
    if len(kept) == 1 and not kept[0].is_leaf:
        return Tree(label=t.label, children=kept[0].children)
    return Tree(label=t.label, children=kept)


def lower_tree(t: Tree) -> Tree:
    if t.is_leaf:
        return Tree(label=t.label, word=t.word.lower())
    return Tree(label=t.label, children=[lower_tree(c) for c in t.children])


def tree_to_wordpieces(t: Tree, vocab: Vocab) -> Tree:
    """Break each terminal into a non-terminal over its word pieces."""
    if t.is_leaf:
        segs = _split_word(t.word, vocab) or ["[UNK]"]
        if len(segs) == 1:
            return Tree(label=t.label, word=segs[0])
        return Tree(label=t.label, children=[Tree(label="WP", word=p) for p in segs])
    return Tree(label=t.label, children=[tree_to_wordpieces(c, vocab) for c in t.children])


# ---------------------------------------------------------------- deps

@dataclass
class DepGraph:
    tokens: list[str]
    heads: list[int]  # 1-based head per token, 0 = virtual root

    def __post_init__(self):
        n = len(self.tokens)
        if len(self.heads) != n:
            raise DataError("token/head count mismatch")
        roots = [i for i, h in enumerate(self.heads) if h == 0]
        if len(roots) != 1:
            raise DataError(f"dependency tree must have exactly one root, got {len(roots)}")
        for i, h in enumerate(self.heads):
            if not (0 <= h <= n) or h == i + 1:
                raise DataError(f"head index {h} out of range at token {i + 1}")
        # acyclicity: walking up from every token must reach the root
        for i in range(n):
            seen = set()
            j = i + 1
            while j != 0:
                if j in seen:
                    raise DataError("cycle in dependency heads")
                seen.add(j)
                j = self.heads[j - 1]
        self.children = [[] for _ in range(n + 1)]
        for i, h in enumerate(self.heads):
            self.children[h].append(i + 1)


def load_conll_deps(path: str) -> list[DepGraph]:
    graphs = []
    block: list[list[str]] = []

    def flush():
        if not block:
            return
        tokens, heads = [], []
        for cols in block:
            if len(cols) >= 8:          # CoNLL-X/U row
                form, head = cols[1], cols[6]
            elif len(cols) >= 3:        # index, form, head[, rel]
                form, head = cols[1], cols[2]
            else:
                raise DataError(f"{path}: malformed dependency row {cols}")
            tokens.append(form)
            try:
                heads.append(int(head))
            except ValueError:
                raise DataError(f"{path}: non-integer head {head!r}") from None
        graphs.append(DepGraph(tokens, heads))
        block.clear()

    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line.strip():
                flush()
                continue
            if line.startswith("#"):
                continue
            block.append(line.split("\t"))
    flush()
    return graphs


# ---------------------------------------------------------------- batching

def batch_by_length(corpus: list, batch_size: int, max_total_len: int,
                    max_sentence_len: int = 128) -> tuple[list[list], int]:
    """Sequential packing: a batch closes when the next sentence would push
    it past `batch_size` sentences or `max_total_len` total tokens. Sentences
    longer than `max_sentence_len` are dropped (count returned)."""
    batches: list[list] = []
    cur: list = []
    cur_len = 0
    dropped = 0
    for sent in corpus:
        n = len(sent)
        if n > max_sentence_len:
            dropped += 1
            continue
        if cur and (len(cur) + 1 > batch_size or cur_len + n > max_total_len):
            batches.append(cur)
            cur, cur_len = [], 0
        cur.append(sent)
        cur_len += n
    if cur:
        batches.append(cur)
    return batches, dropped
