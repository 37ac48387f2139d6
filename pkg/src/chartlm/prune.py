"""Linear-time tree induction: iterative merge of locally optimal bigram
cells plus table remapping.

The table is a view over chart cells in *current* coordinates. Rows are
filled bottom-up exactly as in exhaustive CKY until span length reaches the
pruning threshold m. From then on, each step first commits one merge — the
second-row cell with the best score p * (1-p_left) * (1-p_right), restricted
to cells appearing in the recovered subtree of some m-th-row cell — then
drops every cell whose span would cross the merged pair (the index remap
i' = i>=u+1 ? i+1 : i, j' = j>=u ? j+1 : j does both the drop and the
renumbering), and finally fills the holes this opens on the m-th row. The
merged cell becomes a terminal of the new table: later compositions treat it
as one token but its accumulated subtree probability keeps participating, and
tree recovery re-expands it.

Merges continue (call-free) past the fill loop until the table has length 1,
so a length-n sentence always commits exactly n-1 structure decisions.

Boundary handling in the merge score: a missing neighbor contributes factor
one (its p is taken as zero).

``induce_batch`` drives many sentences in lockstep so that each row step
costs one pooled encoder call for the whole batch; per-sentence Gumbel
streams keep the result identical to running sentences one at a time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ad
from .chart import Chart, ChartCell, compose_specs
from .model import ModelParams, call_counter, reset_call_counter  # noqa: F401 (re-export)


class PruneError(Exception):
    pass


class ConfigError(Exception):
    pass


@dataclass
class MergeDecision:
    u: int        # 1-based index of the winning second-row cell
    score: float
    cell: ChartCell


class PrunedTable:
    """Triangular table of cell references in current coordinates."""

    def __init__(self, cells: dict[tuple[int, int], ChartCell], length: int,
                 generation: int = 1):
        self.cells = cells
        self.length = length
        self.generation = generation

    @staticmethod
    def from_chart(chart: Chart) -> "PrunedTable":
        cells = {(i, i): chart.cells[(i, i)] for i in range(1, chart.n + 1)}
        return PrunedTable(cells, chart.n)

    def second_row(self) -> list[ChartCell]:
        return [self.cells[(i, i + 1)] for i in range(1, self.length)]

    def remap(self, u: int) -> "PrunedTable":
        """Drop the row/column crossing merge point u; shrink by one."""
        new = {}
        for i in range(1, self.length):
            for j in range(i, self.length):
                i2 = i + 1 if i >= u + 1 else i
                j2 = j + 1 if j >= u else j
                cell = self.cells.get((i2, j2))
                if cell is not None:
                    new[(i, j)] = cell
        return PrunedTable(new, self.length - 1, self.generation + 1)

    def dump(self) -> list[str]:
        """Line-oriented snapshot for golden tests / debugging."""
        lines = [f"table gen={self.generation} len={self.length}"]
        for l in range(1, self.length + 1):
            row = []
            for i in range(1, self.length - l + 2):
                cell = self.cells.get((i, i + l - 1))
                row.append("." if cell is None else
                           f"{cell.span[0]}-{cell.span[1]}:{float(cell.log_p.data):.3f}")
            lines.append(f"  row {l}: " + " ".join(row))
        return lines


def _span_conflicts(span: tuple[int, int], groups: list[tuple[int, int]]) -> bool:
    """True when span partially overlaps some word's piece range."""
    a, b = span
    for ws, we in groups:
        if a <= we and ws <= b and not (a <= ws and we <= b) and not (ws <= a and b <= we):
            return True
    return False


def _subtree_candidates(table: PrunedTable, row: int) -> set[int]:
    """Indices (0-based into the second row) of second-row cells used in the
    recorded derivation of some row-`row` cell. Descent walks stored child
    references and stops at current-table terminals."""
    second = table.second_row()
    by_id = {id(c): i for i, c in enumerate(second)}
    terminals = {id(table.cells[(i, i)]) for i in range(1, table.length + 1)}
    found: set[int] = set()
    for i in range(1, table.length - row + 2):
        top = table.cells.get((i, i + row - 1))
        if top is None:
            raise PruneError(f"row {row} cell ({i},{i + row - 1}) empty at merge time")
        stack = [top]
        while stack:
            c = stack.pop()
            hit = by_id.get(id(c))
            if hit is not None:
                found.add(hit)
            if id(c) in terminals or c.left is None:
                continue
            stack.append(c.left)
            stack.append(c.right)
    return found


def find_merge(table: PrunedTable, m: int,
               word_groups: list[tuple[int, int]] | None = None) -> MergeDecision:
    """Best merge point per the candidate-filter + neighbor-damped score.

    The subtree filter can legitimately come up empty: surviving cells keep
    their recorded derivations, and after enough merges those derivations may
    bypass every current second-row cell. We then fall back to the full
    second row (and likewise when a word-boundary mask removes everything).
    """
    if table.length < 2:
        raise PruneError("nothing to merge in a table of length 1")
    second = table.second_row()
    row = min(m, table.length)
    candidates = _subtree_candidates(table, row)
    if not candidates:
        candidates = set(range(len(second)))
    if word_groups is not None:
        unmasked = {i for i in candidates
                    if not _span_conflicts(second[i].span, word_groups)}
        if not unmasked:
            unmasked = {i for i in range(len(second))
                        if not _span_conflicts(second[i].span, word_groups)}
        if not unmasked:
            raise PruneError("every second-row cell crosses a word boundary")
        candidates = unmasked
    best, best_score = None, -1.0
    for idx in sorted(candidates):
        p_left = second[idx - 1].p_val if idx - 1 >= 0 else 0.0
        p_right = second[idx + 1].p_val if idx + 1 < len(second) else 0.0
        score = second[idx].p_val * (1.0 - p_left) * (1.0 - p_right)
        if score > best_score:
            best, best_score = idx, score
    return MergeDecision(u=best + 1, score=best_score, cell=second[best])


def pruning(table: PrunedTable, m: int,
            word_groups: list[tuple[int, int]] | None = None) -> tuple[PrunedTable, MergeDecision]:
    decision = find_merge(table, m, word_groups)
    return table.remap(decision.u), decision


class _Induction:
    """Per-sentence stepper: owns the shrinking table and merge log."""

    def __init__(self, chart: Chart, m: int,
                 word_groups: list[tuple[int, int]] | None,
                 debug: list[str] | None):
        self.chart = chart
        self.m = m
        self.word_groups = word_groups
        self.debug = debug
        self.table = PrunedTable.from_chart(chart)
        self.merges: list[MergeDecision] = []

    def step_specs(self, t: int):
        """Prune if due, then list the empty cells of the clamped row as
        (span, candidate-pairs) to be composed. Valid for t in 1..n-1."""
        if t >= self.m:
            self.table, decision = pruning(self.table, self.m, self.word_groups)
            self.merges.append(decision)
            if self.debug is not None:
                self.debug.append(f"step {t}: merge u={decision.u} "
                                  f"span={decision.cell.span} score={decision.score:.6f}")
        length = min(t + 1, self.m)
        spans, specs = [], []
        for i in range(1, self.table.length - length + 2):
            j = i + length - 1
            if (i, j) in self.table.cells:
                continue
            spec = [(self.table.cells[(i, k)], self.table.cells[(k + 1, j)])
                    for k in range(i, j)]
            if self.word_groups is not None:
                ok = [pr for pr in spec
                      if not _span_conflicts(pr[0].span, self.word_groups)
                      and not _span_conflicts(pr[1].span, self.word_groups)]
                # a cell whose own span conflicts has no clean split; it is
                # never selected upward, so fall back to the full set
                spec = ok or spec
            spans.append((i, j))
            specs.append(spec)
        return spans, specs

    def place(self, span: tuple[int, int], cell: ChartCell) -> None:
        self.table.cells[span] = cell

    def finish(self) -> None:
        while self.table.length > 1:
            self.table, decision = pruning(self.table, self.m, self.word_groups)
            self.merges.append(decision)
        self.chart.merges = self.merges
        self.chart.final_table = self.table


def _validate(m: int, word_groups) -> None:
    if m < 2:
        raise ConfigError(f"pruning threshold m must be >= 2, got {m}")
    if word_groups is not None:
        for ws, we in word_groups:
            if we - ws + 1 > m:
                raise ConfigError(
                    f"word covering pieces {ws}-{we} is longer than m={m}; raise m")


def induce_batch(sentences: list[list[int]], m: int, params: ModelParams,
                 rngs: list[np.random.Generator | None], *,
                 tape: ad.Tape | None = None, bound=None,
                 drop_rng: np.random.Generator | None = None,
                 test_mode: bool = False, soft_mode: bool = False,
                 train: bool = False,
                 word_groups_per_sentence=None) -> list[Chart]:
    """Lockstep induction over a batch: one pooled composition per row step."""
    if tape is None:
        tape = ad.Tape(dtype=params.arrays["emb"].dtype)
    if bound is None:
        bound = params.bind(tape)
    states = []
    for idx, tokens in enumerate(sentences):
        wg = word_groups_per_sentence[idx] if word_groups_per_sentence else None
        _validate(m, wg)
        chart = Chart(tokens, params, rng=rngs[idx], tape=tape, bound=bound,
                      test_mode=test_mode, soft_mode=soft_mode, train=train)
        states.append(_Induction(chart, m, wg, None))
    for t in range(1, max(st.chart.n for st in states)):
        items, owners = [], []
        for st in states:
            if t > st.chart.n - 1:
                continue
            spans, specs = st.step_specs(t)
            for span, spec in zip(spans, specs):
                items.append((st.chart, spec))
                owners.append((st, span))
        cells = compose_specs(items, train=train, drop_rng=drop_rng)
        for (st, span), cell in zip(owners, cells):
            st.place(span, cell)
    for st in states:
        st.finish()
    return [st.chart for st in states]


def tree_induction(tokens: list[int], m: int, params: ModelParams,
                   rng: np.random.Generator | None = None, *,
                   test_mode: bool = False, soft_mode: bool = False,
                   train: bool = False, tape: ad.Tape | None = None, bound=None,
                   word_groups: list[tuple[int, int]] | None = None,
                   split_override: dict | None = None,
                   debug: list[str] | None = None) -> Chart:
    """Bottom-up encode of one sentence with pruning; returns the accumulated
    chart. The chart exposes the root cell over the full sentence, every cell
    ever computed (for the cloze contexts), the committed merges, and a fully
    recoverable tree over the original tokens."""
    _validate(m, word_groups)
    chart = Chart(tokens, params, rng=rng, tape=tape, bound=bound,
                  test_mode=test_mode, soft_mode=soft_mode, train=train,
                  split_override=split_override)
    state = _Induction(chart, m, word_groups, debug)
    for t in range(1, chart.n):
        spans, specs = state.step_specs(t)
        cells = chart.compose_cells(specs)
        for span, cell in zip(spans, cells):
            state.place(span, cell)
        if debug is not None:
            debug.extend(state.table.dump())
    state.finish()
    return chart
