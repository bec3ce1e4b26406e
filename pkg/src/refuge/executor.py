"""Materialize feature specs into per-row columns with point-in-time cutoffs.

For each target row the executor walks the spec's join path, collecting a
bag of rows (children accumulate bag-style, so a mean over a joined
dimension is a weighted mean), applies the optional predicate and trailing
window on the terminal table, and aggregates.

Leakage guard: for a target row with seed time t, every traversed table
that declares a time column contributes only rows with event_time < t
(strict). Rows with a null event time on such tables are excluded as well:
history that cannot be placed before t is not usable history.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from refuge.dsl import (
    AggTerm,
    Aggregation,
    ArithExpr,
    ArithOp,
    FeatureSpec,
    HopDirection,
    Predicate,
    PredicateOp,
)
from refuge.rdb import ForeignKey, RelationalDatabase, Table, TaskSpec

SECONDS_PER_DAY = 86400.0


class ExecutionError(Exception):
    """A spec could not be materialized (should not happen post-validation)."""


@dataclass
class FeatureColumn:
    """One generated column, aligned to target-table row order.

    With a row filter, cells outside the filter are left as None
    placeholders; invariants (count never null) apply to computed cells.
    """

    name: str
    values: list[Optional[float]]
    origin: FeatureSpec
    overflow_count: int = 0

    def summary(self) -> dict:
        present = [v for v in self.values if v is not None]
        return {
            "name": self.name,
            "non_null": len(present),
            "mean": (sum(present) / len(present)) if present else None,
            "min": min(present) if present else None,
            "max": max(present) if present else None,
        }


def build_join_index(db: RelationalDatabase) -> dict[ForeignKey, dict]:
    """FK value -> child row ids, for every declared FK. Null FK cells are skipped."""
    index: dict[ForeignKey, dict] = {}
    for fk in db.foreign_keys:
        child = db.table(fk.child_table)
        col = child.column_index(fk.child_column)
        by_value: dict = {}
        for i, row in enumerate(child.rows):
            key = row[col]
            if key is None:
                continue
            by_value.setdefault(key, []).append(i)
        index[fk] = by_value
    return index


class Executor:
    """Executes specs against one immutable database view, sharing join indexes."""

    def __init__(self, db: RelationalDatabase, task: TaskSpec):
        self.db = db
        self.task = task
        self._child_index: dict[ForeignKey, dict] = {}
        self._pk_index: dict[str, dict] = {}
        target = db.target
        if task.seed_time_column is not None:
            seed_idx = target.column_index(task.seed_time_column)
            self._seed_times = [row[seed_idx] for row in target.rows]
        else:
            self._seed_times = [None] * target.n_rows

    # -- index plumbing ----------------------------------------------------

    def _children_of(self, fk: ForeignKey) -> dict:
        if fk not in self._child_index:
            child = self.db.table(fk.child_table)
            col = child.column_index(fk.child_column)
            by_value: dict = {}
            for i, row in enumerate(child.rows):
                key = row[col]
                if key is None:
                    continue
                by_value.setdefault(key, []).append(i)
            self._child_index[fk] = by_value
        return self._child_index[fk]

    def _pk_of(self, table_name: str) -> dict:
        if table_name not in self._pk_index:
            table = self.db.table(table_name)
            if table.primary_key is None:
                raise ExecutionError(f"table {table_name!r} has no primary key")
            col = table.column_index(table.primary_key)
            self._pk_index[table_name] = {
                row[col]: i for i, row in enumerate(table.rows) if row[col] is not None
            }
        return self._pk_index[table_name]

    # -- traversal ---------------------------------------------------------

    def _terminal_bag(self, term: AggTerm, target_row_idx: int, seed_time) -> tuple[Table, list[int]]:
        """Walk the join path from one target row; return (terminal table, row bag)."""
        current = self.db.target
        bag = [target_row_idx]
        for hop in term.path:
            if hop.direction is HopDirection.TO_CHILDREN:
                next_table = self.db.table(hop.fk.child_table)
                key_col = current.column_index(hop.fk.parent_column)
                children = self._children_of(hop.fk)
                next_bag: list[int] = []
                for i in bag:
                    key = current.rows[i][key_col]
                    if key is None:
                        continue
                    next_bag.extend(children.get(key, ()))
            else:
                next_table = self.db.table(hop.fk.parent_table)
                key_col = current.column_index(hop.fk.child_column)
                pk = self._pk_of(hop.fk.parent_table)
                next_bag = []
                for i in bag:
                    key = current.rows[i][key_col]
                    if key is None:
                        continue
                    parent = pk.get(key)
                    if parent is not None:
                        next_bag.append(parent)
            bag = _apply_cutoff(next_table, next_bag, seed_time)
            current = next_table
        return current, bag

    def _term_value(self, term: AggTerm, target_row_idx: int, seed_time) -> Optional[float]:
        table, bag = self._terminal_bag(term, target_row_idx, seed_time)
        if term.filter is not None:
            bag = _apply_predicate(table, bag, term.filter)
        if term.window is not None:
            bag = _apply_window(table, bag, term.window.days, seed_time)
        return _aggregate(table, bag, term.agg, term.column)

    # -- public API ----------------------------------------------------------

    def execute(
        self, spec: FeatureSpec, row_filter: Optional[Iterable[int]] = None
    ) -> FeatureColumn:
        """One value per selected target row, aligned to target row order."""
        target = self.db.target
        n = target.n_rows
        if row_filter is None:
            selected: Sequence[int] = range(n)
        else:
            selected = sorted(set(row_filter))
            if selected and (selected[0] < 0 or selected[-1] >= n):
                raise ExecutionError(f"row filter index out of range for {n} target rows")

        values: list[Optional[float]] = [None] * n
        overflow = 0
        expr = spec.expr
        for i in selected:
            t = self._seed_times[i]
            if isinstance(expr, ArithExpr):
                value = _combine(
                    expr.op,
                    self._term_value(expr.left, i, t),
                    self._term_value(expr.right, i, t),
                )
            else:
                value = self._term_value(expr, i, t)
            if value is not None:
                if math.isnan(value):
                    value = None
                elif math.isinf(value):
                    overflow += 1
            values[i] = value
        return FeatureColumn(name=spec.name, values=values, origin=spec, overflow_count=overflow)

    def execute_batch(
        self, specs: Sequence[FeatureSpec], row_filter: Optional[Iterable[int]] = None
    ) -> list[FeatureColumn]:
        """Equivalent to independent execute calls; join indexes are shared."""
        frozen = None if row_filter is None else list(row_filter)
        columns = []
        for spec in specs:
            try:
                columns.append(self.execute(spec, frozen))
            except ExecutionError as exc:
                raise ExecutionError(f"spec {spec.name!r}: {exc}") from exc
        return columns


def _apply_cutoff(table: Table, bag: list[int], seed_time) -> list[int]:
    if table.time_column is None or seed_time is None:
        return bag
    col = table.column_index(table.time_column)
    rows = table.rows
    return [i for i in bag if rows[i][col] is not None and rows[i][col] < seed_time]


def _apply_predicate(table: Table, bag: list[int], pred: Predicate) -> list[int]:
    col = table.column_index(pred.column)
    rows = table.rows
    return [i for i in bag if _matches(rows[i][col], pred.op, pred.literal)]


def _matches(value, op: PredicateOp, literal) -> bool:
    if value is None:
        return False
    if op is PredicateOp.EQ:
        return value == literal
    if op is PredicateOp.NE:
        return value != literal
    if op is PredicateOp.LT:
        return value < literal
    if op is PredicateOp.LE:
        return value <= literal
    if op is PredicateOp.GT:
        return value > literal
    if op is PredicateOp.GE:
        return value >= literal
    return value in literal  # in_set


def _apply_window(table: Table, bag: list[int], days: float, seed_time) -> list[int]:
    if seed_time is None:
        return []
    if table.time_column is None:
        raise ExecutionError(f"window on table {table.name!r} without a time column")
    col = table.column_index(table.time_column)
    lower = seed_time - days * SECONDS_PER_DAY
    rows = table.rows
    return [
        i
        for i in bag
        if rows[i][col] is not None and lower <= rows[i][col] < seed_time
    ]


def _aggregate(table: Table, bag: list[int], agg: Aggregation, column: Optional[str]) -> Optional[float]:
    if agg is Aggregation.COUNT:
        return float(len(bag))
    col = table.column_index(column)
    rows = table.rows
    vals = [rows[i][col] for i in bag]
    vals = [v for v in vals if v is not None]
    if not vals:
        return None
    if agg is Aggregation.COUNT_DISTINCT:
        return float(len(set(vals)))
    if agg is Aggregation.MODE:
        counts = Counter(vals)
        return max(counts.values()) / len(vals)
    xs = [float(v) for v in vals]
    if agg is Aggregation.SUM:
        return sum(xs)
    if agg is Aggregation.MEAN:
        return sum(xs) / len(xs)
    if agg is Aggregation.MIN:
        return min(xs)
    if agg is Aggregation.MAX:
        return max(xs)
    # population std: defined for a single value (0), no n-1 null case
    mean = sum(xs) / len(xs)
    return math.sqrt(sum((x - mean) ** 2 for x in xs) / len(xs))


def _combine(op: ArithOp, left: Optional[float], right: Optional[float]) -> Optional[float]:
    if left is None or right is None:
        return None
    if op is ArithOp.ADD:
        return left + right
    if op is ArithOp.SUB:
        return left - right
    if op is ArithOp.MUL:
        return left * right
    if right == 0.0:
        return None
    return left / right


def execute(
    db: RelationalDatabase,
    task: TaskSpec,
    spec: FeatureSpec,
    row_filter: Optional[Iterable[int]] = None,
) -> FeatureColumn:
    """Single-spec convenience wrapper over Executor."""
    return Executor(db, task).execute(spec, row_filter)


def execute_batch(
    db: RelationalDatabase,
    task: TaskSpec,
    specs: Sequence[FeatureSpec],
    row_filter: Optional[Iterable[int]] = None,
) -> list[FeatureColumn]:
    return Executor(db, task).execute_batch(specs, row_filter)
