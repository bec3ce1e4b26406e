"""Relational database model, manifest-driven loading, and schema rendering.

A database is a set of typed tables linked by primary/foreign keys, plus a
designated target table that carries the prediction task (binary label,
train/val/test split, optional seed-time column). Databases are loaded from
a JSON manifest that names one CSV file per table and declares every column
type explicitly; nothing is inferred.

Loaded databases are treated as immutable. Schema subsets (what an agent is
allowed to see) are applied by projecting a fresh database copy.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional

logger = logging.getLogger("refuge.rdb")

SPLIT_VALUES = ("train", "val", "test")


class DataError(Exception):
    """Fatal problem in a manifest, a data file, or a schema reference."""


class ColumnType(str, Enum):
    """Admissible cell types. Timestamps are stored as integer epoch seconds."""

    INTEGER = "integer"
    FLOAT = "float"
    BOOLEAN = "boolean"
    CATEGORICAL = "categorical"
    TEXT = "text"
    TIMESTAMP = "timestamp"


NUMERIC_TYPES = (ColumnType.INTEGER, ColumnType.FLOAT)
ORDERED_TYPES = (ColumnType.INTEGER, ColumnType.FLOAT, ColumnType.TIMESTAMP)

_TRUE_LITERALS = {"true", "t", "1", "yes"}
_FALSE_LITERALS = {"false", "f", "0", "no"}


def parse_timestamp(raw: str) -> int:
    """Parse an ISO-8601 string or integer seconds into epoch seconds.

    Naive datetimes are taken as UTC; a trailing 'Z' is accepted.
    """
    text = raw.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise DataError(f"cannot parse timestamp {raw!r}: {exc}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def parse_cell(raw: str, kind: ColumnType):
    """Coerce one CSV field to its declared type. Empty field means null."""
    if raw == "":
        return None
    if kind is ColumnType.INTEGER:
        try:
            return int(raw)
        except ValueError:
            raise DataError(f"not an integer: {raw!r}") from None
    if kind is ColumnType.FLOAT:
        try:
            return float(raw)
        except ValueError:
            raise DataError(f"not a float: {raw!r}") from None
    if kind is ColumnType.BOOLEAN:
        lowered = raw.strip().lower()
        if lowered in _TRUE_LITERALS:
            return True
        if lowered in _FALSE_LITERALS:
            return False
        raise DataError(f"not a boolean: {raw!r}")
    if kind is ColumnType.TIMESTAMP:
        return parse_timestamp(raw)
    return raw


def render_cell(value, kind: ColumnType) -> str:
    """Inverse of parse_cell for CSV export. Null renders as the empty field."""
    if value is None:
        return ""
    if kind is ColumnType.BOOLEAN:
        return "true" if value else "false"
    if kind is ColumnType.FLOAT:
        return repr(float(value))
    return str(value)


@dataclass(frozen=True)
class ForeignKey:
    """Directed edge: child_table.child_column references parent_table.parent_column."""

    child_table: str
    child_column: str
    parent_table: str
    parent_column: str

    def __str__(self) -> str:
        return (
            f"{self.child_table}.{self.child_column} -> "
            f"{self.parent_table}.{self.parent_column}"
        )


@dataclass
class Table:
    """One typed table: ordered columns and row-major cells (None = null)."""

    name: str
    columns: list[tuple[str, ColumnType]]
    rows: list[list]
    primary_key: Optional[str] = None
    time_column: Optional[str] = None

    def __post_init__(self):
        names = [c for c, _ in self.columns]
        if len(set(names)) != len(names):
            raise DataError(f"table {self.name!r}: duplicate column names")
        self._index = {c: i for i, (c, _) in enumerate(self.columns)}
        self._types = dict(self.columns)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def has_column(self, name: str) -> bool:
        return name in self._index

    def column_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"table {self.name!r} has no column {name!r}") from None

    def column_type(self, name: str) -> ColumnType:
        return self._types[name]

    def column_values(self, name: str) -> list:
        idx = self.column_index(name)
        return [row[idx] for row in self.rows]

    def check_shape(self) -> None:
        """Enforce row arity and primary key uniqueness."""
        width = len(self.columns)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise DataError(
                    f"table {self.name!r} row {i}: {len(row)} cells, expected {width}"
                )
        if self.primary_key is not None:
            seen = set()
            idx = self.column_index(self.primary_key)
            for i, row in enumerate(self.rows):
                key = row[idx]
                if key is None:
                    raise DataError(
                        f"table {self.name!r} row {i}: null primary key"
                    )
                if key in seen:
                    raise DataError(
                        f"table {self.name!r}: duplicate primary key {key!r}"
                    )
                seen.add(key)

    def project(self, column_names: Iterable[str]) -> "Table":
        """Copy of this table restricted to the given columns (declared order kept)."""
        keep = set(column_names)
        cols = [(c, t) for c, t in self.columns if c in keep]
        indices = [self._index[c] for c, _ in cols]
        rows = [[row[i] for i in indices] for row in self.rows]
        pk = self.primary_key if self.primary_key in keep else None
        tc = self.time_column if self.time_column in keep else None
        return Table(self.name, cols, rows, primary_key=pk, time_column=tc)


@dataclass
class TaskSpec:
    """Binary prediction task defined on the target table's rows."""

    description: str
    target_table: str
    label_column: str
    split_column: str
    seed_time_column: Optional[str] = None
    metric: str = "auroc"

    def reserved_columns(self) -> set[str]:
        """Target-table columns that are task metadata, never feature inputs."""
        cols = {self.label_column, self.split_column}
        if self.seed_time_column is not None:
            cols.add(self.seed_time_column)
        return cols


@dataclass(eq=False)
class RelationalDatabase:
    """Tables plus the FK edge set plus the designated target table."""

    tables: dict[str, Table]
    foreign_keys: list[ForeignKey]
    target_table: str

    def table(self, name: str) -> Table:
        try:
            return self.tables[name]
        except KeyError:
            raise DataError(f"unknown table {name!r}") from None

    @property
    def target(self) -> Table:
        return self.tables[self.target_table]

    def check_references(self) -> None:
        if self.target_table not in self.tables:
            raise DataError(f"target table {self.target_table!r} not loaded")
        for fk in self.foreign_keys:
            for tname, cname in (
                (fk.child_table, fk.child_column),
                (fk.parent_table, fk.parent_column),
            ):
                if tname not in self.tables:
                    raise DataError(f"foreign key {fk}: unknown table {tname!r}")
                if not self.tables[tname].has_column(cname):
                    raise DataError(f"foreign key {fk}: unknown column {cname!r}")
            parent = self.tables[fk.parent_table]
            if parent.primary_key != fk.parent_column:
                raise DataError(
                    f"foreign key {fk}: parent column is not the primary key of"
                    f" {fk.parent_table!r}"
                )
            child_kind = self.tables[fk.child_table].column_type(fk.child_column)
            parent_kind = parent.column_type(fk.parent_column)
            if child_kind != parent_kind:
                raise DataError(
                    f"foreign key {fk}: incompatible column types"
                    f" ({child_kind.value} vs {parent_kind.value})"
                )


@dataclass
class LoadReport:
    """Non-fatal findings from a load: dirty data is counted, not rejected."""

    dangling_fk_counts: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def total_dangling(self) -> int:
        return sum(self.dangling_fk_counts.values())


@dataclass
class LoadResult:
    database: RelationalDatabase
    task: TaskSpec
    report: LoadReport


def _require(mapping: Mapping, key: str, where: str):
    if key not in mapping:
        raise DataError(f"{where}: missing required field {key!r}")
    return mapping[key]


def _load_table(entry: Mapping, base_dir: Path) -> Table:
    name = _require(entry, "name", "table entry")
    where = f"table {name!r}"
    path = base_dir / _require(entry, "path", where)
    columns = []
    for col in _require(entry, "columns", where):
        cname = _require(col, "name", f"{where} column entry")
        ctype = _require(col, "type", f"{where} column {cname!r}")
        try:
            kind = ColumnType(ctype)
        except ValueError:
            raise DataError(f"{where} column {cname!r}: unknown type {ctype!r}") from None
        columns.append((cname, kind))
    if not path.exists():
        raise DataError(f"{where}: file not found: {path}")

    declared = [c for c, _ in columns]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{where}: empty file {path}") from None
        if sorted(header) != sorted(declared):
            extra = set(header) - set(declared)
            missing = set(declared) - set(header)
            detail = []
            if extra:
                detail.append(f"undeclared column(s) {sorted(extra)}")
            if missing:
                detail.append(f"missing column(s) {sorted(missing)}")
            raise DataError(f"{where}: header mismatch: {'; '.join(detail)}")
        order = [header.index(c) for c in declared]
        rows = []
        for lineno, record in enumerate(reader, start=2):
            if len(record) != len(header):
                raise DataError(
                    f"{where} line {lineno}: {len(record)} fields, expected {len(header)}"
                )
            try:
                rows.append(
                    [parse_cell(record[order[i]], columns[i][1]) for i in range(len(columns))]
                )
            except DataError as exc:
                raise DataError(f"{where} line {lineno}: {exc}") from None

    table = Table(
        name,
        columns,
        rows,
        primary_key=entry.get("primary_key"),
        time_column=entry.get("time_column"),
    )
    for special, label in ((table.primary_key, "primary_key"), (table.time_column, "time_column")):
        if special is not None and not table.has_column(special):
            raise DataError(f"{where}: {label} {special!r} is not a declared column")
    if table.time_column is not None and table.column_type(table.time_column) is not ColumnType.TIMESTAMP:
        raise DataError(f"{where}: time_column {table.time_column!r} must have type timestamp")
    table.check_shape()
    return table


def _check_task(db: RelationalDatabase, task: TaskSpec) -> None:
    target = db.table(task.target_table)
    for col, label in (
        (task.label_column, "label_column"),
        (task.split_column, "split_column"),
    ):
        if not target.has_column(col):
            raise DataError(f"task: {label} {col!r} not on target table")
    if task.seed_time_column is not None:
        if not target.has_column(task.seed_time_column):
            raise DataError(f"task: seed_time_column {task.seed_time_column!r} not on target table")
        if target.column_type(task.seed_time_column) is not ColumnType.TIMESTAMP:
            raise DataError("task: seed_time_column must have type timestamp")

    label_idx = target.column_index(task.label_column)
    split_idx = target.column_index(task.split_column)
    for i, row in enumerate(target.rows):
        split = row[split_idx]
        if split not in SPLIT_VALUES:
            raise DataError(
                f"target row {i}: split value {split!r} not in {SPLIT_VALUES}"
            )
        label = row[label_idx]
        if isinstance(label, bool):
            label = int(label)
        if label not in (0, 1):
            raise DataError(f"target row {i}: label not binary ({row[label_idx]!r})")


def _count_dangling(db: RelationalDatabase, report: LoadReport) -> None:
    for fk in db.foreign_keys:
        parent = db.table(fk.parent_table)
        parent_keys = set(v for v in parent.column_values(fk.parent_column) if v is not None)
        child = db.table(fk.child_table)
        dangling = sum(
            1
            for v in child.column_values(fk.child_column)
            if v is not None and v not in parent_keys
        )
        if dangling:
            key = str(fk)
            report.dangling_fk_counts[key] = dangling
            report.warnings.append(f"foreign key {key}: {dangling} dangling value(s)")
            logger.warning("foreign key %s: %d dangling value(s)", key, dangling)


def load_database(manifest_path) -> LoadResult:
    """Load a database plus its task from a JSON manifest.

    Primary-key duplicates, undeclared columns, and non-binary labels are
    fatal. Dangling foreign-key values are counted in the load report; joins
    treat them as matching zero parent rows.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON: {exc}") from None

    base_dir = manifest_path.parent
    tables: dict[str, Table] = {}
    for entry in _require(manifest, "tables", "manifest"):
        table = _load_table(entry, base_dir)
        if table.name in tables:
            raise DataError(f"duplicate table name {table.name!r}")
        tables[table.name] = table

    fks = [
        ForeignKey(
            child_table=_require(e, "child_table", "foreign key entry"),
            child_column=_require(e, "child_column", "foreign key entry"),
            parent_table=_require(e, "parent_table", "foreign key entry"),
            parent_column=_require(e, "parent_column", "foreign key entry"),
        )
        for e in manifest.get("foreign_keys", [])
    ]

    task_entry = _require(manifest, "task", "manifest")
    task = TaskSpec(
        description=_require(task_entry, "description", "task"),
        target_table=_require(task_entry, "target_table", "task"),
        label_column=_require(task_entry, "label_column", "task"),
        split_column=_require(task_entry, "split_column", "task"),
        seed_time_column=task_entry.get("seed_time_column"),
    )

    db = RelationalDatabase(tables=tables, foreign_keys=fks, target_table=task.target_table)
    db.check_references()
    _check_task(db, task)

    report = LoadReport()
    _count_dangling(db, report)
    return LoadResult(database=db, task=task, report=report)


def write_table_csv(table: Table, path, extra_columns: Optional[list[tuple[str, list]]] = None) -> None:
    """Serialize a table back to CSV (headers in declared order).

    extra_columns appends generated feature columns (name, float-or-null
    values aligned to row order) after the original columns.
    """
    extra = extra_columns or []
    for cname, values in extra:
        if len(values) != table.n_rows:
            raise DataError(f"extra column {cname!r}: length {len(values)} != {table.n_rows}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([c for c, _ in table.columns] + [c for c, _ in extra])
        for i, row in enumerate(table.rows):
            rendered = [render_cell(v, t) for v, (_, t) in zip(row, table.columns)]
            rendered += ["" if vals[i] is None else repr(float(vals[i])) for _, vals in extra]
            writer.writerow(rendered)


# ---------------------------------------------------------------------------
# Schema subsets
# ---------------------------------------------------------------------------


@dataclass
class SchemaSubset:
    """Retained columns per table; a table absent from the map is excluded."""

    retained: dict[str, frozenset[str]]

    @classmethod
    def full(cls, db: RelationalDatabase) -> "SchemaSubset":
        return cls({name: frozenset(c for c, _ in t.columns) for name, t in db.tables.items()})

    def to_json_dict(self) -> dict[str, list[str]]:
        return {t: sorted(cols) for t, cols in sorted(self.retained.items())}

    def __contains__(self, table_name: str) -> bool:
        return table_name in self.retained

    def keeps(self, table_name: str, column: str) -> bool:
        return table_name in self.retained and column in self.retained[table_name]


def corrected_subset(
    db: RelationalDatabase,
    task: TaskSpec,
    proposal: Mapping[str, Iterable[str]],
) -> tuple[SchemaSubset, list[str]]:
    """Repair an agent-proposed subset instead of rejecting it.

    Unknown names are dropped; the target table is always fully retained
    (schema selection governs source tables only); primary keys, time
    columns, and FK columns between retained tables are reinstated so the
    join graph and the temporal cutoff stay usable.
    """
    corrections: list[str] = []
    retained: dict[str, set[str]] = {}

    for tname, cols in proposal.items():
        if tname not in db.tables:
            corrections.append(f"dropped unknown table {tname!r}")
            continue
        table = db.tables[tname]
        kept = set()
        for c in cols:
            if table.has_column(c):
                kept.add(c)
            else:
                corrections.append(f"dropped unknown column {tname}.{c}")
        retained[tname] = kept

    target = db.target
    full_target = set(c for c, _ in target.columns)
    if retained.get(db.target_table, set()) != full_target:
        if db.target_table not in retained:
            corrections.append(f"reinstated target table {db.target_table!r}")
        else:
            corrections.append(f"reinstated all columns of target table {db.target_table!r}")
    retained[db.target_table] = full_target

    # Structural columns must survive on every retained table: the PK anchors
    # parent lookups, the time column anchors the leakage cutoff.
    for tname in retained:
        table = db.tables[tname]
        for special in (table.primary_key, table.time_column):
            if special is not None and special not in retained[tname]:
                retained[tname].add(special)
                corrections.append(f"reinstated {tname}.{special}")
    for fk in db.foreign_keys:
        if fk.child_table in retained and fk.parent_table in retained:
            if fk.child_column not in retained[fk.child_table]:
                retained[fk.child_table].add(fk.child_column)
                corrections.append(f"reinstated FK column {fk.child_table}.{fk.child_column}")

    for note in corrections:
        logger.warning("schema subset corrected: %s", note)
    return SchemaSubset({t: frozenset(c) for t, c in retained.items()}), corrections


def validate_subset(db: RelationalDatabase, task: TaskSpec, subset: SchemaSubset) -> list[str]:
    """All invariant violations of a subset against a database (empty = valid)."""
    problems = []
    for tname, cols in subset.retained.items():
        if tname not in db.tables:
            problems.append(f"unknown table {tname!r}")
            continue
        table = db.tables[tname]
        for c in cols:
            if not table.has_column(c):
                problems.append(f"unknown column {tname}.{c}")
    if db.target_table not in subset.retained:
        problems.append("target table not retained")
    else:
        for col in sorted(task.reserved_columns()):
            if col not in subset.retained[db.target_table]:
                problems.append(f"target column {col!r} not retained")
    for fk in db.foreign_keys:
        if fk.child_table in subset.retained and fk.parent_table in subset.retained:
            if fk.child_column not in subset.retained[fk.child_table]:
                problems.append(f"FK column {fk.child_table}.{fk.child_column} not retained")
            if fk.parent_column not in subset.retained[fk.parent_table]:
                problems.append(f"FK column {fk.parent_table}.{fk.parent_column} not retained")
    return problems


def apply_subset(
    db: RelationalDatabase, task: TaskSpec, subset: Optional[SchemaSubset]
) -> RelationalDatabase:
    """Project a database down to a subset (self-correcting on violations).

    Downstream modules see only retained tables/columns; mandatory target
    columns are always visible. Passing None returns the database unchanged.
    """
    if subset is None:
        return db
    if validate_subset(db, task, subset):
        proposal = {t: sorted(cols) for t, cols in subset.retained.items()}
        subset, _ = corrected_subset(db, task, proposal)

    tables = {
        tname: db.tables[tname].project(subset.retained[tname])
        for tname in subset.retained
        if tname in db.tables
    }
    fks = [
        fk
        for fk in db.foreign_keys
        if subset.keeps(fk.child_table, fk.child_column)
        and subset.keeps(fk.parent_table, fk.parent_column)
    ]
    return RelationalDatabase(tables=tables, foreign_keys=fks, target_table=db.target_table)


# ---------------------------------------------------------------------------
# Schema descriptor
# ---------------------------------------------------------------------------


def schema_descriptor(db: RelationalDatabase, subset: Optional[SchemaSubset] = None) -> str:
    """Deterministic textual rendering of the schema an agent is shown.

    Same inputs produce byte-identical output: tables are listed in name
    order, columns in declared order, FK edges sorted.
    """
    lines: list[str] = []
    table_names = sorted(db.tables)
    if subset is not None:
        for tname in subset.retained:
            if tname not in db.tables:
                raise DataError(f"subset references unknown table {tname!r}")
        table_names = [t for t in table_names if t in subset]

    shown_fks = []
    for fk in db.foreign_keys:
        if subset is None or (
            subset.keeps(fk.child_table, fk.child_column)
            and subset.keeps(fk.parent_table, fk.parent_column)
        ):
            if fk.child_table in table_names and fk.parent_table in table_names:
                shown_fks.append(fk)

    lines.append(
        f"database: {len(table_names)} table(s), {len(shown_fks)} foreign key(s);"
        f" target table: {db.target_table}"
    )
    for tname in table_names:
        table = db.tables[tname]
        tag = "  [target]" if tname == db.target_table else ""
        lines.append("")
        lines.append(f"table {tname}{tag}")
        if table.primary_key and (subset is None or subset.keeps(tname, table.primary_key)):
            lines.append(f"  primary key: {table.primary_key}")
        if table.time_column and (subset is None or subset.keeps(tname, table.time_column)):
            lines.append(f"  time column: {table.time_column}")
        lines.append("  columns:")
        for cname, ctype in table.columns:
            if subset is None or subset.keeps(tname, cname):
                lines.append(f"    - {cname}: {ctype.value}")
    lines.append("")
    lines.append("foreign keys:")
    if shown_fks:
        for fk in sorted(
            shown_fks,
            key=lambda f: (f.child_table, f.child_column, f.parent_table, f.parent_column),
        ):
            lines.append(f"  - {fk}")
    else:
        lines.append("  (none)")
    return "\n".join(lines) + "\n"
