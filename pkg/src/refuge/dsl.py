"""Declarative feature language: parsing, schema validation, canonical keys.

A feature is an aggregation over a foreign-key join path rooted at the
target table, optionally filtered by a predicate and a trailing time
window, or an arithmetic combination of two such aggregations. The JSON
serialization documented in prompts/spec_grammar.txt is the single wire
format between agents and the engine; extract_specs() pulls spec arrays
out of free-form agent text.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

from refuge.rdb import (
    ColumnType,
    ForeignKey,
    NUMERIC_TYPES,
    ORDERED_TYPES,
    RelationalDatabase,
    TaskSpec,
)

MAX_PATH_HOPS = 3


class SpecParseError(Exception):
    """Malformed feature spec; the message names the offending field."""


class HopDirection(str, Enum):
    TO_CHILDREN = "to_children"
    TO_PARENT = "to_parent"


class Aggregation(str, Enum):
    COUNT = "count"
    COUNT_DISTINCT = "count_distinct"
    SUM = "sum"
    MEAN = "mean"
    MIN = "min"
    MAX = "max"
    STD = "std"
    MODE = "mode"


class PredicateOp(str, Enum):
    EQ = "eq"
    NE = "ne"
    LT = "lt"
    LE = "le"
    GT = "gt"
    GE = "ge"
    IN_SET = "in_set"


class ArithOp(str, Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"


# Aggregations that take no column; all others require one.
COLUMNLESS_AGGS = (Aggregation.COUNT,)
NUMERIC_AGGS = (
    Aggregation.SUM,
    Aggregation.MEAN,
    Aggregation.MIN,
    Aggregation.MAX,
    Aggregation.STD,
)
ORDERED_PREDICATE_OPS = (PredicateOp.LT, PredicateOp.LE, PredicateOp.GT, PredicateOp.GE)


@dataclass(frozen=True)
class JoinHop:
    """One FK traversal: parent->children fans out, child->parent looks up."""

    direction: HopDirection
    fk: ForeignKey


@dataclass(frozen=True)
class Predicate:
    """Row filter on the path's terminal table. literal is a value or a tuple for in_set."""

    column: str
    op: PredicateOp
    literal: object


@dataclass(frozen=True)
class Window:
    """Trailing window: keep terminal events in [seed_time - days*86400, seed_time)."""

    days: float


@dataclass(frozen=True)
class AggTerm:
    path: tuple[JoinHop, ...]
    agg: Aggregation
    column: Optional[str] = None
    filter: Optional[Predicate] = None
    window: Optional[Window] = None


@dataclass(frozen=True)
class ArithExpr:
    op: ArithOp
    left: AggTerm
    right: AggTerm


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    expr: Union[AggTerm, ArithExpr]

    @property
    def terms(self) -> tuple[AggTerm, ...]:
        if isinstance(self.expr, ArithExpr):
            return (self.expr.left, self.expr.right)
        return (self.expr,)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TERM_FIELDS = {"path", "agg", "column", "filter", "window"}
_HOP_FIELDS = {"direction", "fk"}
_FK_FIELDS = {"child_table", "child_column", "parent_table", "parent_column"}
_PREDICATE_FIELDS = {"column", "op", "literal"}
_WINDOW_FIELDS = {"days"}


def _reject_unknown(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise SpecParseError(f"{where}: unknown field(s) {sorted(unknown)}")


def _parse_enum(enum_cls, raw, where: str):
    try:
        return enum_cls(raw)
    except ValueError:
        valid = [e.value for e in enum_cls]
        raise SpecParseError(f"{where}: {raw!r} not one of {valid}") from None


def _parse_hop(obj, where: str) -> JoinHop:
    if not isinstance(obj, dict):
        raise SpecParseError(f"{where}: hop must be an object")
    _reject_unknown(obj, _HOP_FIELDS, where)
    if "direction" not in obj:
        raise SpecParseError(f"{where}: missing field 'direction'")
    if "fk" not in obj:
        raise SpecParseError(f"{where}: missing field 'fk'")
    direction = _parse_enum(HopDirection, obj["direction"], f"{where}.direction")
    fk_obj = obj["fk"]
    if not isinstance(fk_obj, dict):
        raise SpecParseError(f"{where}.fk: must be an object")
    _reject_unknown(fk_obj, _FK_FIELDS, f"{where}.fk")
    missing = _FK_FIELDS - set(fk_obj)
    if missing:
        raise SpecParseError(f"{where}.fk: missing field(s) {sorted(missing)}")
    for k, v in fk_obj.items():
        if not isinstance(v, str):
            raise SpecParseError(f"{where}.fk.{k}: must be a string")
    return JoinHop(direction=direction, fk=ForeignKey(**fk_obj))


def _normalize_literal(value):
    if isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def _parse_predicate(obj, where: str) -> Predicate:
    if not isinstance(obj, dict):
        raise SpecParseError(f"{where}: filter must be an object")
    _reject_unknown(obj, _PREDICATE_FIELDS, where)
    missing = _PREDICATE_FIELDS - set(obj)
    if missing:
        raise SpecParseError(f"{where}: missing field(s) {sorted(missing)}")
    op = _parse_enum(PredicateOp, obj["op"], f"{where}.op")
    column = obj["column"]
    if not isinstance(column, str) or not column:
        raise SpecParseError(f"{where}.column: must be a non-empty string")
    literal = obj["literal"]
    if op is PredicateOp.IN_SET:
        if not isinstance(literal, list) or not literal:
            raise SpecParseError(f"{where}.literal: in_set requires a non-empty array")
        literal = tuple(sorted((_normalize_literal(v) for v in literal), key=repr))
    else:
        if isinstance(literal, (list, dict)):
            raise SpecParseError(f"{where}.literal: must be a scalar for op {op.value!r}")
        literal = _normalize_literal(literal)
    return Predicate(column=column, op=op, literal=literal)


def _parse_term(obj, where: str) -> AggTerm:
    if not isinstance(obj, dict):
        raise SpecParseError(f"{where}: term must be an object")
    _reject_unknown(obj, _TERM_FIELDS, where)
    if "agg" not in obj:
        raise SpecParseError(f"{where}: missing field 'agg'")
    agg = _parse_enum(Aggregation, obj["agg"], f"{where}.agg")

    raw_path = obj.get("path", [])
    if not isinstance(raw_path, list):
        raise SpecParseError(f"{where}.path: must be an array of hops")
    path = tuple(_parse_hop(h, f"{where}.path[{i}]") for i, h in enumerate(raw_path))

    column = obj.get("column")
    if agg in COLUMNLESS_AGGS:
        if column is not None:
            raise SpecParseError(f"{where}: {agg.value} takes no column")
    else:
        if column is None:
            raise SpecParseError(f"{where}: {agg.value} requires column")
        if not isinstance(column, str) or not column:
            raise SpecParseError(f"{where}.column: must be a non-empty string")

    pred = None
    if obj.get("filter") is not None:
        pred = _parse_predicate(obj["filter"], f"{where}.filter")

    window = None
    if obj.get("window") is not None:
        wobj = obj["window"]
        if not isinstance(wobj, dict):
            raise SpecParseError(f"{where}.window: must be an object")
        _reject_unknown(wobj, _WINDOW_FIELDS, f"{where}.window")
        if "days" not in wobj:
            raise SpecParseError(f"{where}.window: missing field 'days'")
        days = wobj["days"]
        if not isinstance(days, (int, float)) or isinstance(days, bool) or days <= 0:
            raise SpecParseError(f"{where}.window.days: must be a positive number")
        window = Window(days=float(days))

    return AggTerm(path=path, agg=agg, column=column, filter=pred, window=window)


def parse_spec(serialized: Union[str, dict]) -> FeatureSpec:
    """Parse one serialized spec (JSON text or an already-decoded object).

    Unknown fields are rejected; every error message names the offending
    field.
    """
    if isinstance(serialized, str):
        try:
            obj = json.loads(serialized)
        except json.JSONDecodeError as exc:
            raise SpecParseError(f"not valid JSON: {exc}") from None
    else:
        obj = serialized
    if not isinstance(obj, dict):
        raise SpecParseError("spec must be a JSON object")

    name = obj.get("name")
    if not isinstance(name, str) or not name.strip():
        raise SpecParseError("spec: missing or empty field 'name'")
    name = name.strip()

    if "arith" in obj:
        _reject_unknown(obj, {"name", "arith"}, f"spec {name!r}")
        arith = obj["arith"]
        if not isinstance(arith, dict):
            raise SpecParseError(f"spec {name!r}.arith: must be an object")
        _reject_unknown(arith, {"op", "left", "right"}, f"spec {name!r}.arith")
        missing = {"op", "left", "right"} - set(arith)
        if missing:
            raise SpecParseError(f"spec {name!r}.arith: missing field(s) {sorted(missing)}")
        op = _parse_enum(ArithOp, arith["op"], f"spec {name!r}.arith.op")
        left = _parse_term(arith["left"], f"spec {name!r}.arith.left")
        right = _parse_term(arith["right"], f"spec {name!r}.arith.right")
        return FeatureSpec(name=name, expr=ArithExpr(op=op, left=left, right=right))

    term = _parse_term(
        {k: v for k, v in obj.items() if k != "name"}, f"spec {name!r}"
    )
    return FeatureSpec(name=name, expr=term)


# ---------------------------------------------------------------------------
# Serialization (inverse of parse_spec)
# ---------------------------------------------------------------------------


def _term_to_dict(term: AggTerm) -> dict:
    out: dict = {
        "path": [
            {
                "direction": hop.direction.value,
                "fk": {
                    "child_table": hop.fk.child_table,
                    "child_column": hop.fk.child_column,
                    "parent_table": hop.fk.parent_table,
                    "parent_column": hop.fk.parent_column,
                },
            }
            for hop in term.path
        ],
        "agg": term.agg.value,
    }
    if term.column is not None:
        out["column"] = term.column
    if term.filter is not None:
        literal = term.filter.literal
        if isinstance(literal, tuple):
            literal = list(literal)
        out["filter"] = {
            "column": term.filter.column,
            "op": term.filter.op.value,
            "literal": literal,
        }
    if term.window is not None:
        out["window"] = {"days": term.window.days}
    return out


def spec_to_dict(spec: FeatureSpec) -> dict:
    if isinstance(spec.expr, ArithExpr):
        return {
            "name": spec.name,
            "arith": {
                "op": spec.expr.op.value,
                "left": _term_to_dict(spec.expr.left),
                "right": _term_to_dict(spec.expr.right),
            },
        }
    return {"name": spec.name, **_term_to_dict(spec.expr)}


def serialize_spec(spec: FeatureSpec) -> str:
    return json.dumps(spec_to_dict(spec), sort_keys=True)


def canonical_key(spec: FeatureSpec) -> str:
    """Stable hash of a spec's semantics: name-independent, order-independent."""
    body = spec_to_dict(spec)
    body.pop("name")
    blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Validation against a schema view
# ---------------------------------------------------------------------------


def _walk_path(
    db: RelationalDatabase, path: tuple[JoinHop, ...], where: str, errors: list[str]
) -> Optional[str]:
    """Follow hops from the target table; return the terminal table name or None."""
    declared = set(db.foreign_keys)
    current = db.target_table
    for i, hop in enumerate(path):
        if hop.fk not in declared:
            errors.append(f"{where}: path[{i}]: unknown relation {hop.fk}")
            return None
        if hop.direction is HopDirection.TO_CHILDREN:
            if hop.fk.parent_table != current:
                errors.append(
                    f"{where}: path[{i}]: to_children hop expects current table"
                    f" {hop.fk.parent_table!r}, at {current!r}"
                )
                return None
            current = hop.fk.child_table
        else:
            if hop.fk.child_table != current:
                errors.append(
                    f"{where}: path[{i}]: to_parent hop expects current table"
                    f" {hop.fk.child_table!r}, at {current!r}"
                )
                return None
            current = hop.fk.parent_table
    return current


def _validate_term(
    db: RelationalDatabase,
    task: Optional[TaskSpec],
    term: AggTerm,
    where: str,
    max_hops: int,
) -> list[str]:
    errors: list[str] = []
    if len(term.path) > max_hops:
        errors.append(f"{where}: path length {len(term.path)} exceeds cap {max_hops}")
    terminal = _walk_path(db, term.path, where, errors)
    if terminal is None:
        return errors
    table = db.tables[terminal]

    reserved = task.reserved_columns() if task is not None else set()

    def check_column(col: str, label: str) -> Optional[ColumnType]:
        if not table.has_column(col):
            errors.append(f"{where}: {label} {col!r} not on table {terminal!r}")
            return None
        if terminal == db.target_table and col in reserved:
            errors.append(f"{where}: {label} {col!r} is task metadata (not usable)")
            return None
        return table.column_type(col)

    if term.agg not in COLUMNLESS_AGGS:
        kind = check_column(term.column, "column")
        if kind is not None and term.agg in NUMERIC_AGGS and kind not in NUMERIC_TYPES:
            errors.append(
                f"{where}: {term.agg.value} requires a numeric column,"
                f" {term.column!r} has type {kind.value}"
            )

    if term.filter is not None:
        kind = check_column(term.filter.column, "filter column")
        if kind is not None:
            literals = (
                term.filter.literal
                if isinstance(term.filter.literal, tuple)
                else (term.filter.literal,)
            )
            for lit in literals:
                if not _literal_compatible(lit, kind):
                    errors.append(
                        f"{where}: filter literal {lit!r} incompatible with"
                        f" {kind.value} column {term.filter.column!r}"
                    )
            if term.filter.op in ORDERED_PREDICATE_OPS and kind not in ORDERED_TYPES:
                errors.append(
                    f"{where}: ordered comparison on non-ordered {kind.value}"
                    f" column {term.filter.column!r}"
                )

    if term.window is not None:
        if table.time_column is None:
            errors.append(f"{where}: window on table {terminal!r} without a time column")
        if task is not None and task.seed_time_column is None:
            errors.append(f"{where}: window requires a task seed time")
    return errors


def _literal_compatible(literal, kind: ColumnType) -> bool:
    if literal is None:
        return False
    if kind in (ColumnType.INTEGER, ColumnType.FLOAT, ColumnType.TIMESTAMP):
        return isinstance(literal, (int, float)) and not isinstance(literal, bool)
    if kind is ColumnType.BOOLEAN:
        return isinstance(literal, bool)
    return isinstance(literal, str)


def validate_spec(
    spec: FeatureSpec,
    db: RelationalDatabase,
    task: Optional[TaskSpec] = None,
    max_hops: int = MAX_PATH_HOPS,
) -> list[str]:
    """All violations of a spec against a database view (empty = valid).

    With a task, windows additionally require a seed-time column and the
    target's label/split/seed columns are rejected as aggregation or filter
    inputs (they are task metadata, and the label would leak).
    """
    errors: list[str] = []
    if isinstance(spec.expr, ArithExpr):
        errors += _validate_term(db, task, spec.expr.left, "left", max_hops)
        errors += _validate_term(db, task, spec.expr.right, "right", max_hops)
    else:
        errors += _validate_term(db, task, spec.expr, "term", max_hops)
    return errors


# ---------------------------------------------------------------------------
# Extraction from free-form agent text
# ---------------------------------------------------------------------------


def extract_specs(agent_text: str) -> tuple[list[FeatureSpec], list[str]]:
    """Pull feature specs out of prose-wrapped agent output.

    Finds the first decodable top-level JSON array in the text (code fences
    and surrounding prose are tolerated), then parses each element
    independently so one bad spec does not poison the batch. Returns
    (specs, error messages).
    """
    array = _find_first_array(agent_text)
    if array is None:
        return [], ["no JSON array of feature specs found in response"]
    specs: list[FeatureSpec] = []
    errors: list[str] = []
    for i, element in enumerate(array):
        try:
            specs.append(parse_spec(element))
        except SpecParseError as exc:
            errors.append(f"element {i}: {exc}")
    return specs, errors


def _find_first_array(text: str) -> Optional[list]:
    decoder = json.JSONDecoder()
    start = text.find("[")
    while start != -1:
        try:
            value, _ = decoder.raw_decode(text, start)
        except json.JSONDecodeError:
            value = None
        if isinstance(value, list):
            return value
        start = text.find("[", start + 1)
    return None
