"""AST-level failure analysis for incorrect predictions."""

from __future__ import annotations

import enum
import json
import re
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import sqlglot
from sqlglot import exp
from sqlglot.errors import SqlglotError
from sqlglot.optimizer.scope import Scope, traverse_scope

from .catalog import SchemaModel

STAR = "*"

_UNKNOWN_IDENT = re.compile(
    r"no such (table|column)|unknown (table|column)|doesn't exist|does not exist"
    r"|invalid (object|column) name|undefined (table|column)",
    re.IGNORECASE,
)


_ANSI = re.compile(r"\x1b\[[0-9;]*m")


class FailureCategory(str, enum.Enum):
    SCHEMA_HALLUCINATION = "SCHEMA_HALLUCINATION"
    JOIN_TABLE_MISMATCH = "JOIN_TABLE_MISMATCH"
    SELECT_COLUMN_MISMATCH = "SELECT_COLUMN_MISMATCH"
    WHERE_OR_LOGIC_ERROR = "WHERE_OR_LOGIC_ERROR"
    OTHER = "OTHER"


class ForensicsInputError(ValueError):
    """Input data is broken (unparseable gold, empty findings); not a classification."""


@dataclass(frozen=True)
class FailureFinding:
    query_id: str
    category: FailureCategory
    evidence: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.category is not FailureCategory.OTHER and not self.evidence:
            raise ValueError(f"{self.category.value} finding requires evidence")

    def to_dict(self) -> dict[str, Any]:
        return {"query_id": self.query_id, "category": self.category.value,
                "evidence": self.evidence}


# -- identifiers -------------------------------------------------------------


@dataclass(frozen=True)
class Identifiers:
    tables: frozenset[str]
    columns: frozenset[str]  # "table.column"; bare "column" where the owner is not determinable
    star: bool = False


def _parse(sql: str, dialect: str | None) -> exp.Expression:
    tree = sqlglot.parse_one(sql, read=dialect)
    if tree is None:
        raise SqlglotError("empty statement")
    return tree


def _cte_names(tree: exp.Expression) -> set[str]:
    return {c.alias_or_name.casefold() for c in tree.find_all(exp.CTE)}


def _own_columns(scope: Scope) -> list[exp.Column]:
    return [c for c in scope.columns
            if c.find_ancestor(exp.Select, exp.SetOperation) is scope.expression
            or not isinstance(scope.expression, exp.Select)]


def _select_aliases(select: exp.Expression) -> set[str]:
    if not isinstance(select, exp.Select):
        return set()
    return {e.alias.casefold() for e in select.expressions if isinstance(e, exp.Alias)}


def _resolve(column: exp.Column, scope: Scope,
             schema: SchemaModel | None) -> str | None:
    """'table.column' for base-table columns, bare name if undeterminable, None to skip."""
    name = column.name.casefold()
    qualifier = column.table
    if qualifier:
        src = scope.sources.get(qualifier) or scope.sources.get(qualifier.casefold())
        if isinstance(src, exp.Table):
            return f"{src.name.casefold()}.{name}"
        if src is None:
            return f"{qualifier.casefold()}.{name}"  # unknown qualifier is reported as written
        return None  # derived table or CTE column
    if name in _select_aliases(scope.expression):
        return None
    tables = [s for s in scope.sources.values() if isinstance(s, exp.Table)]
    if len(tables) == len(scope.sources) == 1:
        return f"{tables[0].name.casefold()}.{name}"
    if schema is not None and len(tables) == len(scope.sources):
        owners = [t for t in tables
                  if schema.has_table(t.name) and schema.table(t.name).column(name) is not None]
        if len(owners) == 1:
            return f"{owners[0].name.casefold()}.{name}"
    if len(tables) != len(scope.sources):
        return None
    return name


def extract_identifiers(sql: str, dialect: str | None = None,
                        schema: SchemaModel | None = None) -> Identifiers:
    tree = _parse(sql, dialect)
    ctes = _cte_names(tree)
    tables = frozenset(t.name.casefold() for t in tree.find_all(exp.Table)
                       if t.name and t.name.casefold() not in ctes)
    columns: set[str] = set()
    for scope in traverse_scope(tree):
        for col in _own_columns(scope):
            if isinstance(col.this, exp.Star):
                continue
            resolved = _resolve(col, scope, schema)
            if resolved is not None:
                columns.add(resolved)
    star = any(isinstance(s, exp.Star) and not isinstance(s.parent, exp.Count)
               for s in tree.find_all(exp.Star))
    star = star or any(isinstance(c.this, exp.Star) for c in tree.find_all(exp.Column))
    return Identifiers(tables, frozenset(columns), star)


def hallucinated_identifiers(ids: Identifiers, schema: SchemaModel) -> list[str]:
    missing = sorted(t for t in ids.tables if not schema.has_table(t))
    known = [schema.table(t) for t in ids.tables if schema.has_table(t)]
    for col in sorted(ids.columns):
        if "." in col:
            t, c = col.split(".", 1)
            if not schema.has_table(t) or schema.table(t).column(c) is None:
                missing.append(col)
        elif not any(t.column(col) is not None for t in known):
            missing.append(col)
    return missing


# -- normalization -----------------------------------------------------------


def _main_select(tree: exp.Expression) -> exp.Expression:
    while isinstance(tree, (exp.SetOperation, exp.Subquery, exp.Paren)):
        tree = tree.this
    return tree


def _normalized(node: exp.Expression, scope: Scope | None, schema: SchemaModel) -> exp.Expression:
    if isinstance(node, exp.Alias):
        node = node.this

    def rewrite(n: exp.Expression) -> exp.Expression:
        if isinstance(n, exp.Column) and not isinstance(n.this, exp.Star):
            resolved = _resolve(n, scope, schema) if scope is not None else None
            if resolved and "." in resolved:
                t, c = resolved.split(".", 1)
                return exp.column(c, table=t)
            return exp.column(n.name.casefold())
        if isinstance(n, exp.Identifier):
            return exp.to_identifier(n.this.casefold())
        return n

    return node.copy().transform(rewrite)


def _canon(node: exp.Expression | None) -> str:
    """Order-insensitive rendering of AND/OR chains."""
    if node is None:
        return ""
    while isinstance(node, exp.Paren):
        node = node.this
    if isinstance(node, (exp.And, exp.Or)):
        kind = type(node)
        operands: list[exp.Expression] = []
        stack = [node]
        while stack:
            cur = stack.pop()
            while isinstance(cur, exp.Paren):
                cur = cur.this
            if isinstance(cur, kind):
                stack.extend([cur.this, cur.expression])
            else:
                operands.append(cur)
        joiner = " AND " if kind is exp.And else " OR "
        return "(" + joiner.join(sorted(_canon(o) for o in operands)) + ")"
    return node.sql()


def _root_scope(tree: exp.Expression) -> Scope | None:
    main = _main_select(tree)
    for scope in traverse_scope(tree):
        if scope.expression is main:
            return scope
    return None


def _projection(tree: exp.Expression, schema: SchemaModel) -> list[str]:
    main = _main_select(tree)
    scope = _root_scope(tree)
    if not isinstance(main, exp.Select):
        return []
    return sorted(_normalized(e, scope, schema).sql() for e in main.expressions)


def _predicates(tree: exp.Expression, schema: SchemaModel) -> dict[str, str]:
    main = _main_select(tree)
    scope = _root_scope(tree)
    out = {}
    for clause in ("where", "having"):
        node = main.args.get(clause) if isinstance(main, exp.Select) else None
        out[clause] = _canon(_normalized(node.this, scope, schema)) if node is not None else ""
    return out


# -- classification ----------------------------------------------------------


def classify_failure(pred_sql: str, gold_sql: str, schema: SchemaModel, *,
                     error: str | None = None, query_id: str = "",
                     dialect: str | None = None) -> FailureFinding:
    """Assign the first matching category in precedence order."""
    try:
        gold_tree = _parse(gold_sql, dialect)
    except SqlglotError as exc:
        raise ForensicsInputError(f"gold SQL for {query_id or '?'} does not parse: {exc}") from exc

    try:
        pred_tree = _parse(pred_sql, dialect)
        if isinstance(pred_tree, exp.Command):
            raise SqlglotError("statement is not a query")
    except SqlglotError as exc:
        message = _ANSI.sub("", str(exc))
        signal = " ".join(filter(None, [error, message]))
        m = _UNKNOWN_IDENT.search(signal)
        if m:
            return FailureFinding(query_id, FailureCategory.SCHEMA_HALLUCINATION,
                                  {"unparseable": True, "error": signal[:300]})
        return FailureFinding(query_id, FailureCategory.OTHER,
                              {"unparseable": True, "error": message[:300]})

    pred_ids = extract_identifiers(pred_sql, dialect, schema)
    missing = hallucinated_identifiers(pred_ids, schema)
    if missing:
        return FailureFinding(query_id, FailureCategory.SCHEMA_HALLUCINATION,
                              {"unknown_identifiers": missing})
    if error and _UNKNOWN_IDENT.search(error):
        return FailureFinding(query_id, FailureCategory.SCHEMA_HALLUCINATION,
                              {"error": error[:300]})

    gold_ids = extract_identifiers(gold_sql, dialect, schema)
    if pred_ids.tables != gold_ids.tables:
        return FailureFinding(query_id, FailureCategory.JOIN_TABLE_MISMATCH, {
            "missing_tables": sorted(gold_ids.tables - pred_ids.tables),
            "extra_tables": sorted(pred_ids.tables - gold_ids.tables),
        })

    p_proj, g_proj = _projection(pred_tree, schema), _projection(gold_tree, schema)
    if p_proj != g_proj:
        return FailureFinding(query_id, FailureCategory.SELECT_COLUMN_MISMATCH,
                              {"predicted": p_proj, "gold": g_proj})

    p_pred, g_pred = _predicates(pred_tree, schema), _predicates(gold_tree, schema)
    diff = {k: {"predicted": p_pred[k], "gold": g_pred[k]}
            for k in ("where", "having") if p_pred[k] != g_pred[k]}
    if diff:
        return FailureFinding(query_id, FailureCategory.WHERE_OR_LOGIC_ERROR, diff)
    return FailureFinding(query_id, FailureCategory.OTHER)


def classify_report(records: Iterable[dict[str, Any]], schema: SchemaModel, *,
                    dialect: str | None = None) -> list[FailureFinding]:
    """Findings for every incorrect record of an evaluation report."""
    out = []
    for r in records:
        if r.get("correct"):
            continue
        out.append(classify_failure(r.get("predicted_sql") or "", r["gold_sql"], schema,
                                    error=r.get("error"), query_id=str(r.get("query_id", "")),
                                    dialect=dialect))
    return out


# -- reporting ---------------------------------------------------------------


_LABELS = {
    FailureCategory.SCHEMA_HALLUCINATION: "Schema hallucination",
    FailureCategory.JOIN_TABLE_MISMATCH: "Join table mismatch",
    FailureCategory.SELECT_COLUMN_MISMATCH: "Select column mismatch",
    FailureCategory.WHERE_OR_LOGIC_ERROR: "Where/logic error",
    FailureCategory.OTHER: "Other minor errors",
}


@dataclass(frozen=True)
class DistributionRow:
    category: FailureCategory
    count: int
    percentage: float


@dataclass(frozen=True)
class FailureDistribution:
    rows: tuple[DistributionRow, ...]
    total: int

    def to_dict(self) -> dict[str, Any]:
        return {"total": self.total,
                "rows": [{"category": r.category.value, "count": r.count,
                          "percentage": r.percentage} for r in self.rows]}

    def text_table(self) -> str:
        lines = [f"{'Error category':<26} {'Count':>6} {'Share':>8}"]
        for r in self.rows:
            lines.append(f"{_LABELS[r.category]:<26} {r.count:>6} {r.percentage:>7.2f}%")
        lines.append(f"{'Total failures':<26} {self.total:>6} {100.0:>7.2f}%")
        return "\n".join(lines) + "\n"


def failure_report(findings: Sequence[FailureFinding]) -> FailureDistribution:
    if not findings:
        raise ForensicsInputError("no findings to report")
    counts = Counter(f.category for f in findings)
    total = len(findings)
    rows = tuple(DistributionRow(c, counts[c], 100.0 * counts[c] / total)
                 for c in FailureCategory)
    return FailureDistribution(rows, total)


def write_findings(findings: Iterable[FailureFinding], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in findings:
            fh.write(json.dumps(f.to_dict(), sort_keys=True) + "\n")
