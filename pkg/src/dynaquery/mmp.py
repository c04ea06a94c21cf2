"""Multimodal pipeline: one filtered SQL join narrows the candidates, then each
surviving record is reasoned over together with its linked images or documents.
"""

from __future__ import annotations

import enum
import fnmatch
import hashlib
import json
import logging
import os
import re
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any
from urllib.parse import urlparse

import sqlglot
from sqlglot import exp
from sqlglot.dialects.dialect import Dialect
from sqlglot.errors import SqlglotError

from . import sile
from .catalog import SchemaModel, Table, fold, render_schema_context
from .db import Database, DatabaseError
from .decision import Decider, DecisionLabel
from .modelgate import AssetPart, AssetUnavailable, Gateway, GatewayError
from .prompts import fenced_blocks, load_prompt, repair_text
from .sile import NLQuery, PrunedSchema, QueryPlan
from .sqp import (PipelineError, ResultSet, SanitizedSql, SanitizeError, SqlExecutionError,
                  execute, sanitize)

logger = logging.getLogger(__name__)

WHERE_TEMPLATE = "mmp_where.v1"
RATIONALE_TEMPLATE = "mmp_rationale.v1"

DEFAULT_PATTERNS = ("*image*", "*img*", "*photo*", "*url*", "*doc*", "*path*")
SAMPLE_SIZE = 20
IMAGE_EXTENSIONS = frozenset({".jpg", ".jpeg", ".png", ".gif", ".webp", ".bmp", ".tif",
                              ".tiff", ".svg", ".heic"})
DOCUMENT_EXTENSIONS = frozenset({".pdf", ".doc", ".docx", ".txt", ".md", ".rtf", ".odt",
                                 ".html", ".htm"})
_ROW_VALUE_DIALECTS = frozenset({"sqlite", "mysql", "postgres", "duckdb"})
_SAFE_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class MmpError(Exception):
    pass


class FragmentError(MmpError):
    pass


class JoinPathError(MmpError):
    def __init__(self, source: str, target: str):
        super().__init__(f"no foreign-key path between {source!r} and {target!r}")
        self.pair = (source, target)


class AssetKind(str, enum.Enum):
    IMAGE_URL = "image_url"
    DOCUMENT_PATH = "document_path"

    @property
    def media_kind(self) -> str:
        return "image" if self is AssetKind.IMAGE_URL else "document"


# -- identifiers -------------------------------------------------------------


def quote_ident(name: str, dialect: str) -> str:
    """Bare identifier when safe, dialect-quoted otherwise."""
    safe = (_SAFE_IDENT.match(name) is not None and name.lower() not in _RESERVED
            and (dialect != "postgres" or name == name.lower()))
    if safe:
        return name
    return exp.to_identifier(name, quoted=True).sql(dialect=dialect)


def _reserved_words() -> frozenset[str]:
    # sqlglot only ships reserved lists for some dialects; quoting is harmless elsewhere
    words: set[str] = set()
    for name in ("mysql", "duckdb", "postgres", "sqlite"):
        words |= getattr(Dialect.get_or_raise(name).generator_class, "RESERVED_KEYWORDS", set())
    return frozenset(w.lower() for w in words)


_RESERVED = _reserved_words()


def qualified(table: str, column: str, dialect: str) -> str:
    return f"{quote_ident(table, dialect)}.{quote_ident(column, dialect)}"


# -- discovery ---------------------------------------------------------------


@dataclass(frozen=True)
class MultimodalColumn:
    table: str
    column: str
    kind: AssetKind

    @property
    def qualified_name(self) -> str:
        return f"{self.table}.{self.column}"


@dataclass(frozen=True)
class MultimodalColumnSet:
    entries: tuple[MultimodalColumn, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        keys = [(fold(e.table), fold(e.column)) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise ValueError("multimodal column entries must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def to_list(self) -> list[dict[str, str]]:
        return [{"table": e.table, "column": e.column, "kind": e.kind.value}
                for e in self.entries]


def value_kind(value: Any, probe: Callable[[str], str | None] | None = None) -> AssetKind | None:
    """Classify one sampled value by file extension, optionally by a content-type probe."""
    if not isinstance(value, str) or not value.strip():
        return None
    text = value.strip()
    parsed = urlparse(text)
    path = parsed.path if parsed.scheme in ("http", "https", "file") else text
    ext = os.path.splitext(path)[1].lower()
    if ext in IMAGE_EXTENSIONS:
        return AssetKind.IMAGE_URL
    if ext in DOCUMENT_EXTENSIONS:
        return AssetKind.DOCUMENT_PATH
    if probe is not None and parsed.scheme in ("http", "https"):
        ctype = (probe(text) or "").lower()
        if ctype.startswith("image/"):
            return AssetKind.IMAGE_URL
        if ctype in ("application/pdf", "text/plain", "text/html"):
            return AssetKind.DOCUMENT_PATH
    return None


def _name_matches(column: str, patterns: Sequence[str]) -> bool:
    name = column.casefold()
    return any(fnmatch.fnmatchcase(name, p.casefold()) for p in patterns)


def discover_multimodal_columns(pruned: PrunedSchema, db: Database, *,
                                patterns: Sequence[str] = DEFAULT_PATTERNS,
                                sample_size: int = SAMPLE_SIZE,
                                probe: Callable[[str], str | None] | None = None
                                ) -> MultimodalColumnSet:
    """Tag a column only if its name matches a pattern and most sampled values agree on a kind."""
    if not pruned.schema.tables:
        raise MmpError("pruned schema is empty")
    if not 1 <= sample_size <= SAMPLE_SIZE:
        raise ValueError(f"sample_size must be in 1..{SAMPLE_SIZE}")
    entries: list[MultimodalColumn] = []
    for table in pruned.schema.tables:
        for col in table.columns:
            if not _name_matches(col.name, patterns):
                continue
            c = qualified(table.name, col.name, db.dialect)
            sql = (f"SELECT {c} FROM {quote_ident(table.name, db.dialect)} "
                   f"WHERE {c} IS NOT NULL LIMIT {sample_size}")
            try:
                values = [r[0] for r in db.execute(sql).rows]
            except DatabaseError as exc:
                raise MmpError(f"sampling {table.name}.{col.name} failed: {exc}") from exc
            if not values:
                continue
            votes: dict[AssetKind, int] = {}
            for v in values:
                k = value_kind(v, probe)
                if k is not None:
                    votes[k] = votes.get(k, 0) + 1
            for kind in AssetKind:
                if votes.get(kind, 0) * 2 > len(values):
                    entries.append(MultimodalColumn(table.name, col.name, kind))
                    break
    return MultimodalColumnSet(tuple(entries))


# -- fragments ---------------------------------------------------------------


class FragmentRole(str, enum.Enum):
    WHERE = "where"
    JOIN = "join"
    NOT_NULL = "not_null"


@dataclass(frozen=True)
class SqlFragment:
    role: FragmentRole
    text: str = ""

    @property
    def empty(self) -> bool:
        return not self.text.strip()


def _from_clause(base_table: str, join: SqlFragment, dialect: str) -> str:
    head = f"SELECT * FROM {quote_ident(base_table, dialect)}"
    return f"{head} {join.text}" if not join.empty else head


def _resolve_fragment(text: str, pruned: PrunedSchema, join: SqlFragment,
                      dialect: str) -> str:
    """Parse a WHERE fragment in context and check every column against the pruned schema."""
    body = text.strip().rstrip(";").strip()
    body = re.sub(r"^\s*WHERE\b", "", body, flags=re.IGNORECASE).strip()
    if not body:
        return ""
    try:
        cond = sqlglot.parse_one(body, read=dialect, into=exp.Condition)
    except (SqlglotError, ValueError) as exc:
        raise FragmentError(f"fragment does not parse as a condition: {exc}") from exc
    if isinstance(cond, (exp.Select, exp.SetOperation, exp.Command)) or cond is None:
        raise FragmentError("fragment must be a boolean condition, not a statement")

    schema = pruned.schema
    for column in list(cond.find_all(exp.Column)):
        if column.find_ancestor(exp.Select) is not None:
            continue  # inside a subquery: checked by the full statement parse and execution
        name = column.name
        tbl = column.table
        if tbl:
            if not schema.has_table(tbl):
                raise FragmentError(f"table {tbl!r} is not among the selected tables")
            t = schema.table(tbl)
            if t.column(name) is None:
                raise FragmentError(f"column {name!r} does not exist in table {t.name!r}")
            canonical_t, canonical_c = t.name, t.column(name).name
        else:
            owners = [t for t in schema.tables if t.column(name) is not None]
            if not owners:
                raise FragmentError(f"column {name!r} does not exist in the selected tables")
            if len(owners) > 1:
                raise FragmentError(f"column {name!r} is ambiguous; qualify it with a table name")
            canonical_t, canonical_c = owners[0].name, owners[0].column(name).name
        column.replace(exp.column(canonical_c, table=canonical_t))

    out = cond.sql(dialect=dialect)
    statement = f"{_from_clause(pruned.plan.base_table, join, dialect)} WHERE {out}"
    try:
        sqlglot.parse_one(statement, read=dialect)
    except SqlglotError as exc:
        raise FragmentError(f"fragment fails to parse in context: {exc}") from exc
    return out


def _extract_fragment_text(response: str) -> str:
    blocks = fenced_blocks(response)
    sql_blocks = [b for t, b in blocks if t in ("sql", "mysql", "sqlite", "postgres", "")]
    if sql_blocks:
        return sql_blocks[-1]
    if blocks:
        return blocks[-1][1]
    return response


def build_where_clause(query: NLQuery, pruned: PrunedSchema, plan: QueryPlan,
                       gateway: Gateway, *, dialect: str = "sqlite",
                       join: SqlFragment | None = None) -> SqlFragment:
    """One completion extracting the structured constraints only; one repair on failure."""
    join = join or build_join_clause(pruned, plan, dialect=dialect)
    system, user = load_prompt(WHERE_TEMPLATE).render(
        schema=render_schema_context(pruned.schema, "full"),
        tables=", ".join(plan.tables),
        base_table=plan.base_table,
        question=query.text,
    )
    message = user
    for attempt in range(2):
        resp = gateway.complete(gateway.request(system, [message], template_id=WHERE_TEMPLATE))
        try:
            text = _resolve_fragment(_extract_fragment_text(resp.text), pruned, join, dialect)
        except FragmentError as exc:
            if attempt:
                raise FragmentError(f"where fragment invalid after repair: {exc}") from exc
            message = repair_text(user, resp.text, str(exc))
            continue
        return SqlFragment(FragmentRole.WHERE, text)
    raise AssertionError("unreachable")


def _fk_edges(schema: SchemaModel, a: Table, b: Table):
    """Foreign keys linking a and b, in either direction, as (owner, fk) pairs."""
    for owner, other in ((a, b), (b, a)):
        for fk in owner.foreign_keys:
            if fold(fk.referenced_table) == fold(other.name):
                yield owner, fk


def build_join_clause(pruned: PrunedSchema, plan: QueryPlan, *,
                      dialect: str = "sqlite") -> SqlFragment:
    """INNER JOIN chain from the base table, each join attached through a foreign key
    to a table already in the chain. Deterministic: plan order, then catalog order."""
    schema = pruned.schema
    base = schema.table(plan.base_table)
    joined = [base]
    pending = [schema.table(t) for t in plan.join_tables]
    clauses: list[str] = []
    while pending:
        for cand in pending:
            link = next(((owner, fk) for t in joined for owner, fk in _fk_edges(schema, t, cand)),
                        None)
            if link is not None:
                break
        else:
            raise JoinPathError(base.name, pending[0].name)
        owner, fk = link
        target = schema.table(fk.referenced_table)
        on = " AND ".join(
            f"{qualified(owner.name, lc, dialect)} = {qualified(target.name, rc, dialect)}"
            for lc, rc in zip(fk.local_columns, fk.referenced_columns)
        )
        clauses.append(f"INNER JOIN {quote_ident(cand.name, dialect)} ON {on}")
        joined.append(cand)
        pending.remove(cand)
    return SqlFragment(FragmentRole.JOIN, " ".join(clauses))


def build_not_null_clause(cmulti: MultimodalColumnSet, *, dialect: str = "sqlite") -> SqlFragment:
    text = " AND ".join(f"{qualified(e.table, e.column, dialect)} IS NOT NULL" for e in cmulti)
    return SqlFragment(FragmentRole.NOT_NULL, text)


def assemble_sql(projection: str, join: SqlFragment, where: SqlFragment,
                 not_null: SqlFragment, base_table: str, dialect: str = "sqlite") -> SanitizedSql:
    sql = f"SELECT {projection} FROM {quote_ident(base_table, dialect)}"
    if not join.empty:
        sql += f" {join.text}"
    conds = []
    if not where.empty:
        conds.append(f"({where.text})" if not_null.text else where.text)
    if not not_null.empty:
        conds.append(not_null.text)
    if conds:
        sql += " WHERE " + " AND ".join(conds)
    try:
        return sanitize(sql, dialect)
    except SanitizeError as exc:
        raise MmpError(f"assembled statement rejected: {exc}") from exc


# -- candidates --------------------------------------------------------------


@dataclass(frozen=True)
class CandidateRecord:
    columns: tuple[str, ...]
    values: tuple[Any, ...]
    primary_key: tuple[Any, ...]
    asset_refs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if len(self.columns) != len(self.values):
            raise ValueError("values must align with columns")

    def render(self) -> str:
        return "\n".join(f"{c}: {'NULL' if v is None else v}"
                         for c, v in zip(self.columns, self.values))


def result_columns(pruned: PrunedSchema, plan: QueryPlan) -> list[str]:
    """Qualified names of `SELECT *` over base plus joins, in join order."""
    return [f"{t.name}.{c.name}" for t in (pruned.schema.table(n) for n in plan.tables)
            for c in t.columns]


def candidate_records(result: ResultSet, pruned: PrunedSchema, plan: QueryPlan,
                      cmulti: MultimodalColumnSet) -> list[CandidateRecord]:
    base = pruned.schema.table(plan.base_table)
    if not base.primary_key:
        raise MmpError(f"base table {base.name!r} has no primary key")
    cols = result_columns(pruned, plan)
    if len(cols) != len(result.columns):
        raise MmpError(f"candidate result has {len(result.columns)} columns, expected "
                       f"{len(cols)} from the schema")
    index = {fold(c): i for i, c in enumerate(cols)}
    pk_idx = [index[fold(f"{base.name}.{k}")] for k in base.primary_key]
    asset_idx = [(e.qualified_name, index[fold(e.qualified_name)]) for e in cmulti]
    seen: set[tuple] = set()
    out = []
    for row in result.rows:
        if row in seen:
            continue  # identical rows from one-to-many joins carry no new evidence
        seen.add(row)
        refs = tuple((name, str(row[i])) for name, i in asset_idx if row[i] is not None)
        out.append(CandidateRecord(tuple(cols), row, tuple(row[i] for i in pk_idx), refs))
    return out


# -- phase 2 -----------------------------------------------------------------


@dataclass(frozen=True)
class Rationale:
    text: str
    record_key: tuple[Any, ...]

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("rationale text must be non-empty")

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


class RecordSkipped(MmpError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


def generate_rationale(query: NLQuery, record: CandidateRecord, cmulti: MultimodalColumnSet,
                       gateway: Gateway) -> Rationale:
    if not record.asset_refs:
        raise RecordSkipped("no_assets")
    kinds = {e.qualified_name.casefold(): e.kind for e in cmulti}
    parts: list[Any] = []
    system, user = load_prompt(RATIONALE_TEMPLATE).render(question=query.text,
                                                          record=record.render())
    parts.append(user)
    for col, ref in record.asset_refs:
        kind = kinds.get(col.casefold(), AssetKind.IMAGE_URL)
        parts.append(AssetPart(ref, kind.media_kind))
    try:
        resp = gateway.complete(gateway.request(system, parts, template_id=RATIONALE_TEMPLATE))
    except AssetUnavailable as exc:
        raise RecordSkipped(exc.reason, exc.ref) from exc
    if not resp.text.strip():
        raise RecordSkipped("empty_rationale")
    return Rationale(resp.text, record.primary_key)


@dataclass(frozen=True)
class RecordOutcome:
    record: CandidateRecord
    label: DecisionLabel | None = None
    rationale: Rationale | None = None
    skipped: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "key": list(self.record.primary_key),
            "label": self.label.value if self.label else None,
            "rationale_digest": self.rationale.digest if self.rationale else None,
            "skipped": self.skipped,
        }


def _process(query: NLQuery, record: CandidateRecord, cmulti: MultimodalColumnSet,
             gateway: Gateway, decider: Decider) -> RecordOutcome:
    try:
        rationale = generate_rationale(query, record, cmulti, gateway)
    except RecordSkipped as exc:
        return RecordOutcome(record, skipped=exc.reason)
    except GatewayError as exc:
        logger.warning("rationale failed for %s: %s", record.primary_key, exc)
        return RecordOutcome(record, skipped="gateway_error")
    try:
        decision = decider(query.text, rationale.text)
    except Exception as exc:  # noqa: BLE001  per-record failures never abort the batch
        logger.warning("decision failed for %s: %s", record.primary_key, exc)
        return RecordOutcome(record, rationale=rationale, skipped="decision_error")
    label = getattr(decision, "label", decision)
    return RecordOutcome(record, DecisionLabel(label), rationale)


def _sort_key(key: tuple[Any, ...]) -> tuple:
    return tuple((0, v, "") if isinstance(v, (int, float)) and not isinstance(v, bool)
                 else (1, 0, str(v)) for v in key)


def final_query(base: Table, keys: Sequence[tuple[Any, ...]], dialect: str) -> str:
    pk = [qualified(base.name, k, dialect) for k in base.primary_key]
    lit = lambda v: exp.convert(v).sql(dialect=dialect)  # noqa: E731
    ordered = sorted(keys, key=_sort_key)
    if len(pk) == 1:
        cond = f"{pk[0]} IN ({', '.join(lit(k[0]) for k in ordered)})"
    elif dialect in _ROW_VALUE_DIALECTS:
        rows = ", ".join("(" + ", ".join(lit(v) for v in k) + ")" for k in ordered)
        cond = f"({', '.join(pk)}) IN ({rows})"
    else:
        cond = " OR ".join("(" + " AND ".join(f"{c} = {lit(v)}" for c, v in zip(pk, k)) + ")"
                           for k in ordered)
    return (f"SELECT * FROM {quote_ident(base.name, dialect)} WHERE {cond} "
            f"ORDER BY {', '.join(pk)}")


@dataclass
class MmpRun:
    result: ResultSet
    report: dict[str, Any]
    accepted: frozenset = field(default_factory=frozenset)
    recommended: frozenset = field(default_factory=frozenset)
    final_executed: bool = False

    def report_json(self) -> str:
        return json.dumps(self.report, sort_keys=True, indent=2, default=str) + "\n"


def run(query: NLQuery, schema: SchemaModel, db: Database, gateway: Gateway,
        decider: Decider, *, patterns: Sequence[str] = DEFAULT_PATTERNS,
        timeout: float | None = None,
        order: Callable[[list[CandidateRecord]], list[CandidateRecord]] | None = None,
        probe: Callable[[str], str | None] | None = None) -> MmpRun:
    """Phase 1 builds and runs the filtered join; Phase 2 reasons per candidate;
    the accepted keys select the final rows from the base table."""
    dialect = db.dialect
    report: dict[str, Any] = {"pipeline": "mm", "query": query.text}
    stage = "plan"
    try:
        p = sile.plan(query, schema, gateway)
        report["plan"] = p.to_dict()
        stage = "prune"
        pruned = sile.prune_schema(schema, p)
        report["pruned_tables"] = pruned.table_names
        stage = "discover"
        cmulti = discover_multimodal_columns(pruned, db, patterns=patterns, probe=probe)
        report["multimodal_columns"] = cmulti.to_list()
        if not len(cmulti):
            logger.warning("no multimodal columns found among %s", pruned.table_names)
        stage = "join"
        join = build_join_clause(pruned, p, dialect=dialect)
        stage = "where"
        where = build_where_clause(query, pruned, p, gateway, dialect=dialect, join=join)
        stage = "assemble"
        not_null = build_not_null_clause(cmulti, dialect=dialect)
        sql = assemble_sql("*", join, where, not_null, p.base_table, dialect)
        report["fragments"] = {"join": join.text, "where": where.text,
                               "not_null": not_null.text}
        report["assembled_sql"] = sql.text
        stage = "execute"
        cand_result = execute(sql, db, timeout=timeout)
        stage = "candidates"
        records = candidate_records(cand_result, pruned, p, cmulti)
    except (sile.PlanningError, GatewayError, SanitizeError, SqlExecutionError,
            DatabaseError, MmpError, ValueError, KeyError) as exc:
        raise PipelineError(stage, exc, report) from exc
    report["candidate_count"] = len(records)

    queue = order(list(records)) if order is not None else records
    workers = max(1, min(gateway.max_concurrency, len(queue) or 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        outcomes = list(pool.map(lambda r: _process(query, r, cmulti, gateway, decider), queue))

    accepted = frozenset(o.record.primary_key for o in outcomes
                         if o.label is DecisionLabel.ACCEPT)
    recommended = frozenset(o.record.primary_key for o in outcomes
                            if o.label is DecisionLabel.RECOMMEND) - accepted
    outcomes.sort(key=lambda o: (_sort_key(o.record.primary_key), repr(o.record.values)))
    report["records"] = [o.to_dict() for o in outcomes]
    report["skipped_count"] = sum(o.skipped is not None for o in outcomes)
    report["accepted_keys"] = [list(k) for k in sorted(accepted, key=_sort_key)]
    report["recommended_keys"] = [list(k) for k in sorted(recommended, key=_sort_key)]

    base = pruned.schema.table(p.base_table)
    if not accepted:
        report["final_sql"] = None
        report["final_keys"] = []
        cols = [c.name for c in base.columns]
        return MmpRun(ResultSet.empty(cols), report, accepted, recommended, False)

    stage = "final"
    final_sql = final_query(base, list(accepted), dialect)
    try:
        final = execute(sanitize(final_sql, dialect), db, timeout=timeout)
    except (SanitizeError, SqlExecutionError, DatabaseError) as exc:
        raise PipelineError(stage, exc, report) from exc
    pk_idx = [[c.casefold() for c in final.columns].index(k.casefold())
              for k in base.primary_key]
    report["final_sql"] = final_sql
    report["final_keys"] = [[row[i] for i in pk_idx] for row in final.rows]
    return MmpRun(final, report, accepted, recommended, True)
