"""Zero-shot NL-to-SQL: plan, prune, generate, sanitize, execute."""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from typing import Any

import sqlglot
from sqlglot import exp
from sqlglot.errors import SqlglotError
from sqlglot.dialects.dialect import Dialect
from sqlglot.tokens import TokenType

from . import sile
from .catalog import SchemaModel, render_schema_context
from .db import Database, DatabaseError, QueryTimeout
from .modelgate import EmptyCompletionError, Gateway, GatewayError
from .prompts import fenced_blocks, load_prompt
from .sile import NLQuery, PrunedSchema, QueryPlan

logger = logging.getLogger(__name__)

GENERATE_TEMPLATE = "sqp_generate.v1"

FORBIDDEN_VERBS = frozenset("""
    INSERT UPDATE DELETE MERGE REPLACE UPSERT CREATE ALTER DROP TRUNCATE RENAME
    GRANT REVOKE ATTACH DETACH PRAGMA SET USE CALL EXEC EXECUTE LOAD COPY VACUUM
    ANALYZE OPTIMIZE LOCK UNLOCK BEGIN START COMMIT ROLLBACK SAVEPOINT RELEASE
    REINDEX COMMENT SHOW DESCRIBE EXPLAIN HANDLER DO KILL FLUSH RESET PURGE
    INSTALL UNINSTALL SHUTDOWN PREPARE DEALLOCATE DECLARE REFRESH UNLOAD IMPORT
    EXPORT CACHE UNCACHE CHECKPOINT
""".split())
READ_HEADS = frozenset({"SELECT", "WITH"})
_HEAD_RE = re.compile(r"\b(" + "|".join(sorted(READ_HEADS | FORBIDDEN_VERBS)) + r")\b",
                      re.IGNORECASE)
_SQL_FENCE_TAGS = ("sql", "mysql", "sqlite", "postgres", "postgresql", "tsql", "")

# AST node types that write, define, or change session state.
_WRITE_NODE_NAMES = (
    "Insert", "Update", "Delete", "Merge", "Create", "Drop", "Alter", "AlterTable",
    "TruncateTable", "Command", "Grant", "Revoke", "Set", "Pragma", "Use", "Transaction",
    "Commit", "Rollback", "Copy", "LoadData", "Into", "Cache", "Uncache", "Refresh",
    "Attach", "Detach", "Analyze", "Describe", "Show", "Kill", "Declare", "Execute",
)
WRITE_NODES = tuple(getattr(exp, n) for n in _WRITE_NODE_NAMES if hasattr(exp, n))
_NODE_VERB = {
    "Insert": "INSERT", "Update": "UPDATE", "Delete": "DELETE", "Merge": "MERGE",
    "Create": "CREATE", "Drop": "DROP", "Alter": "ALTER", "AlterTable": "ALTER",
    "TruncateTable": "TRUNCATE", "Grant": "GRANT", "Revoke": "REVOKE", "Set": "SET",
    "Pragma": "PRAGMA", "Use": "USE", "Transaction": "BEGIN", "Commit": "COMMIT",
    "Rollback": "ROLLBACK", "Copy": "COPY", "LoadData": "LOAD", "Into": "INTO",
    "Cache": "CACHE", "Uncache": "UNCACHE", "Refresh": "REFRESH", "Attach": "ATTACH",
    "Detach": "DETACH", "Analyze": "ANALYZE", "Describe": "DESCRIBE", "Show": "SHOW",
    "Kill": "KILL", "Declare": "DECLARE", "Execute": "EXECUTE",
}


class SanitizeErrorKind(str, enum.Enum):
    NO_SELECT_FOUND = "NO_SELECT_FOUND"
    FORBIDDEN_STATEMENT = "FORBIDDEN_STATEMENT"
    MULTI_STATEMENT = "MULTI_STATEMENT"
    PARSE_FAILURE = "PARSE_FAILURE"


class SanitizeError(ValueError):
    def __init__(self, kind: SanitizeErrorKind, detail: str = "", verb: str | None = None):
        label = f"{kind.value}({verb})" if verb else kind.value
        super().__init__(f"{label}: {detail}" if detail else label)
        self.kind = kind
        self.verb = verb


class SqlExecutionError(Exception):
    pass


@dataclass(frozen=True)
class SanitizedSql:
    text: str
    dialect: str
    source_raw: str = ""
    tree: exp.Expression | None = field(default=None, compare=False, repr=False)

    def parsed(self) -> exp.Expression:
        if self.tree is not None:
            return self.tree
        return sqlglot.parse_one(self.text, read=self.dialect)


@dataclass(frozen=True)
class ResultSet:
    columns: tuple[str, ...]
    rows: tuple[tuple[Any, ...], ...]
    ordered: bool = False

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        n = len(self.columns)
        for r in self.rows:
            if len(r) != n:
                raise ValueError(f"row arity {len(r)} != column count {n}")

    def __len__(self) -> int:
        return len(self.rows)

    @classmethod
    def empty(cls, columns=()) -> ResultSet:
        return cls(tuple(columns), ())


# -- sanitizer -------------------------------------------------------------


def _strip_fences(raw: str) -> str:
    blocks = fenced_blocks(raw)
    if blocks:
        for tag, body in blocks:
            if tag in _SQL_FENCE_TAGS:
                return body
        return blocks[0][1]
    # unterminated or stray fences
    return re.sub(r"```[A-Za-z0-9_-]*", "", raw)


def _candidates(body: str) -> list[re.Match[str]]:
    found = list(_HEAD_RE.finditer(body))
    first = [m for m in found if _at_line_start(body, m.start())]
    return first + [m for m in found if not _at_line_start(body, m.start())]


def _at_line_start(body: str, pos: int) -> bool:
    return body[:pos].rsplit("\n", 1)[-1].strip() == ""


def _split_statements(text: str, dialect: str) -> list[str]:
    try:
        tokens = Dialect.get_or_raise(dialect or None).tokenize(text)
    except Exception:  # unterminated strings in trailing prose, odd bytes
        return [s for s in text.split(";")]
    parts: list[str] = []
    start = 0
    for tok in tokens:
        if tok.token_type == TokenType.SEMICOLON:
            parts.append(text[start: tok.start])
            start = tok.end + 1
    parts.append(text[start:])
    return parts


def _parse_one(text: str, dialect: str) -> exp.Expression | None:
    try:
        trees = [t for t in sqlglot.parse(text, read=dialect or None) if t is not None]
    except (SqlglotError, ValueError, RecursionError):
        return None
    return trees[0] if len(trees) == 1 else None


def _unwrap(tree: exp.Expression) -> exp.Expression:
    while isinstance(tree, (exp.Subquery, exp.Paren)) and tree.this is not None:
        tree = tree.this
    return tree


def _is_read_query(tree: exp.Expression) -> bool:
    tree = _unwrap(tree)
    if isinstance(tree, exp.Select):
        return True
    if isinstance(tree, exp.SetOperation):
        return _is_read_query(tree.this) and _is_read_query(tree.expression)
    return False


def write_verbs(tree: exp.Expression) -> list[str]:
    """Verbs of every write/definition node in the tree, including SELECT ... INTO."""
    verbs = []
    for node in tree.walk():
        if isinstance(node, WRITE_NODES):
            name = type(node).__name__
            if name == "Command":
                verbs.append(str(node.this).split()[0].upper() if node.this else "COMMAND")
            else:
                verbs.append(_NODE_VERB.get(name, name.upper()))
    return verbs


def sanitize(raw: str, dialect: str = "mysql") -> SanitizedSql:
    """Extract one read-only statement from model output or raise SanitizeError."""
    body = _strip_fences(raw or "")
    cands = _candidates(body)
    if not cands:
        raise SanitizeError(SanitizeErrorKind.NO_SELECT_FOUND, "no SQL statement in output")

    parse_failed = False
    unparsed_forbidden: str | None = None
    for m in cands:
        verb = m.group(1).upper()
        segments = _split_statements(body[m.start():], dialect)
        first = segments[0].strip()
        tree = _parse_one(first, dialect)
        if tree is None:
            # prose after the statement is usually a separate paragraph
            cut = re.split(r"\n[ \t]*\n", first, maxsplit=1)[0].strip()
            if cut != first:
                tree = _parse_one(cut, dialect)
                first = cut
        if tree is None:
            if verb in READ_HEADS:
                parse_failed = True
            elif unparsed_forbidden is None and _at_line_start(body, m.start()):
                unparsed_forbidden = verb
            continue

        root = _unwrap(tree)
        writes = write_verbs(tree)
        if verb in FORBIDDEN_VERBS or writes:
            if not isinstance(root, (exp.Column, exp.Alias, exp.Identifier, exp.Literal)):
                raise SanitizeError(SanitizeErrorKind.FORBIDDEN_STATEMENT,
                                    "data modification/definition is not allowed",
                                    verb=verb if verb in FORBIDDEN_VERBS else writes[0])
            continue
        if not _is_read_query(tree):
            continue
        later = [s for s in segments[1:] if _HEAD_RE.match(s.strip())]
        if later:
            raise SanitizeError(SanitizeErrorKind.MULTI_STATEMENT,
                                f"{len(later) + 1} statements in output")
        text = first.rstrip().rstrip(";").rstrip()
        return SanitizedSql(text, dialect, raw, tree)

    if unparsed_forbidden:
        raise SanitizeError(SanitizeErrorKind.FORBIDDEN_STATEMENT,
                            "data modification/definition is not allowed", verb=unparsed_forbidden)
    if parse_failed:
        raise SanitizeError(SanitizeErrorKind.PARSE_FAILURE, "SELECT statement does not parse")
    raise SanitizeError(SanitizeErrorKind.NO_SELECT_FOUND, "no read-only statement in output")


def is_ordered(tree: exp.Expression) -> bool:
    tree = _unwrap(tree)
    return bool(tree.args.get("order"))


# -- generation and execution ----------------------------------------------


def generate_sql(query: NLQuery, pruned: PrunedSchema, gateway: Gateway,
                 dialect: str = "mysql") -> str:
    if not pruned.schema.tables:
        raise ValueError("pruned schema is empty")
    prompt = load_prompt(GENERATE_TEMPLATE)
    system, user = prompt.render(dialect=dialect, question=query.text,
                                 schema=render_schema_context(pruned.schema, "full"))
    return gateway.complete(gateway.request(system, [user], template_id=GENERATE_TEMPLATE)).text


def execute(sql: SanitizedSql, db: Database, *, timeout: float | None = None) -> ResultSet:
    try:
        raw = db.execute(sql.text, timeout=timeout)
    except QueryTimeout:
        raise
    except DatabaseError as exc:
        raise SqlExecutionError(str(exc)) from exc
    return ResultSet(tuple(raw.columns), tuple(raw.rows), is_ordered(sql.parsed()))


# -- pipeline --------------------------------------------------------------


class PipelineError(Exception):
    def __init__(self, stage: str, cause: Exception, provenance: dict[str, Any] | None = None):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.provenance = provenance or {}


@dataclass
class SqpRun:
    result: ResultSet
    plan: QueryPlan
    pruned_tables: list[str]
    raw_sql: str
    sql: SanitizedSql

    def provenance(self) -> dict[str, Any]:
        return {
            "pipeline": "sql",
            "plan": self.plan.to_dict(),
            "pruned_tables": self.pruned_tables,
            "raw_sql": self.raw_sql,
            "sanitized_sql": self.sql.text,
            "row_count": len(self.result.rows),
            "ordered": self.result.ordered,
        }


def run(query: NLQuery, schema: SchemaModel, db: Database, gateway: Gateway, *,
        timeout: float | None = None) -> SqpRun:
    prov: dict[str, Any] = {"pipeline": "sql", "query": query.text}
    stage = "plan"
    try:
        p = sile.plan(query, schema, gateway)
        prov["plan"] = p.to_dict()
        stage = "prune"
        pruned = sile.prune_schema(schema, p)
        prov["pruned_tables"] = pruned.table_names
        stage = "generate"
        raw = generate_sql(query, pruned, gateway, db.dialect)
        prov["raw_sql"] = raw
        if not raw.strip():
            raise EmptyCompletionError("model returned an empty completion")
        stage = "sanitize"
        clean = sanitize(raw, db.dialect)
        prov["sanitized_sql"] = clean.text
        stage = "execute"
        result = execute(clean, db, timeout=timeout)
    except (sile.PlanningError, GatewayError, SanitizeError, SqlExecutionError,
            DatabaseError, ValueError) as exc:
        raise PipelineError(stage, exc, prov) from exc
    return SqpRun(result, p, pruned.table_names, raw, clean)
