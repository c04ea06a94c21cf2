"""Catalog introspection into an immutable schema model, plus enrichment and rendering."""

from __future__ import annotations

import enum
import logging
import threading
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import sqlalchemy as sa
import yaml
from sqlalchemy.engine import Engine

from .db import Database, DatabaseError

logger = logging.getLogger(__name__)


class SchemaError(ValueError):
    """A schema model violates one of its structural invariants."""


class IntrospectionError(Exception):
    def __init__(self, obj: str, message: str):
        super().__init__(f"introspection failed at {obj}: {message}")
        self.obj = obj


class Modality(str, enum.Enum):
    IMAGE_URL = "image_url"
    DOCUMENT_PATH = "document_path"
    NONE = "none"


def fold(name: str) -> str:
    return name.casefold()


@dataclass(frozen=True)
class Column:
    name: str
    data_type: str
    nullable: bool = True
    comment: str | None = None
    modality: Modality | None = None

    def __post_init__(self):
        if self.modality is not None and not isinstance(self.modality, Modality):
            object.__setattr__(self, "modality", Modality(self.modality))


@dataclass(frozen=True)
class ForeignKey:
    local_columns: tuple[str, ...]
    referenced_table: str
    referenced_columns: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "local_columns", tuple(self.local_columns))
        object.__setattr__(self, "referenced_columns", tuple(self.referenced_columns))
        if not self.local_columns or len(self.local_columns) != len(self.referenced_columns):
            raise SchemaError(
                f"foreign key to {self.referenced_table} has mismatched column lists "
                f"{self.local_columns} -> {self.referenced_columns}"
            )


@dataclass(frozen=True)
class Table:
    name: str
    columns: tuple[Column, ...]
    primary_key: tuple[str, ...] = ()
    foreign_keys: tuple[ForeignKey, ...] = ()
    comment: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "primary_key", tuple(self.primary_key))
        object.__setattr__(self, "foreign_keys", tuple(self.foreign_keys))
        seen: set[str] = set()
        for col in self.columns:
            key = fold(col.name)
            if key in seen:
                raise SchemaError(f"duplicate column {col.name!r} in table {self.name!r}")
            seen.add(key)

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> Column | None:
        key = fold(name)
        for col in self.columns:
            if fold(col.name) == key:
                return col
        return None


@dataclass(frozen=True)
class SchemaModel:
    database_name: str
    tables: tuple[Table, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "tables", tuple(self.tables))
        index: dict[str, Table] = {}
        for t in self.tables:
            key = fold(t.name)
            if key in index:
                raise SchemaError(f"duplicate table name {t.name!r}")
            index[key] = t
        object.__setattr__(self, "_index", index)
        for t in self.tables:
            for pk in t.primary_key:
                if t.column(pk) is None:
                    raise SchemaError(f"primary key column {t.name}.{pk} does not exist")
            for fk in t.foreign_keys:
                target = index.get(fold(fk.referenced_table))
                if target is None:
                    raise SchemaError(f"{t.name} references missing table {fk.referenced_table!r}")
                for c in fk.local_columns:
                    if t.column(c) is None:
                        raise SchemaError(f"foreign key column {t.name}.{c} does not exist")
                for c in fk.referenced_columns:
                    if target.column(c) is None:
                        raise SchemaError(
                            f"{t.name} references missing column {fk.referenced_table}.{c}"
                        )

    @property
    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def table(self, name: str) -> Table | None:
        return self._index.get(fold(name))  # type: ignore[attr-defined]

    def has_table(self, name: str) -> bool:
        return fold(name) in self._index  # type: ignore[attr-defined]

    def canonical(self, name: str) -> str:
        """Catalog spelling of a table name; raises KeyError when unknown."""
        t = self.table(name)
        if t is None:
            raise KeyError(name)
        return t.name

    def restrict(self, names: Iterable[str]) -> SchemaModel:
        """Sub-schema over ``names`` in catalog order; edges leaving the set are dropped."""
        keep = {fold(n) for n in names}
        tables = []
        for t in self.tables:
            if fold(t.name) not in keep:
                continue
            fks = tuple(fk for fk in t.foreign_keys if fold(fk.referenced_table) in keep)
            tables.append(replace(t, foreign_keys=fks))
        return SchemaModel(self.database_name, tuple(tables))

    def to_dict(self) -> dict[str, Any]:
        return {
            "database_name": self.database_name,
            "tables": [
                {
                    "name": t.name,
                    "comment": t.comment,
                    "primary_key": list(t.primary_key),
                    "columns": [
                        {
                            "name": c.name,
                            "data_type": c.data_type,
                            "nullable": c.nullable,
                            "comment": c.comment,
                            "modality": c.modality.value if c.modality else None,
                        }
                        for c in t.columns
                    ],
                    "foreign_keys": [
                        {
                            "local_columns": list(fk.local_columns),
                            "referenced_table": fk.referenced_table,
                            "referenced_columns": list(fk.referenced_columns),
                        }
                        for fk in t.foreign_keys
                    ],
                }
                for t in self.tables
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SchemaModel:
        tables = []
        for t in data.get("tables", []):
            tables.append(Table(
                name=t["name"],
                comment=t.get("comment"),
                primary_key=tuple(t.get("primary_key", ())),
                columns=tuple(
                    Column(c["name"], c.get("data_type", ""), c.get("nullable", True),
                           c.get("comment"), c.get("modality"))
                    for c in t["columns"]
                ),
                foreign_keys=tuple(
                    ForeignKey(tuple(fk["local_columns"]), fk["referenced_table"],
                               tuple(fk["referenced_columns"]))
                    for fk in t.get("foreign_keys", ())
                ),
            ))
        return cls(data.get("database_name", ""), tuple(tables))


# -- introspection ---------------------------------------------------------


class _SchemaCache:
    """Process-local cache with single-flight scans per key."""

    def __init__(self):
        self._data: dict[str, SchemaModel] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def get_or_scan(self, key: str, scan) -> SchemaModel:
        with self._guard:
            if key in self._data:
                return self._data[key]
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            if key in self._data:
                return self._data[key]
            schema = scan()
            with self._guard:
                self._data[key] = schema
            return schema

    def invalidate(self, key: str | None = None) -> None:
        with self._guard:
            if key is None:
                self._data.clear()
            else:
                self._data.pop(key, None)

    def __contains__(self, key: str) -> bool:
        return key in self._data


schema_cache = _SchemaCache()


def _cache_key(db: Database) -> str:
    # in-memory databases share a URL, so the engine identity disambiguates them
    if not db.engine.url.database or db.engine.url.database == ":memory:":
        return f"{db.url}#{id(db.engine)}"
    return db.url


def invalidate(db: Database | Engine | None = None) -> None:
    if db is None:
        schema_cache.invalidate()
        return
    if isinstance(db, Engine):
        db = Database(db, read_only=False)
    schema_cache.invalidate(_cache_key(db))


def introspect(connection: Database | Engine | str) -> SchemaModel:
    """Scan the catalog once per database and return the cached model afterwards."""
    db = connection if isinstance(connection, Database) else Database(connection, read_only=False)
    return schema_cache.get_or_scan(_cache_key(db), lambda: _scan(db))


def _scan(db: Database) -> SchemaModel:
    try:
        db.check()
    except DatabaseError as exc:
        raise IntrospectionError("connection", str(exc)) from exc
    try:
        insp = sa.inspect(db.engine)
    except sa.exc.SQLAlchemyError as exc:
        raise IntrospectionError("catalog", str(exc)) from exc

    def _call(obj: str, fn, *args, default=None):
        try:
            return fn(*args)
        except NotImplementedError:
            return default
        except sa.exc.SQLAlchemyError as exc:
            raise IntrospectionError(obj, str(exc)) from exc

    table_names = _call("table list", insp.get_table_names, default=[])
    view_names = _call("view list", insp.get_view_names, default=[])

    raw: list[dict[str, Any]] = []
    for name in table_names:
        cols = _call(f"table {name} columns", insp.get_columns, name, default=[])
        pk = _call(f"table {name} primary key", insp.get_pk_constraint, name, default={}) or {}
        fks = _call(f"table {name} foreign keys", insp.get_foreign_keys, name, default=[]) or []
        comment = _call(f"table {name} comment", insp.get_table_comment, name, default={}) or {}
        raw.append({"name": name, "columns": cols, "pk": pk.get("constrained_columns") or [],
                    "fks": fks, "comment": comment.get("text"), "view": False})
    for name in view_names:
        cols = _call(f"view {name} columns", insp.get_columns, name, default=[])
        raw.append({"name": name, "columns": cols, "pk": [], "fks": [], "comment": None,
                    "view": True})

    pk_by_table = {fold(r["name"]): r["pk"] for r in raw}
    cols_by_table = {fold(r["name"]): {fold(c["name"]) for c in r["columns"]} for r in raw}

    tables = []
    for r in raw:
        columns = tuple(
            Column(c["name"], _type_name(c.get("type")), bool(c.get("nullable", True)),
                   c.get("comment") or None)
            for c in r["columns"]
        )
        fks = []
        for fk in r["fks"]:
            target = fk.get("referred_table")
            local = list(fk.get("constrained_columns") or [])
            remote = list(fk.get("referred_columns") or [])
            if target is None or fold(target) not in cols_by_table:
                logger.warning("dropping foreign key %s -> %s: table not in catalog", r["name"], target)
                continue
            if not remote or all(x is None for x in remote):
                remote = list(pk_by_table.get(fold(target), []))
            if len(local) != len(remote) or not local:
                logger.warning("dropping malformed foreign key %s -> %s", r["name"], target)
                continue
            if not all(fold(c) in cols_by_table[fold(target)] for c in remote):
                logger.warning("dropping foreign key %s -> %s: column missing", r["name"], target)
                continue
            fks.append(ForeignKey(tuple(local), target, tuple(remote)))
        tables.append(Table(r["name"], columns, tuple(r["pk"]), tuple(fks), r["comment"]))
    return SchemaModel(db.name, tuple(tables))


def _type_name(t: Any) -> str:
    if t is None:
        return ""
    try:
        return str(t)
    except Exception:  # some dialect types cannot compile without a dialect
        return type(t).__name__.upper()


# -- enrichment ------------------------------------------------------------


@dataclass(frozen=True)
class SemanticEnrichment:
    table_descriptions: Mapping[str, str] = field(default_factory=dict)
    column_descriptions: Mapping[tuple[str, str], str] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any] | None) -> SemanticEnrichment:
        tables: dict[str, str] = {}
        columns: dict[tuple[str, str], str] = {}
        for tname, body in ((doc or {}).get("tables") or {}).items():
            body = body or {}
            if isinstance(body, str):
                tables[tname] = body
                continue
            if body.get("description"):
                tables[tname] = str(body["description"])
            for cname, desc in (body.get("columns") or {}).items():
                columns[(tname, cname)] = str(desc)
        return cls(tables, columns)


def load_enrichment(path: str | Path) -> SemanticEnrichment:
    """Read a Semantic Schema Description file (YAML or JSON, UTF-8)."""
    text = Path(path).read_text(encoding="utf-8")
    return SemanticEnrichment.from_mapping(yaml.safe_load(text))


def apply_enrichment(schema: SchemaModel, enrichment: SemanticEnrichment
                     ) -> tuple[SchemaModel, list[str]]:
    """Return ``(enriched_copy, diagnostics)``.

    Keys that do not resolve against ``schema`` are skipped and listed in the
    diagnostics; structure is never altered.
    """
    diagnostics: list[str] = []
    table_desc: dict[str, str] = {}
    for tname, desc in enrichment.table_descriptions.items():
        if schema.has_table(tname):
            table_desc[fold(tname)] = desc
        else:
            diagnostics.append(f"unknown table {tname!r}")
    col_desc: dict[tuple[str, str], str] = {}
    for (tname, cname), desc in enrichment.column_descriptions.items():
        t = schema.table(tname)
        if t is None:
            diagnostics.append(f"unknown table {tname!r} (column {cname!r})")
        elif t.column(cname) is None:
            diagnostics.append(f"unknown column {tname}.{cname}")
        else:
            col_desc[(fold(tname), fold(cname))] = desc

    tables = []
    for t in schema.tables:
        cols = tuple(
            replace(c, comment=col_desc[(fold(t.name), fold(c.name))])
            if (fold(t.name), fold(c.name)) in col_desc else c
            for c in t.columns
        )
        tables.append(replace(t, columns=cols, comment=table_desc.get(fold(t.name), t.comment)))
    return SchemaModel(schema.database_name, tuple(tables)), diagnostics


# -- rendering -------------------------------------------------------------


def render_table_block(table: Table, style: str = "full") -> str:
    pk = {fold(c) for c in table.primary_key}
    if style == "compact":
        cols = ", ".join(
            f"{c.name} {c.data_type}".rstrip() + (" PK" if fold(c.name) in pk else "")
            for c in table.columns
        )
        parts = [f"{table.name}({cols})"]
        for fk in table.foreign_keys:
            parts.append(
                f"{', '.join(fk.local_columns)} references "
                f"{fk.referenced_table}({', '.join(fk.referenced_columns)})"
            )
        return "; ".join(parts)
    if style != "full":
        raise ValueError(f"unknown render style {style!r}")

    lines = [f"Table: {table.name}"]
    if table.comment:
        lines.append(f"  Description: {table.comment}")
    lines.append("  Columns:")
    for c in table.columns:
        flags = [c.data_type] if c.data_type else []
        if not c.nullable:
            flags.append("NOT NULL")
        line = f"    - {c.name}"
        if flags:
            line += f" ({', '.join(flags)})"
        if fold(c.name) in pk:
            line += " [PK]"
        if c.comment:
            line += f" -- {c.comment}"
        lines.append(line)
    if table.primary_key:
        lines.append(f"  Primary key: {', '.join(table.primary_key)}")
    if table.foreign_keys:
        lines.append("  Foreign keys:")
        for fk in table.foreign_keys:
            lines.append(
                f"    - {table.name}({', '.join(fk.local_columns)}) references "
                f"{fk.referenced_table}({', '.join(fk.referenced_columns)})"
            )
    return "\n".join(lines)


def render_schema_context(schema: SchemaModel, style: str = "full") -> str:
    sep = "\n\n" if style == "full" else "\n"
    return sep.join(render_table_block(t, style) for t in schema.tables)
