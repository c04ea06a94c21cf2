"""Schema linking as query planning: pick base and join tables, then prune the schema."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from typing import Any

from .catalog import ForeignKey, SchemaModel, fold, render_schema_context
from .modelgate import Gateway
from .prompts import fenced_spans, load_prompt, repair_text

logger = logging.getLogger(__name__)

PLAN_TEMPLATE = "sile_plan.v1"
_PLAN_TAGS = ("plan", "json", "")


class PlanningError(Exception):
    def __init__(self, message: str, *, violations=(), outputs=()):
        super().__init__(message)
        self.violations = list(violations)
        self.outputs = list(outputs)


class PlanParseError(PlanningError):
    pass


class EmptySchemaError(PlanningError):
    pass


class PlanValidationError(PlanningError):
    pass


@dataclass(frozen=True)
class NLQuery:
    text: str
    intent_hint: str | None = None  # "structured" | "multimodal"

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("query text must be non-empty")
        if self.intent_hint not in (None, "structured", "multimodal"):
            raise ValueError(f"unknown intent hint {self.intent_hint!r}")


@dataclass(frozen=True)
class QueryPlan:
    base_table: str
    join_tables: tuple[str, ...] = ()
    reasoning: str = ""
    raw_model_output: str = ""
    template_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "join_tables", tuple(self.join_tables))

    @property
    def tables(self) -> list[str]:
        return [self.base_table, *self.join_tables]

    def to_dict(self) -> dict[str, Any]:
        return {"base_table": self.base_table, "join_tables": list(self.join_tables),
                "template_id": self.template_id}


class ViolationKind(str, enum.Enum):
    UNKNOWN_TABLE = "unknown_table"
    DUPLICATE = "duplicate"
    BASE_IN_JOINS = "base_in_joins"


@dataclass(frozen=True)
class PlanViolation:
    kind: ViolationKind
    table: str

    def __str__(self) -> str:
        return f"{self.kind.value}: {self.table}"


def validate_plan(plan: QueryPlan, schema: SchemaModel) -> list[PlanViolation]:
    out: list[PlanViolation] = []
    if not schema.has_table(plan.base_table):
        out.append(PlanViolation(ViolationKind.UNKNOWN_TABLE, plan.base_table))
    seen: set[str] = set()
    base_reported = False
    for t in plan.join_tables:
        key = fold(t)
        if key == fold(plan.base_table):
            if not base_reported:
                out.append(PlanViolation(ViolationKind.BASE_IN_JOINS, t))
                base_reported = True
            continue
        if key in seen:
            out.append(PlanViolation(ViolationKind.DUPLICATE, t))
            continue
        seen.add(key)
        if not schema.has_table(t):
            out.append(PlanViolation(ViolationKind.UNKNOWN_TABLE, t))
    if base_reported and sum(fold(t) == fold(plan.base_table) for t in plan.join_tables) > 1:
        out.append(PlanViolation(ViolationKind.DUPLICATE, plan.base_table))
    return out


def parse_plan(text: str) -> QueryPlan:
    """Read the last fenced plan block; everything before it is the reasoning trace."""
    blocks = [b for b in fenced_spans(text) if b[0] in _PLAN_TAGS]
    if not blocks:
        raise PlanParseError("no fenced plan block found", outputs=[text])
    body = blocks[-1][1]
    try:
        data = json.loads(body)
    except json.JSONDecodeError as exc:
        raise PlanParseError(f"plan block is not valid JSON: {exc.msg}", outputs=[text]) from exc
    if not isinstance(data, dict):
        raise PlanParseError("plan block must be a JSON object", outputs=[text])
    base = data.get("base_table")
    joins = data.get("join_tables", [])
    if not isinstance(base, str) or not base.strip():
        raise PlanParseError("plan is missing a base_table string", outputs=[text])
    if joins is None:
        joins = []
    if not isinstance(joins, list) or not all(isinstance(j, str) for j in joins):
        raise PlanParseError("join_tables must be a list of strings", outputs=[text])
    reasoning = text[: blocks[-1][2]].strip()
    return QueryPlan(base.strip(), tuple(j.strip() for j in joins), reasoning, text)


def normalize_plan(plan: QueryPlan, schema: SchemaModel) -> QueryPlan:
    """Canonical table spelling, joins de-duplicated and with the base removed."""
    base = schema.canonical(plan.base_table) if schema.has_table(plan.base_table) else plan.base_table
    joins: list[str] = []
    seen = {fold(base)}
    for t in plan.join_tables:
        if fold(t) in seen:
            continue
        seen.add(fold(t))
        joins.append(schema.canonical(t) if schema.has_table(t) else t)
    return QueryPlan(base, tuple(joins), plan.reasoning, plan.raw_model_output, plan.template_id)


def plan(query: NLQuery, schema: SchemaModel, gateway: Gateway) -> QueryPlan:
    """One planning completion over the full schema, with a single repair round-trip."""
    if not schema.tables:
        raise EmptySchemaError("cannot plan over an empty schema")
    prompt = load_prompt(PLAN_TEMPLATE)
    system, user = prompt.render(schema=render_schema_context(schema, "full"),
                                 question=query.text)
    outputs: list[str] = []
    message = user
    violations: list[PlanViolation] = []
    error = ""
    for _ in range(2):
        resp = gateway.complete(gateway.request(system, [message], template_id=PLAN_TEMPLATE))
        outputs.append(resp.text)
        try:
            candidate = normalize_plan(parse_plan(resp.text), schema)
        except PlanParseError as exc:
            error, violations = str(exc), []
        else:
            violations = validate_plan(candidate, schema)
            if not violations:
                return QueryPlan(candidate.base_table, candidate.join_tables,
                                 candidate.reasoning, candidate.raw_model_output, PLAN_TEMPLATE)
            error = "; ".join(
                f"table {v.table!r} does not exist in the schema"
                if v.kind is ViolationKind.UNKNOWN_TABLE else str(v)
                for v in violations
            )
        message = repair_text(user, resp.text, error)
    if violations:
        raise PlanValidationError(f"plan invalid after repair: {error}",
                                  violations=violations, outputs=outputs)
    raise PlanParseError(f"plan unparseable after repair: {error}", outputs=outputs)


@dataclass(frozen=True)
class PrunedSchema:
    """The schema restricted to a plan's tables, plus notes about what pruning cut."""

    schema: SchemaModel
    plan: QueryPlan
    dropped_foreign_keys: tuple[tuple[str, ForeignKey], ...] = ()
    bridge_candidates: tuple[str, ...] = field(default_factory=tuple)

    @property
    def table_names(self) -> list[str]:
        return self.schema.table_names


def prune_schema(schema: SchemaModel, plan: QueryPlan) -> PrunedSchema:
    violations = validate_plan(plan, schema)
    if violations:
        raise PlanValidationError("cannot prune with an unvalidated plan: "
                                  + "; ".join(map(str, violations)), violations=violations)
    keep = {fold(t) for t in plan.tables}
    pruned = schema.restrict(plan.tables)

    dropped: list[tuple[str, ForeignKey]] = []
    touches: dict[str, set[str]] = {}
    for t in schema.tables:
        for fk in t.foreign_keys:
            src, dst = fold(t.name), fold(fk.referenced_table)
            if (src in keep) == (dst in keep):
                continue
            dropped.append((t.name, fk))
            outside, inside = (dst, src) if src in keep else (src, dst)
            touches.setdefault(outside, set()).add(inside)
    bridges = tuple(
        schema.canonical(name) for name in (fold(t.name) for t in schema.tables)
        if len(touches.get(name, ())) >= 2
    )
    if bridges:
        logger.info("pruning dropped possible bridge tables %s for plan %s", bridges, plan.tables)
    return PrunedSchema(pruned, plan, tuple(dropped), bridges)
