"""Benchmark metrics and sampling: execution accuracy, VES, P/R/F1, hardness, strata."""

from __future__ import annotations

import enum
import json
import math
import operator
import random
import statistics
import time
from collections import Counter
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, TypeVar

import sqlglot
from scipy import stats
from sqlglot import exp
from sqlglot.errors import SqlglotError

from .db import Database, DatabaseError
from .sqp import ResultSet, SanitizeError, is_ordered, sanitize

T = TypeVar("T")

NUMERIC_TOLERANCE = 1e-6
VES_SCALE = 100.0
ALPHA = 0.05


class EvalError(Exception):
    pass


# -- execution match ---------------------------------------------------------


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float, Decimal)) and not isinstance(v, bool)


def _values_equal(a: Any, b: Any, tol: float) -> bool:
    if _is_number(a) and _is_number(b):
        return abs(float(a) - float(b)) <= tol
    return type(a) is type(b) and a == b


def _rows_equal(a: Sequence[Any], b: Sequence[Any], tol: float) -> bool:
    return len(a) == len(b) and all(_values_equal(x, y, tol) for x, y in zip(a, b))


def _row_key(row: Sequence[Any]) -> tuple:
    return tuple((0, float(v), "") if _is_number(v) else (1, 0.0, repr(v)) for v in row)


def execution_match(pred: ResultSet, gold: ResultSet, tol: float = NUMERIC_TOLERANCE) -> bool:
    """Positional column comparison; ordered gold needs sequence equality, else multiset."""
    if len(pred.rows) != len(gold.rows):
        return False
    if gold.ordered:
        return all(_rows_equal(p, g, tol) for p, g in zip(pred.rows, gold.rows))
    if Counter(map(_row_key, pred.rows)) == Counter(map(_row_key, gold.rows)):
        return True
    # tolerance matching: greedy over sorted rows
    remaining = sorted(gold.rows, key=_row_key)
    for row in sorted(pred.rows, key=_row_key):
        for i, g in enumerate(remaining):
            if _rows_equal(row, g, tol):
                del remaining[i]
                break
        else:
            return False
    return True


# -- records and aggregates --------------------------------------------------


@dataclass(frozen=True)
class EvalRecord:
    query_id: str
    predicted_sql: str
    gold_sql: str
    correct: bool
    difficulty: str | None = None
    pred_runtime: float | None = None
    gold_runtime: float | None = None
    error: str | None = None

    def __post_init__(self):
        has = self.pred_runtime is not None and self.gold_runtime is not None
        partial = (self.pred_runtime is None) != (self.gold_runtime is None)
        if partial or has != self.correct:
            raise ValueError("runtimes must be present exactly when the record is correct")

    @property
    def ves_term(self) -> float:
        if not self.correct:
            return 0.0
        return math.sqrt(self.gold_runtime / self.pred_runtime)


def execution_accuracy(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise EvalError("no records to score")
    return sum(r.correct for r in records) / len(records)


def valid_efficiency_score(records: Sequence[EvalRecord]) -> float:
    """Mean of sqrt(gold/pred runtime) over correct records (0 otherwise), scaled by 100."""
    if not records:
        raise EvalError("no records to score")
    return VES_SCALE * sum(r.ves_term for r in records) / len(records)


def _strata(records: Sequence[EvalRecord]) -> dict[str, list[EvalRecord]]:
    out: dict[str, list[EvalRecord]] = {}
    for r in records:
        if r.difficulty is not None:
            out.setdefault(r.difficulty, []).append(r)
    return out


@dataclass
class EvalReport:
    records: list[EvalRecord]
    ea_overall: float
    ea_by_stratum: dict[str, float]
    ves_overall: float | None = None
    ves_by_stratum: dict[str, float] | None = None

    @classmethod
    def from_records(cls, records: Sequence[EvalRecord], *, with_ves: bool = False) -> EvalReport:
        strata = _strata(records)
        ea = {k: execution_accuracy(v) for k, v in strata.items()}
        if not with_ves:
            return cls(list(records), execution_accuracy(records), ea)
        ves = {k: valid_efficiency_score(v) for k, v in strata.items()}
        return cls(list(records), execution_accuracy(records), ea,
                   valid_efficiency_score(records), ves)

    def to_dict(self) -> dict[str, Any]:
        return {
            "count": len(self.records),
            "ea_overall": self.ea_overall,
            "ea_by_stratum": self.ea_by_stratum,
            "ves_overall": self.ves_overall,
            "ves_by_stratum": self.ves_by_stratum,
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def text_table(self) -> str:
        order = [h.value for h in HardnessLabel]
        cols = [s for s in order if s in self.ea_by_stratum]
        cols += sorted(s for s in self.ea_by_stratum if s not in order)
        counts = Counter(r.difficulty for r in self.records)
        header = ["", *[c.capitalize() for c in cols], "All"]
        rows = [["Count", *[str(counts[c]) for c in cols], str(len(self.records))],
                ["EA (%)", *[f"{100 * self.ea_by_stratum[c]:.2f}" for c in cols],
                 f"{100 * self.ea_overall:.2f}"]]
        if self.ves_overall is not None:
            rows.append(["VES", *[f"{self.ves_by_stratum[c]:.2f}" for c in cols],
                         f"{self.ves_overall:.2f}"])
        widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
        return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(r, widths))
                         for r in [header, *rows]) + "\n"


# -- running a benchmark -----------------------------------------------------


@dataclass(frozen=True)
class GoldEntry:
    query_id: str
    sql: str
    difficulty: str | None = None
    gold_tables: tuple[str, ...] | None = None


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise EvalError(f"{path}:{n}: invalid JSON: {exc.msg}") from exc
    return out


def read_gold(path: str | Path) -> list[GoldEntry]:
    entries = []
    for obj in read_jsonl(path):
        tables = obj.get("gold_tables")
        entries.append(GoldEntry(str(obj["query_id"]), obj["sql"], obj.get("difficulty"),
                                 tuple(tables) if tables is not None else None))
    return entries


def read_predictions(path: str | Path) -> dict[str, str]:
    return {str(o["query_id"]): o["sql"] for o in read_jsonl(path)}


@dataclass(frozen=True)
class TimingConfig:
    repeats: int = 5
    warmup: int = 1
    aggregator: Callable[[Sequence[float]], float] = statistics.median


def _ordered(sql: str, dialect: str) -> bool:
    try:
        return is_ordered(sqlglot.parse_one(sql, read=dialect))
    except SqlglotError:
        return False


def _run(db: Database, sql: str, ordered: bool) -> ResultSet:
    raw = db.execute(sql)
    return ResultSet(raw.columns, raw.rows, ordered)


def measure_runtimes(db: Database, pred_sql: str, gold_sql: str,
                     timing: TimingConfig = TimingConfig(),
                     clock: Callable[[], float] = time.perf_counter) -> tuple[float, float]:
    """Interleaved warm timings of both queries on one connection; aggregated per query.
    Re-measures once if an aggregate comes out non-positive."""
    with db.session() as run:
        for _ in range(2):
            for _ in range(timing.warmup):
                run(gold_sql)
                run(pred_sql)
            gold_t, pred_t = [], []
            for i in range(timing.repeats):
                # alternate which query runs first so neither always inherits the warmer state
                pair = ((gold_t, gold_sql), (pred_t, pred_sql))
                for bucket, sql in (pair if i % 2 == 0 else pair[::-1]):
                    t0 = clock()
                    run(sql)
                    bucket.append(clock() - t0)
            g, p = timing.aggregator(gold_t), timing.aggregator(pred_t)
            if g > 0 and p > 0:
                return p, g
    raise EvalError(f"non-positive runtime measured (pred={p}, gold={g})")


def evaluate_one(entry: GoldEntry, predicted: str | None, db: Database, *,
                 ves: bool = False, timing: TimingConfig = TimingConfig()) -> EvalRecord:
    dialect = db.dialect
    ordered = _ordered(entry.sql, dialect)
    try:
        t0 = time.perf_counter()
        gold = _run(db, entry.sql, ordered)
        gold_elapsed = time.perf_counter() - t0
    except DatabaseError as exc:
        # scored as incorrect so the run continues; the error names the gold side
        return EvalRecord(entry.query_id, predicted or "", entry.sql, False, entry.difficulty,
                          error=f"gold execution error: {exc}")

    def miss(err: str) -> EvalRecord:
        return EvalRecord(entry.query_id, predicted or "", entry.sql, False, entry.difficulty,
                          error=err)

    if predicted is None or not predicted.strip():
        return miss("missing prediction")
    try:
        clean = sanitize(predicted, dialect)
    except SanitizeError as exc:
        return miss(str(exc))
    try:
        t0 = time.perf_counter()
        pred = _run(db, clean.text, False)
        pred_elapsed = time.perf_counter() - t0
    except DatabaseError as exc:
        return miss(f"execution error: {exc}")
    if not execution_match(pred, gold):
        return miss("result mismatch")
    if ves:
        pred_rt, gold_rt = measure_runtimes(db, clean.text, entry.sql, timing)
    else:
        pred_rt, gold_rt = max(pred_elapsed, 1e-9), max(gold_elapsed, 1e-9)
    return EvalRecord(entry.query_id, predicted, entry.sql, True, entry.difficulty,
                      pred_rt, gold_rt)


def evaluate(gold: Sequence[GoldEntry], predictions: Mapping[str, str], db: Database, *,
             ves: bool = False, timing: TimingConfig = TimingConfig(),
             classify_missing: bool = True) -> EvalReport:
    """Score predictions against gold; VES timing runs serially on one database."""
    records = []
    for entry in gold:
        if entry.difficulty is None and classify_missing:
            try:
                entry = GoldEntry(entry.query_id, entry.sql, classify_hardness(entry.sql).value,
                                  entry.gold_tables)
            except HardnessError:
                pass
        records.append(evaluate_one(entry, predictions.get(entry.query_id), db,
                                    ves=ves, timing=timing))
    return EvalReport.from_records(records, with_ves=ves)


# -- precision / recall / F1 -------------------------------------------------


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass(frozen=True)
class ClassCounts:
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass(frozen=True)
class ClassMetrics:
    per_class: dict[str, ClassCounts] = field(default_factory=dict)

    @property
    def macro_precision(self) -> float:
        return statistics.fmean(c.precision for c in self.per_class.values())

    @property
    def macro_recall(self) -> float:
        return statistics.fmean(c.recall for c in self.per_class.values())

    @property
    def macro_f1(self) -> float:
        return statistics.fmean(c.f1 for c in self.per_class.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_class": {k: {"tp": c.tp, "fp": c.fp, "fn": c.fn, "precision": c.precision,
                              "recall": c.recall, "f1": c.f1}
                          for k, c in self.per_class.items()},
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }


def linking_prf(predicted_tables: Iterable[str], gold_tables: Iterable[str]) -> ClassMetrics:
    pred = {t.casefold() for t in predicted_tables}
    gold = {t.casefold() for t in gold_tables}
    if not gold:
        raise EvalError("gold table set is empty")
    return ClassMetrics({"linked": ClassCounts(len(pred & gold), len(pred - gold),
                                                len(gold - pred))})


DECISION_LABELS = ("ACCEPT", "RECOMMEND", "REJECT")


def macro_f1(confusion: Sequence[Sequence[int]],
             labels: Sequence[str] = DECISION_LABELS) -> ClassMetrics:
    """Rows are gold labels, columns predicted labels."""
    n = len(labels)
    if len(confusion) != n or any(len(row) != n for row in confusion):
        raise ValueError(f"confusion must be {n}x{n}")
    per = {}
    for i, lab in enumerate(labels):
        tp = confusion[i][i]
        fp = sum(confusion[j][i] for j in range(n)) - tp
        fn = sum(confusion[i]) - tp
        per[lab] = ClassCounts(tp, fp, fn)
    return ClassMetrics(per)


def confusion_matrix(gold: Sequence[str], predicted: Sequence[str],
                     labels: Sequence[str] = DECISION_LABELS) -> list[list[int]]:
    if len(gold) != len(predicted):
        raise ValueError("gold and predicted must be the same length")
    idx = {lab: i for i, lab in enumerate(labels)}
    m = [[0] * len(labels) for _ in labels]
    for g, p in zip(gold, predicted):
        m[idx[g]][idx[p]] += 1
    return m


# -- hardness ----------------------------------------------------------------


class HardnessLabel(str, enum.Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"
    EXTRA = "extra"


class HardnessError(EvalError):
    pass


@dataclass(frozen=True)
class HardnessComponents:
    comp1: int
    comp2: int
    others: int


_AGGS = (exp.Max, exp.Min, exp.Count, exp.Sum, exp.Avg)
_OPS = {"lt": operator.lt, "le": operator.le, "gt": operator.gt, "ge": operator.ge,
        "eq": operator.eq}


@lru_cache(maxsize=1)
def hardness_rules() -> dict:
    text = resources.files("dynaquery.resources").joinpath("hardness_rules.json").read_text()
    return json.loads(text)


def _strip_parens(node: exp.Expression) -> exp.Expression:
    while isinstance(node, exp.Paren):
        node = node.this
    return node


def _flatten(cond: exp.Expression | None) -> tuple[list[exp.Expression], list[str]]:
    """Condition leaves and connector tokens ('and'/'or'), left to right."""
    if cond is None:
        return [], []
    cond = _strip_parens(cond)
    if isinstance(cond, (exp.And, exp.Or)):
        ll, lc = _flatten(cond.this)
        rl, rc = _flatten(cond.expression)
        return ll + rl, lc + ["or" if isinstance(cond, exp.Or) else "and"] + rc
    return [cond], []


def _leaf_parts(leaf: exp.Expression) -> tuple[bool, exp.Expression]:
    if isinstance(leaf, exp.Not):
        return True, _strip_parens(leaf.this)
    return False, leaf


def _subqueries(node: exp.Expression) -> int:
    """Top-level nested queries inside a condition leaf."""
    if isinstance(node, (exp.Select, exp.SetOperation)):
        return 1
    return sum(_subqueries(child) for child in node.iter_expressions())


def _is_agg(node: exp.Expression) -> bool:
    node = node.this if isinstance(node, (exp.Alias, exp.Ordered)) else node
    node = _strip_parens(node)
    return isinstance(node, _AGGS)


def _order_agg_count(node: exp.Expression) -> int:
    node = _strip_parens(node.this if isinstance(node, exp.Ordered) else node)
    if isinstance(node, (exp.Add, exp.Sub, exp.Mul, exp.Div)):
        return int(_is_agg(node.this)) + int(_is_agg(node.expression))
    return int(_is_agg(node))


def _main_select(tree: exp.Expression) -> tuple[exp.Select, bool]:
    tree = _strip_parens(tree.this if isinstance(tree, exp.Subquery) else tree)
    has_setop = False
    while isinstance(tree, (exp.SetOperation, exp.Subquery, exp.Paren)):
        if isinstance(tree, exp.SetOperation):
            has_setop = True
        tree = tree.this
    if not isinstance(tree, exp.Select):
        raise HardnessError(f"not a SELECT query: {type(tree).__name__}")
    return tree, has_setop


def hardness_components(sql: str, dialect: str | None = None) -> HardnessComponents:
    """Component counts as computed by Spider's evaluation script, quirks included:
    negated WHERE conditions and HAVING connectors count as aggregates, FROM-clause
    subqueries are not nested queries, and a chained set operation counts once."""
    try:
        tree = sqlglot.parse_one(sql, read=dialect)
    except SqlglotError as exc:
        raise HardnessError(f"cannot parse: {exc}") from exc
    sel, setop = _main_select(tree)

    from_ = sel.args.get("from_")
    joins = sel.args.get("joins") or []
    n_tables = (1 if from_ is not None else 0) + len(joins)
    on_leaves, on_conn = [], []
    for j in joins:
        leaves, conn = _flatten(j.args.get("on"))
        if on_leaves and leaves:
            on_conn.append("and")
        on_leaves += leaves
        on_conn += conn
    where_node = sel.args.get("where")
    w_leaves, w_conn = _flatten(where_node.this if where_node else None)
    having_node = sel.args.get("having")
    h_leaves, h_conn = _flatten(having_node.this if having_node else None)
    group = sel.args.get("group")
    group_exprs = list(group.expressions) if group else []
    order = sel.args.get("order")
    order_exprs = list(order.expressions) if order else []
    select_exprs = list(sel.expressions)

    all_leaves = on_leaves + w_leaves + h_leaves
    comp1 = int(bool(w_leaves)) + int(bool(group_exprs)) + int(bool(order_exprs))
    comp1 += int(sel.args.get("limit") is not None)
    comp1 += max(n_tables - 1, 0)
    comp1 += (on_conn + w_conn + h_conn).count("or")
    comp1 += sum(isinstance(_leaf_parts(l)[1], (exp.Like, exp.ILike)) for l in all_leaves)

    comp2 = sum(_subqueries(_leaf_parts(l)[1]) for l in all_leaves) + int(setop)

    agg = sum(_is_agg(e) for e in select_exprs)
    agg += sum(_leaf_parts(l)[0] for l in w_leaves)
    agg += sum(_is_agg(e) for e in group_exprs)
    agg += sum(_order_agg_count(e) for e in order_exprs)
    agg += sum(_leaf_parts(l)[0] for l in h_leaves) + len(h_conn)
    others = int(agg > 1) + int(len(select_exprs) > 1) + int(len(w_leaves) > 1)
    others += int(len(group_exprs) > 1)
    return HardnessComponents(comp1, comp2, others)


def _matches(clause: Mapping[str, Mapping[str, int]], comps: HardnessComponents) -> bool:
    return all(_OPS[op](getattr(comps, metric), bound)
               for metric, bounds in clause.items() for op, bound in bounds.items())


def classify_hardness(sql: str, dialect: str | None = None) -> HardnessLabel:
    comps = hardness_components(sql, dialect)
    table = hardness_rules()
    for rule in table["rules"]:
        if any(_matches(clause, comps) for clause in rule["any"]):
            return HardnessLabel(rule["label"])
    return HardnessLabel(table["default"])


# -- sampling ----------------------------------------------------------------


def allocate(counts: Mapping[str, int], n: int) -> dict[str, int]:
    """Largest-remainder apportionment of n over strata; ties go to the earlier label."""
    total = sum(counts.values())
    if not 0 <= n <= total:
        raise ValueError(f"sample size {n} outside 0..{total}")
    labels = sorted(counts)
    quotas = {k: Fraction(n * counts[k], total) for k in labels}
    alloc = {k: math.floor(q) for k, q in quotas.items()}
    left = n - sum(alloc.values())
    by_remainder = sorted(labels, key=lambda k: (-(quotas[k] - alloc[k]), labels.index(k)))
    for k in by_remainder[:left]:
        alloc[k] += 1
    for k in labels:
        if alloc[k] > counts[k]:
            raise ValueError(f"stratum {k!r} allocated {alloc[k]} of {counts[k]}")
    return alloc


def stratified_sample(entries: Sequence[T], n: int, seed: int, *,
                      key: Callable[[T], str | None] = lambda e: e["difficulty"]) -> list[T]:
    """Proportional stratified sample, seeded; returned in population order."""
    strata: dict[str, list[int]] = {}
    for i, e in enumerate(entries):
        label = key(e)
        if label is None:
            raise ValueError(f"entry {i} has no stratum label")
        strata.setdefault(label, []).append(i)
    alloc = allocate({k: len(v) for k, v in strata.items()}, n)
    rng = random.Random(seed)
    chosen: list[int] = []
    for label in sorted(strata):
        if alloc[label]:
            chosen.extend(rng.sample(strata[label], alloc[label]))
    return [entries[i] for i in sorted(chosen)]


@dataclass(frozen=True)
class Representativeness:
    statistic: float
    p_value: float
    passed: bool


def representativeness_check(sample: Mapping[str, int], population: Mapping[str, int],
                             alpha: float = ALPHA) -> Representativeness:
    """Chi-square goodness of fit of sample counts against population proportions."""
    if set(sample) - set(population):
        raise ValueError(f"categories absent from population: {sorted(set(sample) - set(population))}")
    cats = sorted(c for c in population if population[c] > 0)
    if set(c for c in sample if sample[c]) - set(cats):
        raise ValueError("sample has counts in a category with zero population")
    n = sum(sample.get(c, 0) for c in cats)
    total = sum(population[c] for c in cats)
    if n == 0 or total == 0:
        raise ValueError("empty sample or population")
    observed = [sample.get(c, 0) for c in cats]
    expected = [n * population[c] / total for c in cats]
    if len(cats) == 1:
        return Representativeness(0.0, 1.0, True)
    res = stats.chisquare(observed, expected)
    stat, p = float(res.statistic), float(res.pvalue)
    return Representativeness(stat, p, p > alpha)
