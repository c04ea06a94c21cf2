from __future__ import annotations

import json
import logging
import sqlite3
from dataclasses import dataclass
from pathlib import Path

import pytest

from dynaquery import catalog
from dynaquery.db import Database
from dynaquery.modelgate import (AssetResolver, CallableBackend, Gateway, PreparedRequest, RecordingBackend,
                                 ScriptedBackend, Transcript)

logging.getLogger("sqlglot").setLevel(logging.ERROR)

# Olist-style marketplace: 6 tables, 12 products, 3 of them with a photo.
OLIST_DDL = """
CREATE TABLE product_category_name_translation (
    product_category_name TEXT PRIMARY KEY,
    product_category_name_english TEXT NOT NULL
);
CREATE TABLE sellers (
    seller_id TEXT PRIMARY KEY,
    seller_city TEXT,
    seller_state TEXT
);
CREATE TABLE customers (
    customer_id TEXT PRIMARY KEY,
    customer_city TEXT,
    customer_state TEXT
);
CREATE TABLE products (
    product_id TEXT PRIMARY KEY,
    product_category_name TEXT REFERENCES product_category_name_translation(product_category_name),
    product_name TEXT NOT NULL,
    price REAL NOT NULL,
    product_photo_url TEXT,
    product_description TEXT
);
CREATE TABLE orders (
    order_id TEXT PRIMARY KEY,
    customer_id TEXT NOT NULL REFERENCES customers(customer_id),
    order_status TEXT,
    order_purchase_timestamp TEXT
);
CREATE TABLE order_items (
    order_id TEXT NOT NULL REFERENCES orders(order_id),
    order_item_id INTEGER NOT NULL,
    product_id TEXT NOT NULL REFERENCES products(product_id),
    seller_id TEXT NOT NULL REFERENCES sellers(seller_id),
    price REAL,
    PRIMARY KEY (order_id, order_item_id)
);
"""

CATEGORIES = [("beleza_saude", "health_beauty"), ("utilidades_domesticas", "housewares"),
              ("esporte_lazer", "sports_leisure")]

# (id, category, name, price, photo)
PRODUCTS = [
    ("p01", "beleza_saude", "Herbal shampoo 500ml", 24.90, "images/p01.png"),
    ("p02", "beleza_saude", "Argan hair oil", 39.50, "images/p02.png"),
    ("p03", "beleza_saude", "Repair conditioner", 45.00, "images/p03.png"),
    ("p04", "beleza_saude", "Volume mousse", 19.99, None),
    ("p05", "beleza_saude", "Salon keratin kit", 189.00, None),
    ("p06", "beleza_saude", "Hair dryer", 129.90, None),
    ("p07", "utilidades_domesticas", "Soap dispenser", 15.00, None),
    ("p08", "utilidades_domesticas", "Glass jar set", 35.00, None),
    ("p09", "utilidades_domesticas", "Kitchen scale", 59.90, None),
    ("p10", "esporte_lazer", "Yoga mat", 79.00, None),
    ("p11", "esporte_lazer", "Water bottle", 22.00, None),
    ("p12", "esporte_lazer", "Jump rope", 12.50, None),
]
IMAGED = ("p01", "p02", "p03")

MM_QUESTION = "health and beauty products under $50 in a bottle with a green lid and a dispenser pump"
PLAN_RESPONSE = (
    "The question is about products, so products is the base table. The category is "
    "stored in Portuguese, so the English translation table is needed as well.\n"
    "```plan\n"
    '{"base_table": "products", "join_tables": ["product_category_name_translation"]}\n'
    "```"
)
WHERE_RESPONSE = (
    "```sql\nproduct_category_name_translation.product_category_name_english = 'health_beauty'"
    " AND products.price < 50\n```"
)
RATIONALES = {
    "p01": "The bottle has a green lid and a dispenser pump on top.",
    "p02": "The bottle has a green lid but a plain screw cap, no dispenser pump.",
    "p03": "A white tube with a flip cap; no green lid and no dispenser pump.",
}
CHECKLISTS = {
    "p01": ["met", "met", "met"],
    "p02": ["met", "met", "not_met"],
    "p03": ["not_met", "not_met", "not_met"],
}
CONSTRAINTS = ["under $50 health and beauty", "green lid", "dispenser pump"]


def png_bytes(seed: int) -> bytes:
    return b"\x89PNG\r\n\x1a\n" + bytes([seed]) * 32


def build_olist(root: Path) -> tuple[str, Path]:
    """Create the fixture database and asset tree under ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    db_path = root / "olist.sqlite"
    if db_path.exists():
        db_path.unlink()
    con = sqlite3.connect(db_path)
    con.executescript(OLIST_DDL)
    con.executemany("INSERT INTO product_category_name_translation VALUES (?, ?)", CATEGORIES)
    con.executemany("INSERT INTO sellers VALUES (?, ?, ?)",
                    [("s1", "sao paulo", "SP"), ("s2", "curitiba", "PR")])
    con.executemany("INSERT INTO customers VALUES (?, ?, ?)",
                    [("c1", "campinas", "SP"), ("c2", "rio de janeiro", "RJ")])
    con.executemany(
        "INSERT INTO products VALUES (?, ?, ?, ?, ?, ?)",
        [(pid, cat, name, price, photo, f"{name} description") for pid, cat, name, price, photo
         in PRODUCTS],
    )
    con.executemany("INSERT INTO orders VALUES (?, ?, ?, ?)",
                    [("o1", "c1", "delivered", "2018-01-02"), ("o2", "c2", "shipped", "2018-02-03")])
    con.executemany("INSERT INTO order_items VALUES (?, ?, ?, ?, ?)",
                    [("o1", 1, "p01", "s1", 24.90), ("o1", 2, "p10", "s2", 79.00),
                     ("o2", 1, "p02", "s1", 39.50)])
    con.commit()
    con.close()
    images = root / "images"
    images.mkdir(exist_ok=True)
    for i, pid in enumerate(IMAGED):
        (images / f"{pid}.png").write_bytes(png_bytes(i + 1))
    return f"sqlite:///{db_path}", root


def _product_id(text: str) -> str | None:
    for line in text.splitlines():
        if line.startswith("products.product_id:"):
            return line.split(":", 1)[1].strip()
    return None


def olist_responder(prepared: PreparedRequest) -> str:
    """Deterministic stand-in for the model, keyed on template and request content."""
    req = prepared.request
    tid = req.template_id
    text = req.text
    if tid == "sile_plan.v1":
        return PLAN_RESPONSE
    if tid == "mmp_where.v1":
        return WHERE_RESPONSE
    if tid == "mmp_rationale.v1":
        return RATIONALES[_product_id(text)]
    if tid == "decision_rule.v1":
        for pid, rationale in RATIONALES.items():
            if rationale in text:
                items = [{"constraint": c, "status": s}
                         for c, s in zip(CONSTRAINTS, CHECKLISTS[pid])]
                return f"Checking each constraint.\n```checklist\n{json.dumps(items)}\n```\nACCEPT"
    raise AssertionError(f"unexpected request {tid}")


@dataclass
class Olist:
    url: str
    root: Path
    db: Database
    schema: catalog.SchemaModel

    def gateway(self, responder=olist_responder, **kw) -> Gateway:
        return Gateway(CallableBackend(responder), resolver=AssetResolver(self.root), **kw)

    def record(self, path: Path, run, responder=olist_responder) -> Transcript:
        """Run ``run(gateway)`` against the responder, recording a transcript to ``path``."""
        transcript = Transcript(path=path)
        gw = Gateway(RecordingBackend(CallableBackend(responder), transcript),
                     resolver=AssetResolver(self.root))
        run(gw)
        return transcript

    def record_mm(self, path: Path, question: str = MM_QUESTION,
                  responder=olist_responder) -> Transcript:
        """Record the calls one multimodal run makes (planner, filter, rationale, decision)."""
        def go(gw: Gateway) -> None:
            from dynaquery import mmp
            from dynaquery.decision import make_decider
            from dynaquery.sile import NLQuery
            mmp.run(NLQuery(question, "multimodal"), self.schema, self.db, gw,
                    make_decider("rule", gw))
        return self.record(path, go, responder)

    def replay(self, transcript: Transcript | Path, **kw) -> Gateway:
        if not isinstance(transcript, Transcript):
            transcript = Transcript.load(transcript)
        return Gateway(ScriptedBackend(transcript), resolver=AssetResolver(self.root), **kw)


@pytest.fixture
def olist(tmp_path) -> Olist:
    url, root = build_olist(tmp_path / "olist")
    db = Database(url)
    catalog.invalidate()
    schema = catalog.introspect(db)
    yield Olist(url, root, db, schema)
    db.dispose()


@pytest.fixture(autouse=True)
def _fresh_schema_cache():
    catalog.invalidate()
    yield
    catalog.invalidate()


def scripted(responses: dict[str, list[str]] | None = None, fn=None) -> Gateway:
    """Gateway whose responses come from per-template queues (or a function)."""
    queues = {k: list(v) for k, v in (responses or {}).items()}

    def respond(prepared: PreparedRequest) -> str:
        if fn is not None:
            return fn(prepared)
        q = queues.get(prepared.request.template_id)
        if not q:
            raise AssertionError(f"no scripted response left for {prepared.request.template_id}")
        return q.pop(0)

    return Gateway(CallableBackend(respond))


# -- acceptance reporting: one PASS/FAIL line per criterion --------------------

_CRITERIA: list[tuple[str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA.append((marker.args[0], "PASS" if rep.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for name, status in _CRITERIA:
            terminalreporter.write_line(f"{status}  {name}")
