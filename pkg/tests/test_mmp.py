from __future__ import annotations

import random
import sqlite3

import pytest

from dynaquery import mmp
from dynaquery.catalog import Column, ForeignKey, SchemaModel, Table, introspect
from dynaquery.db import Database
from dynaquery.decision import Decision, DecisionLabel, RuleBasedDecider
from dynaquery.modelgate import AssetResolver, CallableBackend, Gateway
from dynaquery.mmp import (AssetKind, CandidateRecord, FragmentRole, JoinPathError,
                           MultimodalColumn, MultimodalColumnSet, RecordSkipped, SqlFragment,
                           assemble_sql, build_join_clause, build_not_null_clause,
                           build_where_clause, discover_multimodal_columns, generate_rationale)
from dynaquery.sile import NLQuery, QueryPlan, prune_schema
from dynaquery.sqp import PipelineError, execute

from conftest import IMAGED, MM_QUESTION, olist_responder, scripted

TRANSLATION = "product_category_name_translation"


def _db(tmp_path, script: str) -> Database:
    path = tmp_path / "m.sqlite"
    con = sqlite3.connect(path)
    con.executescript(script)
    con.close()
    return Database(f"sqlite:///{path}")


def const_decider(accept: set[str] | None = None):
    """Accept the records whose rationale mentions one of the given product ids."""
    accept = accept or set()

    def decide(question, rationale):
        hit = any(pid in rationale for pid in accept)
        return Decision(DecisionLabel.ACCEPT if hit else DecisionLabel.REJECT)
    return decide


# -- discovery ---------------------------------------------------------------


@pytest.fixture
def media_db(tmp_path):
    db = _db(tmp_path, """
        CREATE TABLE items (id INTEGER PRIMARY KEY, image_url TEXT, bio_text TEXT, thumbnail TEXT,
                            manual_doc TEXT, photo_note TEXT);
        INSERT INTO items VALUES
          (1, 'https://x/a.jpg', 'Loves hiking and the sea.', 'th/1.png', 'docs/1.pdf', 'nice'),
          (2, 'https://x/b.JPG', 'Grew up in a small town.', 'th/2.png', 'docs/2.pdf', 'a.png'),
          (3, NULL, 'Writes poems.', 'th/3.png', NULL, 'blurry');
    """)
    schema = introspect(db)
    return db, prune_schema(schema, QueryPlan("items"))


def test_discovery_defaults(media_db):
    db, pruned = media_db
    found = discover_multimodal_columns(pruned, db)
    assert found.to_list() == [
        {"table": "items", "column": "image_url", "kind": "image_url"},
        {"table": "items", "column": "manual_doc", "kind": "document_path"},
    ]


def test_discovery_with_extended_patterns(media_db):
    db, pruned = media_db
    found = discover_multimodal_columns(pruned, db, patterns=mmp.DEFAULT_PATTERNS + ("*thumb*",))
    assert ("items", "thumbnail", AssetKind.IMAGE_URL) in {(e.table, e.column, e.kind)
                                                          for e in found}
    assert "bio_text" not in {e.column for e in found}


def test_discovery_uses_probe_for_extensionless_urls(tmp_path):
    db = _db(tmp_path, "CREATE TABLE p (id INTEGER PRIMARY KEY, img TEXT);"
                       "INSERT INTO p VALUES (1, 'https://cdn/x/1'), (2, 'https://cdn/x/2');")
    pruned = prune_schema(introspect(db), QueryPlan("p"))
    assert len(discover_multimodal_columns(pruned, db)) == 0
    found = discover_multimodal_columns(pruned, db, probe=lambda url: "image/webp")
    assert [e.column for e in found] == ["img"]


def test_discovery_all_null_is_not_tagged(tmp_path):
    db = _db(tmp_path, "CREATE TABLE p (id INTEGER PRIMARY KEY, image_url TEXT);"
                       "INSERT INTO p VALUES (1, NULL);")
    assert len(discover_multimodal_columns(prune_schema(introspect(db), QueryPlan("p")), db)) == 0


def test_multimodal_set_invariants():
    e = MultimodalColumn("t", "image_url", AssetKind.IMAGE_URL)
    with pytest.raises(ValueError):
        MultimodalColumnSet((e, e))


# -- fragments ---------------------------------------------------------------


def test_not_null_clause():
    one = MultimodalColumnSet((MultimodalColumn("t", "image_url", AssetKind.IMAGE_URL),))
    assert build_not_null_clause(one).text == "t.image_url IS NOT NULL"
    assert build_not_null_clause(MultimodalColumnSet(())).empty
    two = MultimodalColumnSet((MultimodalColumn("t", "image_url", AssetKind.IMAGE_URL),
                               MultimodalColumn("t", "doc_path", AssetKind.DOCUMENT_PATH)))
    assert build_not_null_clause(two).text == "t.image_url IS NOT NULL AND t.doc_path IS NOT NULL"


def _chain() -> SchemaModel:
    def t(name, cols, fks=()):
        return Table(name, tuple(Column(c, "INTEGER") for c in cols), ("id",), tuple(fks))
    return SchemaModel("c", (
        t("a", ("id", "b_id"), (ForeignKey(("b_id",), "b", ("id",)),)),
        t("b", ("id", "c_id"), (ForeignKey(("c_id",), "c", ("id",)),)),
        t("c", ("id", "label")),
        t("lonely", ("id",)),
    ))


def test_join_empty_and_direct():
    s = _chain()
    assert build_join_clause(prune_schema(s, QueryPlan("a")), QueryPlan("a")).empty
    plan = QueryPlan("a", ("b",))
    assert build_join_clause(prune_schema(s, plan), plan).text == "INNER JOIN b ON a.b_id = b.id"


def test_join_chain_in_dependency_order():
    s = _chain()
    plan = QueryPlan("a", ("c", "b"))  # c only reachable through b
    frag = build_join_clause(prune_schema(s, plan), plan)
    assert frag.role is FragmentRole.JOIN
    assert frag.text == "INNER JOIN b ON a.b_id = b.id INNER JOIN c ON b.c_id = c.id"


def test_join_without_path():
    plan = QueryPlan("a", ("lonely",))
    with pytest.raises(JoinPathError) as err:
        build_join_clause(prune_schema(_chain(), plan), plan)
    assert err.value.pair == ("a", "lonely")


def test_assemble_variants():
    empty = SqlFragment(FragmentRole.WHERE)
    assert assemble_sql("*", SqlFragment(FragmentRole.JOIN), empty,
                        SqlFragment(FragmentRole.NOT_NULL), "t").text == "SELECT * FROM t"
    both = assemble_sql("*", SqlFragment(FragmentRole.JOIN),
                        SqlFragment(FragmentRole.WHERE, "t.a = 1 OR t.b = 2"),
                        SqlFragment(FragmentRole.NOT_NULL, "t.img IS NOT NULL"), "t")
    assert both.text == "SELECT * FROM t WHERE (t.a = 1 OR t.b = 2) AND t.img IS NOT NULL"


def _olist_plan():
    return QueryPlan("products", (TRANSLATION,))


def test_where_excludes_visual_constraints(olist):
    plan = _olist_plan()
    pruned = prune_schema(olist.schema, plan)
    frag = build_where_clause(NLQuery(MM_QUESTION), pruned, plan, olist.gateway())
    assert "green" not in frag.text.lower()
    assert "products.price < 50" in frag.text
    # the constraint on the joined table is qualified with that table
    assert f"{TRANSLATION}.product_category_name_english" in frag.text


def test_where_qualifies_unqualified_columns(olist):
    plan = _olist_plan()
    pruned = prune_schema(olist.schema, plan)
    gw = scripted({"mmp_where.v1": ["```sql\nproduct_category_name_english = 'housewares'\n```"]})
    frag = build_where_clause(NLQuery("housewares"), pruned, plan, gw)
    assert frag.text == f"{TRANSLATION}.product_category_name_english = 'housewares'"


def test_where_empty_for_visual_query(olist):
    plan = QueryPlan("products")
    pruned = prune_schema(olist.schema, plan)
    gw = scripted({"mmp_where.v1": ["Nothing structured here.\n```sql\n```"]})
    assert build_where_clause(NLQuery("bottles with a green lid"), pruned, plan, gw).empty


def test_where_repairs_once_then_fails(olist):
    plan = QueryPlan("products")
    pruned = prune_schema(olist.schema, plan)
    gw = scripted({"mmp_where.v1": ["```sql\nproducts.colour = 'green'\n```",
                                    "```sql\nproducts.price < 50\n```"]})
    assert build_where_clause(NLQuery("x"), pruned, plan, gw).text == "products.price < 50"
    gw = scripted({"mmp_where.v1": ["```sql\ncolour = 'green'\n```", "```sql\nSELECT 1\n```"]})
    with pytest.raises(mmp.FragmentError):
        build_where_clause(NLQuery("x"), pruned, plan, gw)
    assert gw.count() == 2


def test_full_assembly_executes(olist):
    plan = _olist_plan()
    pruned = prune_schema(olist.schema, plan)
    cmulti = discover_multimodal_columns(pruned, olist.db)
    join = build_join_clause(pruned, plan)
    where = build_where_clause(NLQuery(MM_QUESTION), pruned, plan, olist.gateway())
    sql = assemble_sql("*", join, where, build_not_null_clause(cmulti), "products")
    result = execute(sql, olist.db)
    assert sorted(r[0] for r in result.rows) == list(IMAGED)


# -- rationale ---------------------------------------------------------------


def _record(refs):
    return CandidateRecord(("products.product_id",), ("p01",), ("p01",), tuple(refs))


def test_rationale_passthrough(olist):
    cm = MultimodalColumnSet((MultimodalColumn("products", "product_photo_url", AssetKind.IMAGE_URL),))
    gw = olist.gateway(lambda p: "The lid is green, matching the constraint")
    r = generate_rationale(NLQuery("x"), _record([("products.product_photo_url",
                                                   "images/p01.png")]), cm, gw)
    assert r.text == "The lid is green, matching the constraint" and r.record_key == ("p01",)


def test_rationale_missing_asset_is_skipped(olist):
    cm = MultimodalColumnSet((MultimodalColumn("products", "product_photo_url", AssetKind.IMAGE_URL),))
    gw = olist.gateway(lambda p: "unused")
    with pytest.raises(RecordSkipped) as err:
        generate_rationale(NLQuery("x"), _record([("products.product_photo_url",
                                                   "images/missing.png")]), cm, gw)
    assert err.value.reason == "asset_unavailable" and gw.count() == 0


def test_rationale_http_404_is_skipped(olist):
    import httpx
    resolver = AssetResolver(client=httpx.Client(transport=httpx.MockTransport(
        lambda r: httpx.Response(404))))
    gw = Gateway(CallableBackend(lambda p: "unused"), resolver=resolver)
    cm = MultimodalColumnSet((MultimodalColumn("products", "product_photo_url", AssetKind.IMAGE_URL),))
    with pytest.raises(RecordSkipped) as err:
        generate_rationale(NLQuery("x"), _record([("products.product_photo_url",
                                                   "https://cdn.example/p01.png")]), cm, gw)
    assert err.value.reason == "asset_unavailable"


def test_rationale_two_assets_two_parts(olist):
    (olist.root / "spec.txt").write_text("pump bottle, 300ml", encoding="utf-8")
    cm = MultimodalColumnSet((
        MultimodalColumn("products", "product_photo_url", AssetKind.IMAGE_URL),
        MultimodalColumn("products", "spec_doc", AssetKind.DOCUMENT_PATH)))
    seen = []
    gw = olist.gateway(lambda p: seen.append(p) or "ok")
    generate_rationale(NLQuery("x"), _record([("products.product_photo_url", "images/p01.png"),
                                              ("products.spec_doc", "spec.txt")]), cm, gw)
    assets = seen[0].request.assets
    assert len(assets) == 2
    assert [a.media_kind for a in assets] == ["image", "document"]


# -- run ---------------------------------------------------------------------


def test_run_accepts_one(olist):
    gw = olist.gateway()
    res = mmp.run(NLQuery(MM_QUESTION, "multimodal"), olist.schema, olist.db, gw,
                  RuleBasedDecider(olist.gateway()))
    assert res.report["candidate_count"] == 3
    assert res.accepted == frozenset({("p01",)})
    assert res.recommended == frozenset({("p02",)})
    assert [r[0] for r in res.result.rows] == ["p01"]
    assert res.report["final_keys"] == [["p01"]]
    assert gw.count("mmp_rationale.v1") == 3


def test_run_accepts_none(olist):
    executed = []
    real = olist.db.execute

    def spy(sql, **kw):
        executed.append(sql)
        return real(sql, **kw)

    olist.db.execute = spy
    res = mmp.run(NLQuery(MM_QUESTION), olist.schema, olist.db, olist.gateway(), const_decider())
    assert res.result.rows == () and not res.final_executed
    assert res.result.columns == tuple(c.name for c in olist.schema.table("products").columns)
    assert not any("IN (" in s for s in executed)
    assert res.report["final_sql"] is None


def test_null_image_never_reaches_phase_two(olist):
    seen = []

    def responder(prepared):
        if prepared.request.template_id == "mmp_rationale.v1":
            seen.append(prepared.request.text)
        return olist_responder(prepared)

    gw = olist.gateway(responder)
    mmp.run(NLQuery(MM_QUESTION), olist.schema, olist.db, gw, const_decider())
    assert len(seen) == 3
    assert not any("products.product_id: p04" in text for text in seen)


def test_run_order_independence(olist):
    baseline = None
    for seed in range(5):
        rng = random.Random(seed)
        res = mmp.run(NLQuery(MM_QUESTION), olist.schema, olist.db, olist.gateway(),
                      RuleBasedDecider(olist.gateway()),
                      order=lambda rs: rng.sample(rs, len(rs)))
        if baseline is None:
            baseline = res.report_json()
        assert res.report_json() == baseline


def test_run_stage_tag_on_join_failure(olist):
    plan = '```plan\n{"base_table": "products", "join_tables": ["customers"]}\n```'
    gw = scripted({"sile_plan.v1": [plan]})
    with pytest.raises(PipelineError) as err:
        mmp.run(NLQuery("x"), olist.schema, olist.db, gw, const_decider())
    assert err.value.stage == "join"


def test_decider_failure_skips_record(olist):
    def boom(question, rationale):
        raise RuntimeError("classifier down")

    res = mmp.run(NLQuery(MM_QUESTION), olist.schema, olist.db, olist.gateway(), boom)
    assert res.report["skipped_count"] == 3
    assert {r["skipped"] for r in res.report["records"]} == {"decision_error"}


def test_final_query_composite_keys():
    base = Table("oi", (Column("order_id", "TEXT"), Column("item", "INTEGER")),
                 ("order_id", "item"))
    keys = [("o2", 1), ("o1", 2)]
    assert mmp.final_query(base, keys, "sqlite") == (
        "SELECT * FROM oi WHERE (oi.order_id, oi.item) IN (('o1', 2), ('o2', 1)) "
        "ORDER BY oi.order_id, oi.item")
    assert mmp.final_query(base, keys, "tsql") == (
        "SELECT * FROM oi WHERE (oi.order_id = 'o1' AND oi.item = 2) OR "
        "(oi.order_id = 'o2' AND oi.item = 1) ORDER BY oi.order_id, oi.item")


def test_quote_ident():
    assert mmp.quote_ident("image_url", "sqlite") == "image_url"
    assert mmp.quote_ident("order", "sqlite") == '"order"'
    assert mmp.quote_ident("my col", "mysql") == "`my col`"
