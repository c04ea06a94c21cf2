"""Command-line entry point: ``dynaquery <command>``."""

from __future__ import annotations

import json
import logging
import os
import sys
from collections import Counter
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import click
import yaml

from . import catalog, evalkit, forensics, mmp, ragbase, sile, sqp
from .db import Database, DatabaseError
from .decision import DecisionError, make_decider
from .modelgate import (AssetResolver, Gateway, GatewayError, HttpBackend, RecordingBackend,
                        ScriptedBackend, Transcript)

MODES = ("live", "record", "replay")


class ConfigError(click.UsageError):
    pass


@dataclass
class Config:
    database_url: str | None = None
    model_url: str | None = None
    api_key: str | None = None
    model_id: str = "default"
    embed_url: str | None = None
    classifier_url: str | None = None
    asset_root: str | None = None
    enrichment: str | None = None
    transcript: str | None = None
    mode: str | None = None
    k: int = ragbase.DEFAULT_K
    timeout: float = 30.0
    seed: int = 0
    run_root: str = "runs"
    run_dir: str | None = None
    max_concurrency: int = 4

    def effective_mode(self) -> str:
        return self.mode or ("replay" if self.transcript else "live")


_ENV = {
    "database_url": "DQ_DB_URL", "model_url": "DQ_MODEL_URL", "api_key": "DQ_API_KEY",
    "model_id": "DQ_MODEL_ID", "embed_url": "DQ_EMBED_URL",
    "classifier_url": "DQ_CLASSIFIER_URL", "asset_root": "DQ_ASSET_ROOT",
    "enrichment": "DQ_ENRICHMENT", "transcript": "DQ_TRANSCRIPT", "mode": "DQ_MODE",
    "k": "DQ_K", "timeout": "DQ_TIMEOUT", "seed": "DQ_SEED", "run_root": "DQ_RUN_ROOT",
    "max_concurrency": "DQ_MAX_CONCURRENCY",
}


def load_config(flags: dict[str, Any], env: dict[str, str] | None = None,
                config_file: str | None = None) -> Config:
    """Flags override environment variables, which override the YAML config file."""
    env = os.environ if env is None else env
    merged: dict[str, Any] = {}
    if config_file:
        with open(config_file, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{config_file}: expected a mapping at top level")
        known = {f.name for f in fields(Config)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{config_file}: unknown keys {unknown}")
        merged.update(data)
    for name, var in _ENV.items():
        if env.get(var):
            merged[name] = env[var]
    merged.update({k: v for k, v in flags.items() if v is not None})
    types = {f.name: f.type for f in fields(Config)}
    for name in ("k", "seed", "max_concurrency"):
        if name in merged:
            merged[name] = int(merged[name])
    if "timeout" in merged:
        merged["timeout"] = float(merged["timeout"])
    cfg = Config(**{k: v for k, v in merged.items() if k in types})
    if cfg.mode is not None and cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}")
    return cfg


# -- helpers -----------------------------------------------------------------


def _fail(stage: str, exc: BaseException) -> None:
    click.echo(f"error [{stage}]: {exc}", err=True)
    sys.exit(1)


def _database(cfg: Config) -> Database:
    if not cfg.database_url:
        raise ConfigError("no database URL (use --db-url, DQ_DB_URL or database_url)")
    try:
        db = Database(cfg.database_url, timeout=cfg.timeout)
        db.check()
    except DatabaseError as exc:
        _fail("connect", exc)
    return db


def _schema(cfg: Config, db: Database) -> catalog.SchemaModel:
    try:
        schema = catalog.introspect(db)
    except (catalog.IntrospectionError, DatabaseError) as exc:
        _fail("introspect", exc)
    if cfg.enrichment:
        schema, diagnostics = catalog.apply_enrichment(schema,
                                                       catalog.load_enrichment(cfg.enrichment))
        for d in diagnostics:
            click.echo(f"warning: enrichment: {d}", err=True)
    return schema


def _gateway(cfg: Config) -> Gateway:
    mode = cfg.effective_mode()
    resolver = AssetResolver(cfg.asset_root)
    kw = dict(model_id=cfg.model_id, resolver=resolver, max_concurrency=cfg.max_concurrency)
    if mode == "replay":
        if not cfg.transcript:
            raise ConfigError("replay mode requires --transcript")
        return Gateway(ScriptedBackend(Transcript.load(cfg.transcript)), **kw)
    if not cfg.model_url:
        raise ConfigError(f"{mode} mode requires a model endpoint (DQ_MODEL_URL or model_url)")
    backend = HttpBackend(cfg.model_url, cfg.api_key)
    if mode == "record":
        if not cfg.transcript:
            raise ConfigError("record mode requires --transcript")
        path = Path(cfg.transcript)
        transcript = Transcript.load(path) if path.exists() else Transcript(path=path)
        return Gateway(RecordingBackend(backend, transcript), **kw)
    return Gateway(backend, **kw)


def _run_dir(cfg: Config) -> Path:
    if cfg.run_dir:
        path = Path(cfg.run_dir)
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        path = Path(cfg.run_root) / f"{stamp}-seed{cfg.seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    click.echo(f"wrote {path}", err=True)


def _format_rows(result: sqp.ResultSet, limit: int = 50) -> str:
    cols = [str(c) for c in result.columns]
    rows = [["NULL" if v is None else str(v) for v in r] for r in result.rows[:limit]]
    widths = [max([len(c), *(len(r[i]) for r in rows)]) for i, c in enumerate(cols)]
    lines = [" | ".join(c.ljust(w) for c, w in zip(cols, widths)),
             "-+-".join("-" * w for w in widths)]
    lines += [" | ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    if len(result.rows) > limit:
        lines.append(f"... ({len(result.rows) - limit} more)")
    n = len(result.rows)
    lines.append(f"{n} row{'s' if n != 1 else ''}")
    return "\n".join(lines) + "\n"


# -- commands ----------------------------------------------------------------


@click.group()
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              help="YAML config file.")
@click.option("--db-url", help="SQLAlchemy database URL.")
@click.option("--transcript", type=click.Path(dir_okay=False), help="Model transcript (JSONL).")
@click.option("--mode", type=click.Choice(MODES), help="live, record or replay.")
@click.option("--seed", type=int, help="Seed for sampling and run naming.")
@click.option("--run-dir", type=click.Path(file_okay=False),
              help="Write artifacts here instead of a timestamped directory.")
@click.option("--asset-root", type=click.Path(file_okay=False),
              help="Base directory for relative asset paths.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx: click.Context, config_file, db_url, transcript, mode, seed, run_dir, asset_root,
         verbose):
    """Plan, run and evaluate natural-language queries over a relational database."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not verbose:
        logging.getLogger("sqlglot").setLevel(logging.ERROR)
    flags = dict(database_url=db_url, transcript=transcript, mode=mode, seed=seed,
                 run_dir=run_dir, asset_root=asset_root)
    ctx.obj = load_config(flags, config_file=config_file)


@main.command()
@click.option("--enrich", type=click.Path(exists=True, dir_okay=False),
              help="YAML file of table and column descriptions.")
@click.option("--style", type=click.Choice(["full", "compact"]), default="full")
@click.option("--output", type=click.Path(dir_okay=False), help="Also write the schema as JSON.")
@click.pass_obj
def introspect(cfg: Config, enrich, style, output):
    """Print the database schema as the models see it."""
    if enrich:
        cfg.enrichment = enrich
    db = _database(cfg)
    schema = _schema(cfg, db)
    click.echo(catalog.render_schema_context(schema, style))
    if output:
        Path(output).write_text(json.dumps(schema.to_dict(), indent=2, sort_keys=True) + "\n",
                                encoding="utf-8")


@main.command()
@click.argument("question")
@click.option("--baseline", type=click.Choice(["rag"]), default=None,
              help="Show embedding top-k retrieval instead of the planner.")
@click.option("-k", "k", type=int, default=None, help="Top-k for the retrieval baseline.")
@click.pass_obj
def plan(cfg: Config, question, baseline, k):
    """Print the query plan (base and join tables) for a question."""
    db = _database(cfg)
    schema = _schema(cfg, db)
    query = sile.NLQuery(question)
    if baseline == "rag":
        embedder = (ragbase.HttpEmbedder(cfg.embed_url, api_key=cfg.api_key) if cfg.embed_url
                    else ragbase.LexicalEmbedder())
        try:
            res = ragbase.retrieve(query, ragbase.index_schema(schema, embedder), k or cfg.k)
        except ragbase.EmbedderError as exc:
            _fail("retrieve", exc)
        click.echo(json.dumps({"tables": res.tables,
                               "scores": [round(s, 6) for _, s in res.ranked]}, indent=2))
        return
    try:
        p = sile.plan(query, schema, _gateway(cfg))
        pruned = sile.prune_schema(schema, p)
    except (sile.PlanningError, GatewayError) as exc:
        _fail("plan", exc)
    out = p.to_dict()
    out["bridge_candidates"] = list(pruned.bridge_candidates)
    click.echo(json.dumps(out, indent=2))


@main.command()
@click.argument("question")
@click.option("--pipeline", type=click.Choice(["sql", "mm"]), required=True,
              help="sql for structured questions, mm for questions over images/documents.")
@click.option("--decider", type=click.Choice(["rule", "descriptive", "remote"]), default="rule",
              show_default=True)
@click.pass_obj
def ask(cfg: Config, question, pipeline, decider):
    """Answer a question through the chosen pipeline."""
    db = _database(cfg)
    schema = _schema(cfg, db)
    gateway = _gateway(cfg)
    query = sile.NLQuery(question, "multimodal" if pipeline == "mm" else "structured")
    run_dir = _run_dir(cfg)
    try:
        if pipeline == "sql":
            run = sqp.run(query, schema, db, gateway, timeout=cfg.timeout)
            result, report = run.result, run.provenance()
            report["query"] = question
            report_text = json.dumps(report, indent=2, sort_keys=True, default=str) + "\n"
        else:
            dec = make_decider(decider, gateway, cfg.classifier_url)
            run = mmp.run(query, schema, db, gateway, dec, timeout=cfg.timeout)
            result, report_text = run.result, run.report_json()
    except sqp.PipelineError as exc:
        _write(run_dir / "report.json",
               json.dumps({"error": str(exc), "stage": exc.stage, **exc.provenance},
                          indent=2, sort_keys=True, default=str) + "\n")
        _fail(exc.stage, exc.cause)
    except (DecisionError, ValueError) as exc:
        _fail("decide", exc)
    click.echo(_format_rows(result), nl=False)
    _write(run_dir / "report.json", report_text)


@main.command(name="eval")
@click.option("--gold", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--predictions", type=click.Path(exists=True, dir_okay=False))
@click.option("--generate", is_flag=True, help="Produce predictions with the SQL pipeline.")
@click.option("--ves", is_flag=True, help="Also measure the valid efficiency score.")
@click.option("--repeats", type=int, default=5, show_default=True)
@click.option("--sample", "sample_n", type=int, help="Evaluate a stratified sample of this size.")
@click.pass_obj
def eval_cmd(cfg: Config, gold, predictions, generate, ves, repeats, sample_n):
    """Score predictions against gold SQL (EA, optionally VES) by difficulty."""
    if bool(predictions) == bool(generate):
        raise click.UsageError("give exactly one of --predictions or --generate")
    db = _database(cfg)
    run_dir = _run_dir(cfg)
    try:
        raw_gold = evalkit.read_jsonl(gold)
        entries = evalkit.read_gold(gold)
    except (evalkit.EvalError, KeyError) as exc:
        _fail("input", exc)
    if sample_n is not None:
        labelled = [e if e.difficulty else
                    evalkit.GoldEntry(e.query_id, e.sql, evalkit.classify_hardness(e.sql).value,
                                      e.gold_tables) for e in entries]
        try:
            entries = evalkit.stratified_sample(labelled, sample_n, cfg.seed,
                                                key=lambda e: e.difficulty)
        except ValueError as exc:
            _fail("sample", exc)
        _write(run_dir / "sample.jsonl",
               "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in entries))
    if generate:
        schema = _schema(cfg, db)
        gateway = _gateway(cfg)
        questions = {str(o["query_id"]): o.get("question") for o in raw_gold}
        preds: dict[str, str] = {}
        for e in entries:
            q = questions.get(e.query_id)
            if not q:
                _fail("input", ValueError(f"gold entry {e.query_id} has no question"))
            try:
                preds[e.query_id] = sqp.run(sile.NLQuery(q), schema, db, gateway,
                                            timeout=cfg.timeout).sql.text
            except sqp.PipelineError as exc:
                logging.getLogger(__name__).warning("%s failed at %s: %s", e.query_id,
                                                    exc.stage, exc.cause)
        _write(run_dir / "predictions.jsonl",
               "".join(json.dumps({"query_id": k, "sql": v}) + "\n" for k, v in preds.items()))
    else:
        preds = evalkit.read_predictions(predictions)
    report = evalkit.evaluate(entries, preds, db, ves=ves,
                              timing=evalkit.TimingConfig(repeats=repeats))
    _write(run_dir / "eval_report.json", report.to_json())
    table = report.text_table()
    _write(run_dir / "eval_table.txt", table)
    click.echo(table, nl=False)


@main.command()
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="JSONL entries with a difficulty field (or sql to classify).")
@click.option("-n", "n", type=int, required=True)
@click.option("--output", type=click.Path(dir_okay=False))
@click.pass_obj
def sample(cfg: Config, input_path, n, output):
    """Draw a seeded stratified sample and check it against the population."""
    entries = evalkit.read_jsonl(input_path)
    for e in entries:
        if not e.get("difficulty") and e.get("sql"):
            e["difficulty"] = evalkit.classify_hardness(e["sql"]).value
    try:
        drawn = evalkit.stratified_sample(entries, n, cfg.seed, key=lambda e: e.get("difficulty"))
    except ValueError as exc:
        _fail("sample", exc)
    check = evalkit.representativeness_check(Counter(e["difficulty"] for e in drawn),
                                             Counter(e["difficulty"] for e in entries))
    text = "".join(json.dumps(e, sort_keys=True) + "\n" for e in drawn)
    if output:
        _write(Path(output), text)
    else:
        click.echo(text, nl=False)
    click.echo(f"chi-square={check.statistic:.6f} p={check.p_value:.6f} "
               f"{'representative' if check.passed else 'NOT representative'}", err=True)


@main.command(name="forensics")
@click.option("--report", "report_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="eval_report.json from the eval command.")
@click.pass_obj
def forensics_cmd(cfg: Config, report_path):
    """Categorize failed predictions and print the distribution."""
    db = _database(cfg)
    schema = _schema(cfg, db)
    with open(report_path, encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        findings = forensics.classify_report(data.get("records", []), schema, dialect=db.dialect)
    except forensics.ForensicsInputError as exc:
        _fail("forensics", exc)
    run_dir = _run_dir(cfg)
    forensics.write_findings(findings, run_dir / "findings.jsonl")
    if not findings:
        click.echo("no failures")
        return
    dist = forensics.failure_report(findings)
    _write(run_dir / "distribution.json", json.dumps(dist.to_dict(), indent=2) + "\n")
    click.echo(dist.text_table(), nl=False)


if __name__ == "__main__":  # pragma: no cover
    main()
