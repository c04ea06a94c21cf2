"""Database handle shared by introspection, the pipelines and the evaluator."""

from __future__ import annotations

import logging
import threading
import time
from collections.abc import Callable, Iterator
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any

import sqlalchemy as sa
from sqlalchemy import event
from sqlalchemy.engine import Engine

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0

# SQLAlchemy dialect name -> sqlglot dialect name
_SQLGLOT_DIALECTS = {
    "sqlite": "sqlite",
    "mysql": "mysql",
    "mariadb": "mysql",
    "postgresql": "postgres",
    "duckdb": "duckdb",
    "mssql": "tsql",
    "oracle": "oracle",
}


class DatabaseError(Exception):
    """Connection or execution failure reported by the engine."""


class QueryTimeout(DatabaseError):
    pass


@dataclass(frozen=True)
class RawResult:
    columns: list[str]
    rows: list[tuple[Any, ...]]
    elapsed: float


class Database:
    """Thin wrapper over a SQLAlchemy engine.

    SQLite connections are opened with ``PRAGMA query_only`` when ``read_only``
    is set, so the harness cannot write even if a statement slips through.
    """

    def __init__(self, url_or_engine: str | Engine, *, read_only: bool = True,
                 timeout: float = DEFAULT_TIMEOUT):
        if isinstance(url_or_engine, Engine):
            self.engine = url_or_engine
        else:
            try:
                self.engine = sa.create_engine(url_or_engine)
            except Exception as exc:  # bad URL, missing driver
                raise DatabaseError(f"cannot create engine for {url_or_engine!r}: {exc}") from exc
        self.timeout = timeout
        self.read_only = read_only
        if read_only and self.engine.dialect.name == "sqlite":
            event.listen(self.engine, "connect", _sqlite_query_only)

    @property
    def url(self) -> str:
        return self.engine.url.render_as_string(hide_password=True)

    @property
    def name(self) -> str:
        db = self.engine.url.database
        return db if db else self.url

    @property
    def dialect(self) -> str:
        return _SQLGLOT_DIALECTS.get(self.engine.dialect.name, self.engine.dialect.name)

    def check(self) -> None:
        """Open and close one connection; raises DatabaseError on failure."""
        try:
            with self.engine.connect() as conn:
                conn.exec_driver_sql("SELECT 1").fetchall()
        except sa.exc.SQLAlchemyError as exc:
            raise DatabaseError(f"connection to {self.url} failed: {_engine_message(exc)}") from exc

    def execute(self, sql: str, *, timeout: float | None = None) -> RawResult:
        timeout = self.timeout if timeout is None else timeout
        try:
            with self.engine.connect() as conn:
                result = self._run(conn, sql, timeout)
                if not self.read_only:
                    conn.commit()
                return result
        except QueryTimeout:
            raise
        except sa.exc.SQLAlchemyError as exc:
            raise DatabaseError(_engine_message(exc)) from exc

    @contextmanager
    def session(self) -> Iterator[Callable[[str], RawResult]]:
        """One connection for a series of statements, e.g. paired timings."""
        try:
            with self.engine.connect() as conn:
                yield lambda sql: _fetch(conn, sql)
        except sa.exc.SQLAlchemyError as exc:
            raise DatabaseError(_engine_message(exc)) from exc

    def _run(self, conn: sa.Connection, sql: str, timeout: float) -> RawResult:
        dbapi_conn = conn.connection.dbapi_connection
        interrupt = getattr(dbapi_conn, "interrupt", None)
        if interrupt is None:
            return _run_in_thread(conn, sql, timeout)
        fired = threading.Event()

        def _fire() -> None:
            fired.set()
            interrupt()

        timer = threading.Timer(timeout, _fire)
        timer.start()
        try:
            return _fetch(conn, sql)
        except sa.exc.OperationalError as exc:
            if fired.is_set():
                raise QueryTimeout(f"query exceeded {timeout:g}s timeout") from exc
            raise
        finally:
            timer.cancel()

    def dispose(self) -> None:
        self.engine.dispose()


def _fetch(conn: sa.Connection, sql: str) -> RawResult:
    start = time.perf_counter()
    result = conn.exec_driver_sql(sql)
    rows = [tuple(r) for r in result.fetchall()] if result.returns_rows else []
    elapsed = time.perf_counter() - start
    columns = list(result.keys()) if result.returns_rows else []
    return RawResult(columns, rows, elapsed)


def _run_in_thread(conn: sa.Connection, sql: str, timeout: float) -> RawResult:
    # drivers without a cancellation hook: stop waiting, leave the worker behind
    pool = ThreadPoolExecutor(max_workers=1)
    future = pool.submit(_fetch, conn, sql)
    try:
        return future.result(timeout=timeout)
    except FutureTimeout as exc:
        raise QueryTimeout(f"query exceeded {timeout:g}s timeout") from exc
    finally:
        pool.shutdown(wait=False)


def _sqlite_query_only(dbapi_conn, _record) -> None:
    cur = dbapi_conn.cursor()
    cur.execute("PRAGMA query_only = ON")
    cur.close()


def _engine_message(exc: Exception) -> str:
    orig = getattr(exc, "orig", None)
    return str(orig) if orig is not None else str(exc)
