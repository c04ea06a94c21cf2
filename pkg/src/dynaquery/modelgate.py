"""Single entry point for every language-model and multimodal-model call.

Requests are fingerprinted over their exact prompt text and the *content* of
any referenced assets, so a recorded transcript can stand in for the live
model and a run replays byte-for-byte.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import random
import threading
import time
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol, Union
from urllib.parse import urlparse

import httpx

logger = logging.getLogger(__name__)

MAX_ASSET_BYTES = 10 * 1024 * 1024
ASSET_TIMEOUT = 10.0
DEFAULT_CONCURRENCY = 4


class GatewayError(Exception):
    pass


class UnmatchedRequestError(GatewayError):
    def __init__(self, fingerprint: str, summary: str = ""):
        msg = f"unmatched request {fingerprint}"
        if summary:
            msg += f" ({summary})"
        super().__init__(msg)
        self.fingerprint = fingerprint


class RetryExhaustedError(GatewayError):
    pass


class AuthError(GatewayError):
    pass


class PayloadTooLargeError(GatewayError):
    pass


class AssetUnavailable(GatewayError):
    def __init__(self, ref: str, reason: str = "asset_unavailable", detail: str = ""):
        super().__init__(f"{reason}: {ref}" + (f" ({detail})" if detail else ""))
        self.ref = ref
        self.reason = reason


class EmptyCompletionError(GatewayError):
    """Raised by callers that cannot work with an empty completion."""


# -- request / response ----------------------------------------------------


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class AssetPart:
    ref: str
    media_kind: str = "image"  # image | document


Part = Union[TextPart, AssetPart]


@dataclass(frozen=True)
class ModelRequest:
    system_prompt: str
    user_content: tuple[Part, ...]
    model_id: str = "default"
    temperature: float = 0.0
    template_id: str | None = None  # provenance only, not part of the fingerprint

    def __post_init__(self):
        object.__setattr__(self, "user_content", tuple(self.user_content))
        if not self.user_content:
            raise ValueError("a model request needs at least one content part")
        if self.temperature != 0.0:
            raise ValueError("framework requests are issued at temperature 0.0")

    @property
    def text(self) -> str:
        return "\n".join(p.text for p in self.user_content if isinstance(p, TextPart))

    @property
    def assets(self) -> list[AssetPart]:
        return [p for p in self.user_content if isinstance(p, AssetPart)]


@dataclass(frozen=True)
class ModelResponse:
    text: str
    backend_id: str
    usage: dict[str, int] | None = None


@dataclass(frozen=True)
class ResolvedAsset:
    ref: str
    media_kind: str
    content: bytes
    mime: str

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.content).hexdigest()


@dataclass(frozen=True)
class PreparedRequest:
    """A request with its assets loaded and its fingerprint computed."""

    request: ModelRequest
    assets: tuple[ResolvedAsset, ...]
    fingerprint: str


# -- assets ----------------------------------------------------------------


class AssetResolver:
    """Loads asset bytes from local paths (relative to ``root``) or http(s) URLs."""

    def __init__(self, root: str | Path | None = None, *, timeout: float = ASSET_TIMEOUT,
                 max_bytes: int = MAX_ASSET_BYTES, client: httpx.Client | None = None):
        self.root = Path(root) if root is not None else None
        self.timeout = timeout
        self.max_bytes = max_bytes
        self._client = client

    def resolve(self, part: AssetPart) -> ResolvedAsset:
        ref = part.ref
        scheme = urlparse(ref).scheme.lower()
        if scheme in ("http", "https"):
            content, mime = self._fetch(ref)
        else:
            content = self._read(ref)
            mime = mimetypes.guess_type(ref)[0] or "application/octet-stream"
        return ResolvedAsset(ref, part.media_kind, content, mime)

    def _read(self, ref: str) -> bytes:
        path = Path(ref[7:] if ref.startswith("file://") else ref)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        try:
            size = path.stat().st_size
            if size > self.max_bytes:
                raise AssetUnavailable(ref, "asset_too_large", f"{size} bytes")
            return path.read_bytes()
        except OSError as exc:
            raise AssetUnavailable(ref, "asset_unavailable", exc.strerror or str(exc)) from exc

    def _fetch(self, url: str) -> tuple[bytes, str]:
        client = self._client or httpx.Client(timeout=self.timeout, follow_redirects=True)
        try:
            with client.stream("GET", url) as resp:
                if resp.status_code != 200:
                    raise AssetUnavailable(url, "asset_unavailable", f"HTTP {resp.status_code}")
                buf = bytearray()
                for chunk in resp.iter_bytes():
                    buf.extend(chunk)
                    if len(buf) > self.max_bytes:
                        raise AssetUnavailable(url, "asset_too_large")
                mime = resp.headers.get("content-type", "").split(";")[0].strip()
                return bytes(buf), mime or mimetypes.guess_type(url)[0] or "application/octet-stream"
        except httpx.HTTPError as exc:
            raise AssetUnavailable(url, "asset_unavailable", str(exc)) from exc
        finally:
            if self._client is None:
                client.close()


# -- fingerprint -----------------------------------------------------------


def _digest(request: ModelRequest, assets: Sequence[ResolvedAsset]) -> str:
    it = iter(assets)
    parts: list[dict[str, str]] = []
    for p in request.user_content:
        if isinstance(p, TextPart):
            parts.append({"text": p.text})
        else:
            parts.append({"asset": p.media_kind, "sha256": next(it).digest})
    payload = {"model": request.model_id, "system": request.system_prompt, "parts": parts}
    raw = json.dumps(payload, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()


def fingerprint(request: ModelRequest, resolver: AssetResolver | None = None) -> str:
    """Stable digest over prompt text, asset contents and model id."""
    resolver = resolver or AssetResolver()
    return _digest(request, [resolver.resolve(a) for a in request.assets])


def summarize(request: ModelRequest, limit: int = 160) -> dict[str, Any]:
    text = request.text
    return {
        "template_id": request.template_id,
        "model_id": request.model_id,
        "text": text if len(text) <= limit else text[:limit] + "...",
        "assets": [a.ref for a in request.assets],
    }


# -- transcripts -----------------------------------------------------------


@dataclass(frozen=True)
class TranscriptEntry:
    fingerprint: str
    request_summary: dict[str, Any]
    response_text: str


class Transcript:
    """Ordered fingerprint -> response log, stored as UTF-8 JSON lines."""

    def __init__(self, entries: Iterable[TranscriptEntry] = (), path: str | Path | None = None):
        self._entries: dict[str, TranscriptEntry] = {}
        self._lock = threading.Lock()
        self.path = Path(path) if path is not None else None
        for e in entries:
            if e.fingerprint in self._entries:
                raise ValueError(f"duplicate fingerprint {e.fingerprint} in transcript")
            self._entries[e.fingerprint] = e

    @classmethod
    def load(cls, path: str | Path) -> Transcript:
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    entries.append(TranscriptEntry(d["fingerprint"], d.get("request_summary", {}),
                                                   d["response_text"]))
        return cls(entries, path=path)

    def get(self, fp: str) -> TranscriptEntry | None:
        return self._entries.get(fp)

    def __contains__(self, fp: str) -> bool:
        return fp in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(list(self._entries.values()))

    def append(self, entry: TranscriptEntry) -> None:
        with self._lock:
            if entry.fingerprint in self._entries:
                return
            self._entries[entry.fingerprint] = entry
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(_entry_line(entry))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self._entries.values():
                fh.write(_entry_line(e))


def _entry_line(e: TranscriptEntry) -> str:
    return json.dumps({"fingerprint": e.fingerprint, "request_summary": e.request_summary,
                       "response_text": e.response_text}, ensure_ascii=False, sort_keys=True) + "\n"


# -- backends --------------------------------------------------------------


class Backend(Protocol):
    backend_id: str

    def complete(self, prepared: PreparedRequest) -> ModelResponse: ...


class ScriptedBackend:
    """Replays a transcript; lookups are read-only."""

    backend_id = "scripted"

    def __init__(self, transcript: Transcript):
        self.transcript = transcript

    def complete(self, prepared: PreparedRequest) -> ModelResponse:
        entry = self.transcript.get(prepared.fingerprint)
        if entry is None:
            raise UnmatchedRequestError(prepared.fingerprint,
                                        str(prepared.request.template_id or ""))
        return ModelResponse(entry.response_text, self.backend_id)


class CallableBackend:
    """Backend computed by a local function; used for stubs and authoring transcripts."""

    def __init__(self, fn: Callable[[PreparedRequest], str], backend_id: str = "callable"):
        self.fn = fn
        self.backend_id = backend_id

    def complete(self, prepared: PreparedRequest) -> ModelResponse:
        return ModelResponse(self.fn(prepared), self.backend_id)


class RecordingBackend:
    """Passes through to ``inner`` and appends each new response to a transcript."""

    def __init__(self, inner: Backend, transcript: Transcript):
        self.inner = inner
        self.transcript = transcript
        self.backend_id = f"record:{inner.backend_id}"

    def complete(self, prepared: PreparedRequest) -> ModelResponse:
        hit = self.transcript.get(prepared.fingerprint)
        if hit is not None:
            return ModelResponse(hit.response_text, self.backend_id)
        resp = self.inner.complete(prepared)
        self.transcript.append(TranscriptEntry(prepared.fingerprint,
                                               summarize(prepared.request), resp.text))
        return resp


class HttpBackend:
    """OpenAI-style chat-completions endpoint with bounded retries."""

    backend_id = "http"
    RETRY_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}

    def __init__(self, url: str, api_key: str | None = None, *, attempts: int = 3,
                 base_delay: float = 1.0, timeout: float = 120.0,
                 client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.url = url
        self.api_key = api_key
        self.attempts = attempts
        self.base_delay = base_delay
        self.client = client or httpx.Client(timeout=timeout)
        self.sleep = sleep

    @classmethod
    def from_env(cls, **kw) -> HttpBackend:
        url = os.environ.get("DQ_MODEL_URL")
        if not url:
            raise GatewayError("DQ_MODEL_URL is not set")
        return cls(url, os.environ.get("DQ_API_KEY"), **kw)

    def payload(self, prepared: PreparedRequest) -> dict[str, Any]:
        req = prepared.request
        content: list[dict[str, Any]] = []
        it = iter(prepared.assets)
        for p in req.user_content:
            if isinstance(p, TextPart):
                content.append({"type": "text", "text": p.text})
                continue
            asset = next(it)
            data = base64.b64encode(asset.content).decode("ascii")
            if asset.media_kind == "image":
                content.append({"type": "image_url",
                                "image_url": {"url": f"data:{asset.mime};base64,{data}"}})
            else:
                try:
                    content.append({"type": "text",
                                    "text": f"Document {asset.ref}:\n{asset.content.decode('utf-8')}"})
                except UnicodeDecodeError:
                    content.append({"type": "file", "file": {
                        "filename": Path(asset.ref).name,
                        "file_data": f"data:{asset.mime};base64,{data}"}})
        return {
            "model": req.model_id,
            "temperature": req.temperature,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": content},
            ],
        }

    def complete(self, prepared: PreparedRequest) -> ModelResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = self.payload(prepared)
        last = ""
        for attempt in range(self.attempts):
            try:
                resp = self.client.post(self.url, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
            else:
                if resp.status_code == 200:
                    return self._parse(resp)
                if resp.status_code in (401, 403):
                    raise AuthError(f"model endpoint rejected credentials (HTTP {resp.status_code})")
                if resp.status_code == 413:
                    raise PayloadTooLargeError("model endpoint rejected payload size (HTTP 413)")
                if resp.status_code not in self.RETRY_STATUS:
                    raise GatewayError(f"model endpoint error HTTP {resp.status_code}: {resp.text[:200]}")
                last = f"HTTP {resp.status_code}"
            if attempt + 1 < self.attempts:
                delay = self.base_delay * (2 ** attempt)
                self.sleep(delay * (1.0 + random.random() * 0.25))
        raise RetryExhaustedError(f"gave up after {self.attempts} attempts: {last}")

    def _parse(self, resp: httpx.Response) -> ModelResponse:
        try:
            data = resp.json()
            content = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed completion payload: {exc}") from exc
        if isinstance(content, list):
            content = "".join(c.get("text", "") for c in content if isinstance(c, dict))
        usage = data.get("usage")
        if isinstance(usage, dict):
            usage = {k: v for k, v in usage.items() if isinstance(v, int)}
        else:
            usage = None
        return ModelResponse(content or "", self.backend_id, usage)


# -- gateway ---------------------------------------------------------------


@dataclass
class CallRecord:
    fingerprint: str
    template_id: str | None


class Gateway:
    """Resolves assets, fingerprints, bounds concurrency and delegates to a backend."""

    def __init__(self, backend: Backend, *, model_id: str = "default",
                 resolver: AssetResolver | None = None,
                 max_concurrency: int = DEFAULT_CONCURRENCY):
        self.backend = backend
        self.model_id = model_id
        self.resolver = resolver or AssetResolver()
        self.max_concurrency = max_concurrency
        self._sem = threading.BoundedSemaphore(max_concurrency)
        self._log_lock = threading.Lock()
        self.calls: list[CallRecord] = []

    def request(self, system_prompt: str, parts: Sequence[Part | str], *,
                template_id: str | None = None) -> ModelRequest:
        content = tuple(TextPart(p) if isinstance(p, str) else p for p in parts)
        return ModelRequest(system_prompt, content, model_id=self.model_id, template_id=template_id)

    def prepare(self, request: ModelRequest) -> PreparedRequest:
        assets = tuple(self.resolver.resolve(a) for a in request.assets)
        return PreparedRequest(request, assets, _digest(request, assets))

    def complete(self, request: ModelRequest) -> ModelResponse:
        prepared = self.prepare(request)
        with self._log_lock:
            self.calls.append(CallRecord(prepared.fingerprint, request.template_id))
        with self._sem:
            resp = self.backend.complete(prepared)
        if not resp.text.strip():
            logger.warning("empty completion for %s (%s)", prepared.fingerprint[:12],
                           request.template_id)
        return resp

    def count(self, template_id: str | None = None) -> int:
        with self._log_lock:
            if template_id is None:
                return len(self.calls)
            return sum(1 for c in self.calls if c.template_id == template_id)


def scripted_gateway(transcript: Transcript | str | Path, **kw) -> Gateway:
    if not isinstance(transcript, Transcript):
        transcript = Transcript.load(transcript)
    return Gateway(ScriptedBackend(transcript), **kw)
