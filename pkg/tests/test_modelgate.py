from __future__ import annotations

import json
import threading
import time

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynaquery.modelgate import (AssetPart, AssetResolver, AssetUnavailable, AuthError,
                                 CallableBackend, Gateway, GatewayError, HttpBackend, ModelRequest,
                                 PayloadTooLargeError, RecordingBackend, RetryExhaustedError,
                                 ScriptedBackend, TextPart, Transcript, TranscriptEntry,
                                 UnmatchedRequestError, fingerprint)


def req(text="hello", system="sys", *parts, model="m") -> ModelRequest:
    return ModelRequest(system, (TextPart(text), *parts), model_id=model)


def test_request_invariants():
    with pytest.raises(ValueError):
        ModelRequest("s", ())
    with pytest.raises(ValueError):
        ModelRequest("s", (TextPart("x"),), temperature=0.7)


def test_identical_requests_identical_digests():
    assert fingerprint(req()) == fingerprint(req())


def test_one_character_changes_digest():
    assert fingerprint(req("hello")) != fingerprint(req("hellp"))


def test_model_id_and_system_are_part_of_digest():
    assert fingerprint(req(model="a")) != fingerprint(req(model="b"))
    assert fingerprint(req(system="a")) != fingerprint(req(system="b"))


def test_template_id_is_not_part_of_digest():
    a = ModelRequest("s", (TextPart("x"),), template_id="one")
    b = ModelRequest("s", (TextPart("x"),), template_id="two")
    assert fingerprint(a) == fingerprint(b)


def test_same_path_different_bytes_different_digest(tmp_path):
    img = tmp_path / "pic.png"
    resolver = AssetResolver(tmp_path)
    r = req("describe", "sys", AssetPart("pic.png"))
    img.write_bytes(b"\x89PNG first")
    first = fingerprint(r, resolver)
    img.write_bytes(b"\x89PNG second")
    second = fingerprint(r, resolver)
    assert first != second
    img.write_bytes(b"\x89PNG first")
    assert fingerprint(r, resolver) == first


def test_unreadable_asset_is_an_error(tmp_path):
    with pytest.raises(AssetUnavailable) as err:
        fingerprint(req("x", "s", AssetPart("nope.png")), AssetResolver(tmp_path))
    assert err.value.ref == "nope.png" and err.value.reason == "asset_unavailable"


def test_oversized_asset(tmp_path):
    (tmp_path / "big.png").write_bytes(b"x" * 100)
    with pytest.raises(AssetUnavailable) as err:
        AssetResolver(tmp_path, max_bytes=10).resolve(AssetPart("big.png"))
    assert err.value.reason == "asset_too_large"


def test_http_asset_404():
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(404)))
    with pytest.raises(AssetUnavailable) as err:
        AssetResolver(client=client).resolve(AssetPart("https://cdn.example/x.png"))
    assert "404" in str(err.value)


def test_http_asset_content():
    client = httpx.Client(transport=httpx.MockTransport(
        lambda r: httpx.Response(200, content=b"abc", headers={"content-type": "image/jpeg"})))
    asset = AssetResolver(client=client).resolve(AssetPart("https://cdn.example/x"))
    assert asset.content == b"abc" and asset.mime == "image/jpeg"


# -- scripted / record / replay ------------------------------------------------


def test_scripted_hit_and_miss():
    r = req("q")
    fp = fingerprint(r)
    gw = Gateway(ScriptedBackend(Transcript([TranscriptEntry(fp, {}, "recorded  text\n")])),
                 model_id="m")
    assert gw.complete(r).text == "recorded  text\n"
    with pytest.raises(UnmatchedRequestError) as err:
        gw.complete(req("other"))
    assert fingerprint(req("other")) in str(err.value)


def test_duplicate_fingerprints_rejected():
    with pytest.raises(ValueError):
        Transcript([TranscriptEntry("a", {}, "x"), TranscriptEntry("a", {}, "y")])


def test_record_then_replay_roundtrip(tmp_path):
    path = tmp_path / "t.jsonl"
    transcript = Transcript(path=path)
    calls = []

    def live(prepared):
        calls.append(prepared.fingerprint)
        return f"answer to {prepared.request.text} é"

    rec = Gateway(RecordingBackend(CallableBackend(live), transcript), model_id="m")
    texts = [rec.complete(req(t)).text for t in ("a", "b", "a")]
    assert len(calls) == 2  # repeat served from the transcript
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    assert set(json.loads(lines[0])) == {"fingerprint", "request_summary", "response_text"}

    replay = Gateway(ScriptedBackend(Transcript.load(path)), model_id="m")
    assert [replay.complete(req(t)).text for t in ("a", "b", "a")] == texts


def test_save_and_load_preserve_order(tmp_path):
    t = Transcript([TranscriptEntry(str(i), {"i": i}, f"r{i}") for i in (3, 1, 2)])
    t.save(tmp_path / "x.jsonl")
    assert [e.fingerprint for e in Transcript.load(tmp_path / "x.jsonl")] == ["3", "1", "2"]


def test_asset_failure_counts_no_call(tmp_path):
    gw = Gateway(CallableBackend(lambda p: "x"), resolver=AssetResolver(tmp_path))
    with pytest.raises(AssetUnavailable):
        gw.complete(req("x", "s", AssetPart("missing.png")))
    assert gw.count() == 0


def test_gateway_sends_prompt_unchanged():
    seen = []
    gw = Gateway(CallableBackend(lambda p: seen.append(p.request) or "ok"))
    r = gw.request("  system\n", ["  text with trailing space  "], template_id="t")
    gw.complete(r)
    assert seen[0] is r and seen[0].text == "  text with trailing space  "
    assert gw.count("t") == 1 and gw.count("other") == 0


def test_empty_completion_is_a_valid_response():
    assert Gateway(CallableBackend(lambda p: "")).complete(req()).text == ""


def test_concurrency_limit():
    live, peak, lock = [0], [0], threading.Lock()

    def slow(prepared):
        with lock:
            live[0] += 1
            peak[0] = max(peak[0], live[0])
        time.sleep(0.02)
        with lock:
            live[0] -= 1
        return "ok"

    gw = Gateway(CallableBackend(slow), max_concurrency=2)
    threads = [threading.Thread(target=gw.complete, args=(req(str(i)),)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak[0] <= 2 and gw.count() == 8


# -- HTTP backend ---------------------------------------------------------------


def _completion(text: str) -> httpx.Response:
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}],
                                     "usage": {"prompt_tokens": 3, "completion_tokens": 1}})


def _http(handler, **kw) -> tuple[HttpBackend, list[float]]:
    sleeps: list[float] = []
    backend = HttpBackend("https://model.example/v1/chat", "key",
                          client=httpx.Client(transport=httpx.MockTransport(handler)),
                          sleep=sleeps.append, **kw)
    return backend, sleeps


def test_http_retries_transient_then_succeeds():
    statuses = iter([503, 429, 200])

    def handler(request):
        status = next(statuses)
        return _completion("fine") if status == 200 else httpx.Response(status)

    backend, sleeps = _http(handler)
    resp = Gateway(backend).complete(req())
    assert resp.text == "fine" and resp.usage == {"prompt_tokens": 3, "completion_tokens": 1}
    assert len(sleeps) == 2 and 1.0 <= sleeps[0] <= 1.25 and 2.0 <= sleeps[1] <= 2.5


def test_http_exhausted_retries():
    backend, sleeps = _http(lambda r: httpx.Response(500))
    with pytest.raises(RetryExhaustedError):
        Gateway(backend).complete(req())
    assert len(sleeps) == 2


def test_http_transport_errors_are_retried():
    def handler(request):
        raise httpx.ConnectError("refused")

    backend, _ = _http(handler)
    with pytest.raises(RetryExhaustedError):
        Gateway(backend).complete(req())


def test_http_auth_and_size_errors_are_distinct():
    backend, sleeps = _http(lambda r: httpx.Response(401))
    with pytest.raises(AuthError):
        Gateway(backend).complete(req())
    backend, _ = _http(lambda r: httpx.Response(413))
    with pytest.raises(PayloadTooLargeError):
        Gateway(backend).complete(req())
    assert sleeps == []
    assert not issubclass(AuthError, RetryExhaustedError)


def test_http_payload_embeds_assets(tmp_path):
    (tmp_path / "a.png").write_bytes(b"\x89PNGdata")
    (tmp_path / "d.txt").write_text("spec sheet", encoding="utf-8")
    bodies = []

    def handler(request):
        bodies.append(json.loads(request.content))
        assert request.headers["authorization"] == "Bearer key"
        return _completion("ok")

    backend, _ = _http(handler)
    gw = Gateway(backend, model_id="vision", resolver=AssetResolver(tmp_path))
    gw.complete(gw.request("sys", ["look", AssetPart("a.png"), AssetPart("d.txt", "document")]))
    body = bodies[0]
    assert body["model"] == "vision" and body["temperature"] == 0.0
    content = body["messages"][1]["content"]
    assert content[0] == {"type": "text", "text": "look"}
    assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")
    assert "spec sheet" in content[2]["text"]


def test_http_malformed_payload():
    backend, _ = _http(lambda r: httpx.Response(200, json={"nope": 1}))
    with pytest.raises(GatewayError):
        Gateway(backend).complete(req())


@settings(max_examples=50, deadline=None)
@given(st.text(min_size=1), st.text())
def test_fingerprint_is_deterministic(text, system):
    r = ModelRequest(system, (TextPart(text),))
    assert fingerprint(r) == fingerprint(ModelRequest(system, (TextPart(text),)))
