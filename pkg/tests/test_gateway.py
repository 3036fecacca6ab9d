from __future__ import annotations

import json
import threading
import time

import httpx
import pytest

from helpers import scripted
from kgenrich.gateway import (
    BackendUnavailable,
    ChatRequest,
    ChatResponse,
    Gateway,
    OpenAICompatibleBackend,
    ScriptedBackend,
    ScriptGapError,
    ScriptRule,
    TransientError,
)


def req(payload="hello world", tag="RA", **kw):
    return ChatRequest("system prompt here", payload, tag, **kw)


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest("", "x", "RA")
    with pytest.raises(ValueError):
        ChatRequest("s", "x", "RA", temperature=-1)
    with pytest.raises(ValueError):
        ChatRequest("s", "x", "RA", max_tokens=0)


def test_first_matching_rule_wins():
    gw = scripted([
        {"tag": "RA", "match": "hello", "response": "first"},
        {"tag": "RA", "match": "hello", "response": "second"},
        {"tag": "*", "match": "world", "response": "wild"},
    ])
    assert gw.complete(req()).text == "first"
    assert gw.complete(req("only world", tag="SA")).text == "wild"


def test_regex_rules_and_dict_responses():
    rule = ScriptRule.from_dict({"tag": "EEA", "match": r"drug\d+", "regex": True,
                                 "response": {"entities": []}})
    backend = ScriptedBackend([rule])
    assert json.loads(backend.send(req("a drug42 b", tag="EEA")).text) == {"entities": []}


def test_script_gap_raises_unless_default():
    with pytest.raises(ScriptGapError):
        scripted([]).complete(req())
    assert scripted([], default="{}").complete(req()).text == "{}"


def test_rules_file_skips_comments(tmp_path):
    p = tmp_path / "rules.jsonl"
    p.write_text('# comment\n\n{"tag": "RA", "match": "", "response": "ok"}\n')
    assert ScriptedBackend.from_file(p).send(req()).text == "ok"
    p.write_text('{"tag": "RA"}\n')
    with pytest.raises(ValueError):
        ScriptedBackend.from_file(p)


def test_token_counts_default_to_whitespace_split():
    gw = scripted([{"tag": "RA", "match": "", "response": "one two three"}])
    r = gw.complete(req("a b"))
    assert (r.prompt_tokens, r.completion_tokens) == (5, 3)


class Flaky:
    backend_id = "flaky"

    def __init__(self, failures):
        self.failures = failures
        self.calls = 0

    def send(self, r):
        self.calls += 1
        if self.calls <= self.failures:
            raise TransientError("HTTP 503")
        return ChatResponse("ok", 2, 1, 0.0, self.backend_id)


def test_retry_backoff_schedule_and_single_ledger_row():
    slept = []
    backend = Flaky(failures=2)
    gw = Gateway(backend, retries=3, sleep=slept.append)
    assert gw.complete(req()).text == "ok"
    assert slept == [1.0, 2.0]
    assert len(gw.calls) == 1
    assert gw.calls[0].attempts == 3


def test_gives_up_after_retries():
    slept = []
    gw = Gateway(Flaky(failures=10), retries=3, sleep=slept.append)
    with pytest.raises(BackendUnavailable):
        gw.complete(req())
    assert slept == [1.0, 2.0, 4.0]
    assert gw.calls == []


def test_model_override_per_tag():
    seen = []

    class Recorder:
        backend_id = "rec"

        def send(self, r):
            seen.append(r.model)
            return ChatResponse("x", 1, 1, 0.0, "rec")

    gw = Gateway(Recorder(), models={"CRA": "big-model"})
    gw.complete(req(tag="CRA"))
    gw.complete(req(tag="RA"))
    assert seen == ["big-model", None]


def test_in_flight_limit():
    active, peak = 0, 0
    lock = threading.Lock()

    class Slow:
        backend_id = "slow"

        def send(self, r):
            nonlocal active, peak
            with lock:
                active += 1
                peak = max(peak, active)
            time.sleep(0.02)
            with lock:
                active -= 1
            return ChatResponse("x", 1, 1, 0.0, "slow")

    gw = Gateway(Slow(), max_in_flight=2)
    threads = [threading.Thread(target=gw.complete, args=(req(),)) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak <= 2
    assert len(gw.calls) == 8


def test_ledger_per_tag_sums_to_total():
    gw = scripted([{"tag": "*", "match": "", "response": "a b c"}])
    for tag in ("RA", "SA", "RA", "EEA"):
        gw.complete(req("x y", tag=tag))
    rep = gw.ledger_report()
    for field in ("prompt_tokens", "completion_tokens", "calls", "attempts"):
        assert sum(t[field] for t in rep["by_tag"].values()) == rep["total"][field]
    assert rep["by_tag"]["RA"]["calls"] == 2
    assert gw.calls_for("EEA") == 1


def _transport(handler):
    return httpx.MockTransport(handler)


def test_openai_backend_parses_completion(monkeypatch):
    monkeypatch.setenv("KGENRICH_API_KEY", "sekret")
    captured = {}

    def handler(request):
        captured["auth"] = request.headers.get("authorization")
        captured["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"content": "{\"ok\": 1}"}}],
                                         "usage": {"prompt_tokens": 11, "completion_tokens": 4}})

    b = OpenAICompatibleBackend("http://llm.test/v1", "m1", transport=_transport(handler))
    r = b.send(req(temperature=0.2))
    assert r.text == '{"ok": 1}'
    assert (r.prompt_tokens, r.completion_tokens) == (11, 4)
    assert captured["auth"] == "Bearer sekret"
    assert captured["body"]["model"] == "m1"
    assert captured["body"]["messages"][0]["role"] == "system"
    assert captured["body"]["temperature"] == 0.2


@pytest.mark.parametrize("status,exc", [(429, TransientError), (503, TransientError),
                                        (401, BackendUnavailable), (404, BackendUnavailable)])
def test_openai_backend_status_mapping(status, exc):
    b = OpenAICompatibleBackend("http://llm.test/v1", "m1",
                                transport=_transport(lambda r: httpx.Response(status, text="nope")))
    with pytest.raises(exc):
        b.send(req())


def test_openai_backend_malformed_body():
    b = OpenAICompatibleBackend("http://llm.test/v1", "m1",
                                transport=_transport(lambda r: httpx.Response(200, json={"x": 1})))
    with pytest.raises(BackendUnavailable):
        b.send(req())


def test_openai_backend_transport_error_is_transient():
    def handler(request):
        raise httpx.ConnectError("refused")

    b = OpenAICompatibleBackend("http://llm.test/v1", "m1", transport=_transport(handler))
    with pytest.raises(TransientError):
        b.send(req())


def test_gateway_retries_live_backend_then_succeeds():
    statuses = iter([503, 429, 200])

    def handler(request):
        s = next(statuses)
        if s != 200:
            return httpx.Response(s)
        return httpx.Response(200, json={"choices": [{"message": {"content": "fine"}}]})

    gw = Gateway(OpenAICompatibleBackend("http://llm.test/v1", "m", transport=_transport(handler)),
                 sleep=lambda s: None)
    assert gw.complete(req()).text == "fine"
    assert gw.calls[0].attempts == 3


def test_ledger_hand_sums():
    gw = scripted([
        {"tag": "EEA", "match": "one", "response": "a", "prompt_tokens": 10, "completion_tokens": 20},
        {"tag": "EEA", "match": "two", "response": "b", "prompt_tokens": 5, "completion_tokens": 5},
        {"tag": "RA", "match": "three", "response": "c", "prompt_tokens": 1, "completion_tokens": 0},
    ])
    assert scripted([]).ledger_report() == {"by_tag": {}, "total": {
        "prompt_tokens": 0, "completion_tokens": 0, "calls": 0, "attempts": 0, "latency": 0.0}}
    for payload, tag in (("one", "EEA"), ("two", "EEA"), ("three", "RA")):
        gw.complete(req(payload, tag=tag))
    rep = gw.ledger_report()
    assert (rep["total"]["prompt_tokens"], rep["total"]["completion_tokens"]) == (16, 25)
    assert (rep["by_tag"]["EEA"]["prompt_tokens"], rep["by_tag"]["EEA"]["completion_tokens"]) == (15, 25)


def test_rule_echoes_canned_reply_verbatim():
    canned = '{"entities": [{"mention": "Aspirin", "type": "Drug"}]}'
    gw = scripted([{"tag": "EEA", "match": "Aspirin", "response": canned}])
    assert gw.complete(req("Aspirin eases pain", tag="EEA")).text == canned
