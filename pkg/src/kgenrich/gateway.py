"""LLM gateway: live OpenAI-compatible client, scripted backend, retries, token ledger."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol

import httpx

logger = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "KGENRICH_API_KEY"
RETRY_STATUS = {429, 500, 502, 503, 504}


class BackendError(Exception):
    """Base for failures that stop a pipeline run."""


class BackendUnavailable(BackendError):
    pass


class ScriptGapError(BackendError):
    """Scripted backend had no rule for a request and no default."""


class TransientError(Exception):
    """Raised by backends for failures worth retrying."""


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_payload: str
    tag: str
    temperature: float = 0.0
    max_tokens: int = 1024
    model: str | None = None

    def __post_init__(self):
        if not self.system_prompt or not self.user_payload:
            raise ValueError("prompts must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass
class ChatResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency: float
    backend_id: str


class Backend(Protocol):
    backend_id: str

    def send(self, req: ChatRequest) -> ChatResponse: ...


def count_tokens(text: str) -> int:
    return len(text.split())


@dataclass
class ScriptRule:
    tag: str
    match: str
    response: str
    regex: bool = False
    prompt_tokens: int | None = None
    completion_tokens: int | None = None

    def matches(self, req: ChatRequest) -> bool:
        if self.tag not in ("*", req.tag):
            return False
        if self.regex:
            return re.search(self.match, req.user_payload) is not None
        return self.match in req.user_payload

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptRule":
        resp = d["response"]
        if not isinstance(resp, str):
            resp = json.dumps(resp, ensure_ascii=False)
        return cls(
            tag=d.get("tag", "*"),
            match=d.get("match", ""),
            response=resp,
            regex=bool(d.get("regex", False)),
            prompt_tokens=d.get("prompt_tokens"),
            completion_tokens=d.get("completion_tokens"),
        )


class ScriptedBackend:
    """Deterministic stand-in for a model: first matching rule wins."""

    backend_id = "scripted"

    def __init__(self, rules: Iterable[ScriptRule | dict] = (), default: str | None = None):
        self.rules = [r if isinstance(r, ScriptRule) else ScriptRule.from_dict(r) for r in rules]
        self.default = default

    @classmethod
    def from_file(cls, path: str | Path, default: str | None = None) -> "ScriptedBackend":
        rules = []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rules.append(ScriptRule.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{n}: bad rule: {exc}") from exc
        return cls(rules, default)

    def send(self, req: ChatRequest) -> ChatResponse:
        for rule in self.rules:
            if rule.matches(req):
                text, pt, ct = rule.response, rule.prompt_tokens, rule.completion_tokens
                break
        else:
            if self.default is None:
                raise ScriptGapError(f"no scripted rule for tag={req.tag!r}: {req.user_payload[:120]!r}")
            text, pt, ct = self.default, None, None
        if pt is None:
            pt = count_tokens(req.system_prompt) + count_tokens(req.user_payload)
        if ct is None:
            ct = count_tokens(text)
        return ChatResponse(text, pt, ct, 0.0, self.backend_id)


class OpenAICompatibleBackend:
    """Chat completions over HTTP(S). Raises TransientError on 429/5xx/transport faults."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.model = model
        self.backend_id = f"openai-compatible:{model}"
        key = api_key if api_key is not None else os.environ.get(api_key_env, "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self.client = httpx.Client(base_url=base_url.rstrip("/"), headers=headers,
                                   timeout=timeout, transport=transport)

    def send(self, req: ChatRequest) -> ChatResponse:
        body = {
            "model": req.model or self.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_payload},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        try:
            resp = self.client.post("/chat/completions", json=body)
        except httpx.TransportError as exc:
            raise TransientError(str(exc)) from exc
        if resp.status_code in RETRY_STATUS:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"malformed completion body: {exc}") from exc
        usage = data.get("usage") or {}
        return ChatResponse(
            text,
            int(usage.get("prompt_tokens", 0)),
            int(usage.get("completion_tokens", 0)),
            0.0,
            self.backend_id,
        )


@dataclass
class TagTotals:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    calls: int = 0
    attempts: int = 0
    latency: float = 0.0

    def to_dict(self) -> dict:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "calls": self.calls,
            "attempts": self.attempts,
            "latency": self.latency,
        }


@dataclass
class CallRecord:
    tag: str
    prompt_tokens: int
    completion_tokens: int
    attempts: int
    latency: float


class Gateway:
    """Single choke point for model calls.

    Thread-safe; at most ``max_in_flight`` requests are outstanding at once.
    A logical call retried k times is recorded once with ``attempts=k+1`` and
    the summed latency of every attempt.
    """

    def __init__(
        self,
        backend: Backend,
        retries: int = 3,
        backoff: Iterable[float] = (1.0, 2.0, 4.0),
        max_in_flight: int = 4,
        sleep: Callable[[float], None] = time.sleep,
        models: dict[str, str] | None = None,
    ):
        self.backend = backend
        self.retries = retries
        self.backoff = list(backoff)
        self.sleep = sleep
        self.models = dict(models or {})
        self._sem = threading.BoundedSemaphore(max(1, max_in_flight))
        self._lock = threading.Lock()
        self.calls: list[CallRecord] = []

    def _delay(self, attempt: int) -> float:
        if not self.backoff:
            return 0.0
        return self.backoff[min(attempt, len(self.backoff) - 1)]

    def complete(self, req: ChatRequest) -> ChatResponse:
        if req.model is None and req.tag in self.models:
            req = ChatRequest(req.system_prompt, req.user_payload, req.tag,
                              req.temperature, req.max_tokens, self.models[req.tag])
        attempts = 0
        latency = 0.0
        with self._sem:
            while True:
                attempts += 1
                start = time.perf_counter()
                try:
                    resp = self.backend.send(req)
                    latency += time.perf_counter() - start
                    break
                except TransientError as exc:
                    latency += time.perf_counter() - start
                    if attempts > self.retries:
                        raise BackendUnavailable(
                            f"{req.tag}: gave up after {attempts} attempts: {exc}"
                        ) from exc
                    delay = self._delay(attempts - 1)
                    logger.warning("%s: transient failure (%s), retrying in %.1fs", req.tag, exc, delay)
                    self.sleep(delay)
        resp.latency = latency
        with self._lock:
            self.calls.append(CallRecord(req.tag, resp.prompt_tokens, resp.completion_tokens,
                                         attempts, latency))
        return resp

    def ledger_report(self) -> dict:
        """Per-tag and global totals of tokens, calls, attempts and latency."""
        with self._lock:
            calls = list(self.calls)
        by_tag: dict[str, TagTotals] = {}
        total = TagTotals()
        for c in calls:
            for t in (by_tag.setdefault(c.tag, TagTotals()), total):
                t.prompt_tokens += c.prompt_tokens
                t.completion_tokens += c.completion_tokens
                t.calls += 1
                t.attempts += c.attempts
                t.latency += c.latency
        return {
            "by_tag": {tag: by_tag[tag].to_dict() for tag in sorted(by_tag)},
            "total": total.to_dict(),
        }

    def calls_for(self, tag: str) -> int:
        with self._lock:
            return sum(1 for c in self.calls if c.tag == tag)
