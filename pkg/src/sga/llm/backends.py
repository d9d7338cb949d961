"""Chat-completion backends.

``RemoteBackend`` speaks the OpenAI-compatible ``/chat/completions`` wire
protocol over httpx. ``MockBackend`` is a pure function of its rule set
and the request, used by every test.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import httpx

from ..core import ToolCall, ToolSchema, canonical_json

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant", "tool")


class BackendError(RuntimeError):
    """Any failure talking to a chat or embedding backend."""


class Timeout(BackendError):
    pass


class RateLimited(BackendError):
    pass


class MalformedResponse(BackendError):
    pass


@dataclass(frozen=True)
class Sampling:
    temperature: float = 0.6
    top_p: float = 0.95
    top_k: int = 20
    min_p: float = 0.0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Mapping[str, str], ...]
    tool_declarations: tuple[Any, ...] = ()
    sampling: Sampling = Sampling()
    max_context: int = 32768
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for m in self.messages:
            if m.get("role") not in ROLES:
                raise ValueError(f"bad message role {m.get('role')!r}")

    @classmethod
    def build(cls, messages: Iterable[Mapping[str, str]], tools: Iterable[Any] = (), **kw) -> "ChatRequest":
        return cls(tuple(dict(m) for m in messages), tuple(tools), **kw)

    def declarations(self) -> list[dict]:
        return [t.to_openai() if isinstance(t, ToolSchema) else dict(t) for t in self.tool_declarations]


@dataclass(frozen=True)
class ChatResponse:
    content: str = ""
    tool_calls: tuple[ToolCall, ...] = ()
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def to_dict(self) -> dict:
        return {
            "content": self.content,
            "tool_calls": [{"name": c.tool_name, "arguments": c.args} for c in self.tool_calls],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ChatResponse":
        calls = tuple(ToolCall.of(c["name"], c.get("arguments") or {}) for c in data.get("tool_calls", []))
        return cls(data.get("content") or "", calls)


class ChatBackend(Protocol):
    def complete(self, req: ChatRequest) -> ChatResponse: ...


def count_tokens(text: str) -> int:
    """Whitespace token approximation."""
    return len(text.split())


def request_digest(req: ChatRequest) -> str:
    body = {"messages": list(req.messages), "tools": [d["function"]["name"] for d in req.declarations()]}
    return hashlib.sha256(canonical_json(body).encode("utf-8")).hexdigest()


def _check(req: ChatRequest) -> None:
    if not req.messages:
        raise ValueError("a chat request needs at least one message")


# ---------------------------------------------------------------------------
# Mock


Handler = Callable[[ChatRequest], "ChatResponse | None"]


@dataclass(frozen=True)
class MockRule:
    """Canned response selected by exact request digest or by substring match."""

    response: ChatResponse
    digest: str | None = None
    contains: str | None = None

    def matches(self, req: ChatRequest, digest: str) -> bool:
        if self.digest is not None:
            return self.digest == digest
        if self.contains is not None:
            return any(self.contains in m.get("content", "") for m in req.messages)
        return True


class MockBackend:
    """Deterministic backend: digest rules first, then handlers, then the default.

    Rule files are JSON lists of ``{"digest"|"contains": ..., "response":
    {"content": ..., "tool_calls": [{"name", "arguments"}]}}``.
    """

    def __init__(self, rules: Sequence[MockRule] = (), handlers: Sequence[Handler] = (),
                 default: ChatResponse | None = None):
        self.rules = tuple(rules)
        self.handlers = tuple(handlers)
        self.default = default

    @classmethod
    def from_json(cls, path: str | Path, handlers: Sequence[Handler] = ()) -> "MockBackend":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = [
            MockRule(ChatResponse.from_dict(r["response"]), r.get("digest"), r.get("contains"))
            for r in raw
        ]
        return cls(rules, handlers)

    def complete(self, req: ChatRequest) -> ChatResponse:
        _check(req)
        digest = request_digest(req)
        resp = None
        for rule in self.rules:
            if rule.matches(req, digest):
                resp = rule.response
                break
        if resp is None:
            for handler in self.handlers:
                resp = handler(req)
                if resp is not None:
                    break
        if resp is None:
            if self.default is None:
                raise BackendError(f"mock has no rule for request {digest[:12]}")
            resp = self.default
        prompt = sum(count_tokens(m.get("content", "")) for m in req.messages)
        completion = count_tokens(resp.content) + sum(
            count_tokens(canonical_json(c.to_dict())) for c in resp.tool_calls
        )
        return ChatResponse(resp.content, resp.tool_calls, prompt, completion)


# ---------------------------------------------------------------------------
# Remote


class RemoteBackend:
    """OpenAI-compatible client with bounded retries and in-flight limit."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None, *,
                 client: httpx.Client | None = None, max_attempts: int = 3,
                 backoff: float = 1.0, max_in_flight: int = 4, timeout: float = 60.0,
                 sleep: Callable[[float], None] = time.sleep):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.client = client or httpx.Client(timeout=timeout)
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._sleep = sleep

    @classmethod
    def from_env(cls, **kw) -> "RemoteBackend":
        try:
            base = os.environ["SGA_API_BASE"]
            model = os.environ["SGA_MODEL"]
        except KeyError as exc:
            raise BackendError(f"missing environment variable {exc.args[0]}") from None
        return cls(base, model, os.environ.get("SGA_API_KEY"), **kw)

    def _headers(self) -> dict[str, str]:
        h = {"Content-Type": "application/json"}
        if self.api_key:
            h["Authorization"] = f"Bearer {self.api_key}"
        return h

    def request_body(self, req: ChatRequest) -> dict:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [dict(m) for m in req.messages],
            "temperature": req.sampling.temperature,
            "top_p": req.sampling.top_p,
            "top_k": req.sampling.top_k,
            "min_p": req.sampling.min_p,
        }
        decls = req.declarations()
        if decls:
            body["tools"] = decls
        body.update(req.extra)
        return body

    def post(self, path: str, body: dict) -> dict:
        """POST with retry on timeouts, 429 and 5xx; exponential backoff."""
        last: BackendError | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    r = self.client.post(self.base_url + path, json=body, headers=self._headers())
            except httpx.TimeoutException as exc:
                last = Timeout(str(exc))
                continue
            except httpx.HTTPError as exc:
                raise BackendError(str(exc)) from exc
            if r.status_code == 429:
                last = RateLimited(r.text[:200])
                continue
            if r.status_code >= 500:
                last = BackendError(f"HTTP {r.status_code}: {r.text[:200]}")
                continue
            if r.status_code >= 400:
                raise BackendError(f"HTTP {r.status_code}: {r.text[:200]}")
            try:
                return r.json()
            except ValueError as exc:
                raise MalformedResponse("response body is not JSON") from exc
        assert last is not None
        raise last

    def complete(self, req: ChatRequest) -> ChatResponse:
        _check(req)
        data = self.post("/chat/completions", self.request_body(req))
        return parse_chat_response(data)


def parse_chat_response(data: Mapping[str, Any]) -> ChatResponse:
    try:
        message = data["choices"][0]["message"]
    except (KeyError, IndexError, TypeError):
        raise MalformedResponse("missing choices[0].message") from None
    calls = []
    for tc in message.get("tool_calls") or []:
        try:
            fn = tc["function"]
            args = fn.get("arguments") or "{}"
            args = json.loads(args) if isinstance(args, str) else args
            if not isinstance(args, dict):
                raise ValueError("arguments must be an object")
            calls.append(ToolCall.of(fn["name"], args))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"bad tool call: {exc}") from None
    usage = data.get("usage") or {}
    return ChatResponse(
        message.get("content") or "",
        tuple(calls),
        int(usage.get("prompt_tokens", 0)),
        int(usage.get("completion_tokens", 0)),
    )


class CountingBackend:
    """Wraps a backend and tallies calls and token usage."""

    def __init__(self, inner: ChatBackend):
        self.inner = inner
        self.calls = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self._lock = threading.Lock()

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls += 1
        resp = self.inner.complete(req)
        with self._lock:
            self.prompt_tokens += resp.prompt_tokens
            self.completion_tokens += resp.completion_tokens
        return resp


def parse_json_content(text: str) -> Any:
    """Parse a JSON object out of model text, tolerating code fences and surrounding prose."""
    t = text.strip()
    if t.startswith("```"):
        t = t.split("\n", 1)[1] if "\n" in t else ""
        t = t.rsplit("```", 1)[0]
    try:
        return json.loads(t)
    except json.JSONDecodeError:
        start, end = t.find("{"), t.rfind("}")
        if start >= 0 and end > start:
            try:
                return json.loads(t[start:end + 1])
            except json.JSONDecodeError:
                pass
    raise MalformedResponse("content is not valid JSON")
