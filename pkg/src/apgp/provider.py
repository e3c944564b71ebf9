"""Chat-model providers behind one ``complete(request) -> response`` contract."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import tempfile
import threading
import time
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Literal, Mapping, Protocol

import httpx
from pydantic import BaseModel, ConfigDict, Field

log = logging.getLogger(__name__)

Role = Literal["system", "user", "assistant"]
FinishReason = Literal["stop", "length", "other"]


@dataclass(frozen=True)
class RequestTag:
    run_id: str
    node: str
    attempt: int = 0


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[Role, str], ...]
    model: str = "gpt-3.5-turbo"
    temperature: float = 0.2
    max_output_tokens: int = 1024
    tag: RequestTag = RequestTag("", "")

    def __post_init__(self):
        if not self.messages:
            raise ValueError("request needs at least one message")
        if self.messages[-1][0] != "user":
            raise ValueError("last message must have role 'user'")
        if not 0 <= self.temperature <= 2:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")

    @classmethod
    def user(cls, prompt: str, **kw: Any) -> "ChatRequest":
        return cls(messages=(("user", prompt),), **kw)


@dataclass
class ChatResponse:
    content: str
    finish_reason: FinishReason = "stop"
    token_usage: dict[str, int] | None = None
    latency_ms: float = 0.0
    attempts: int = 1


class Provider(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


class ProviderError(RuntimeError):
    pass


class ProviderTimeout(ProviderError):
    pass


class RateLimited(ProviderError):
    pass


class ServerError(ProviderError):
    pass


class ProtocolError(ProviderError):
    pass


class AuthError(ProviderError):
    pass


class RequestRejected(ProviderError):
    """Non-retryable 4xx other than auth failures and 429."""


class MissingScriptEntry(ProviderError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "missing script entry"


# --------------------------------------------------------------------------
# Config


class RetryConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_attempts: int = Field(3, ge=1)
    base_backoff: float = Field(0.5, ge=0)
    jitter: bool = True


class CacheConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = False
    directory: str = ".apgp-cache"


class ProviderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-3.5-turbo"
    api_key_env: str = "APGP_API_KEY"
    timeout: float = Field(60.0, gt=0)
    retry: RetryConfig = Field(default_factory=RetryConfig)
    cache: CacheConfig = Field(default_factory=CacheConfig)


# --------------------------------------------------------------------------
# HTTP


class HTTPProvider:
    """Client for chat-completions compatible endpoints.

    Timeouts, 429 and 5xx are retried with exponential backoff up to
    ``retry.max_attempts`` total attempts; everything else fails at once.
    """

    def __init__(self, config: ProviderConfig, *, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout)
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _backoff(self, attempt: int) -> float:
        delay = self.config.retry.base_backoff * (2 ** attempt)
        if self.config.retry.jitter:
            delay *= random.uniform(0.5, 1.5)
        return delay

    def complete(self, request: ChatRequest) -> ChatResponse:
        body = {
            "model": request.model or self.config.model,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        max_attempts = self.config.retry.max_attempts
        last: ProviderError | None = None
        for attempt in range(max_attempts):
            if attempt:
                self._sleep(self._backoff(attempt - 1))
            started = time.perf_counter()
            try:
                resp = self._client.post(self.config.endpoint, json=body, headers=self._headers())
            except httpx.TimeoutException as exc:
                last = ProviderTimeout(f"timed out after {self.config.timeout}s: {exc}")
                continue
            except httpx.TransportError as exc:
                last = ServerError(f"transport error: {exc}")
                continue
            latency = (time.perf_counter() - started) * 1000
            status = resp.status_code
            if status == 429:
                last = RateLimited(f"rate limited (HTTP 429) after {attempt + 1} attempts")
                continue
            if status >= 500:
                last = ServerError(f"HTTP {status} after {attempt + 1} attempts")
                continue
            if status in (401, 403):
                raise AuthError(f"HTTP {status}: check ${self.config.api_key_env}")
            if status >= 400:
                raise RequestRejected(f"HTTP {status}: {resp.text[:200]}")
            return _parse_completion(resp, latency, attempt + 1)
        assert last is not None
        raise last


def _parse_completion(resp: httpx.Response, latency: float, attempts: int) -> ChatResponse:
    try:
        data = resp.json()
        choice = data["choices"][0]
        content = choice["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"unexpected response body: {resp.text[:200]!r}") from exc
    if not isinstance(content, str):
        raise ProtocolError("message content is not a string")
    reason = choice.get("finish_reason")
    finish: FinishReason = reason if reason in ("stop", "length") else "other"
    usage = data.get("usage") or None
    if usage:
        usage = {
            "prompt": int(usage.get("prompt_tokens", 0)),
            "completion": int(usage.get("completion_tokens", 0)),
        }
    if finish == "stop" and not content:
        raise ProtocolError("empty content with finish_reason=stop")
    return ChatResponse(content, finish, usage, latency, attempts)


# --------------------------------------------------------------------------
# Scripted


Script = Mapping[tuple[str, int], str]


class ScriptedProvider:
    """Deterministic provider answering from a fixed script.

    Keys are ``(node, attempt)``; ``per_run`` maps a run id to its own
    script, consulted before the shared one.  Every request is kept in
    ``requests`` for inspection.
    """

    def __init__(self, script: Script, per_run: Mapping[str, Script] | None = None):
        self.script = {(_node_name(n), a): t for (n, a), t in script.items()}
        self.per_run = {
            rid: {(_node_name(n), a): t for (n, a), t in s.items()}
            for rid, s in (per_run or {}).items()
        }
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        tag = request.tag
        key = (tag.node, tag.attempt)
        with self._lock:
            self.requests.append(request)
        run_script = self.per_run.get(tag.run_id, {})
        if key in run_script:
            return ChatResponse(run_script[key])
        if key in self.script:
            return ChatResponse(self.script[key])
        raise MissingScriptEntry(f"no scripted response for node={tag.node} attempt={tag.attempt}"
                                 f" (run {tag.run_id!r})")

    @property
    def calls(self) -> int:
        return len(self.requests)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScriptedProvider":
        """Load the script file format.

        ``{"define": "...", "generate": ["first", "re-ask"], ...,
        "runs": {"<run id>": {...same shape...}}}``.  A string value
        answers attempt 0; a list answers attempts 0..n-1.
        """
        data = dict(data)
        runs = data.pop("runs", {}) or {}
        return cls(_script_from_mapping(data),
                   {rid: _script_from_mapping(s) for rid, s in runs.items()})

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedProvider":
        with Path(path).open(encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _node_name(node: Any) -> str:
    return getattr(node, "value", node)


def _script_from_mapping(data: Mapping[str, Any]) -> dict[tuple[str, int], str]:
    out: dict[tuple[str, int], str] = {}
    for node, value in data.items():
        items = [value] if isinstance(value, str) else list(value)
        for i, text in enumerate(items):
            if not isinstance(text, str):
                raise ValueError(f"script entry for {node}[{i}] must be a string")
            out[(node, i)] = text
    return out


def scripted_provider(script: Script) -> ScriptedProvider:
    return ScriptedProvider(script)


# --------------------------------------------------------------------------
# Cache


def cache_key(request: ChatRequest) -> str:
    blob = json.dumps(
        {"model": request.model, "messages": [list(m) for m in request.messages],
         "temperature": request.temperature},
        ensure_ascii=False, sort_keys=True,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class CachedProvider:
    def __init__(self, inner: Provider, directory: str | Path):
        self.inner = inner
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._locks: defaultdict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()

    def _lock(self, key: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks[key]

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = cache_key(request)
        path = self.directory / f"{key}.json"
        with self._lock(key):
            hit = self._read(path)
            if hit is not None:
                return hit
            response = self.inner.complete(request)
            self._write(path, response)
            return response

    def _read(self, path: Path) -> ChatResponse | None:
        if not path.exists():
            return None
        try:
            data = json.loads(path.read_text("utf-8"))
            return ChatResponse(**data)
        except (OSError, ValueError, TypeError) as exc:
            log.warning("ignoring corrupt cache entry %s: %s", path.name, exc)
            return None

    def _write(self, path: Path, response: ChatResponse) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(asdict(response), fh, ensure_ascii=False)
        os.replace(tmp, path)


def cached(provider: Provider, directory: str | Path) -> CachedProvider:
    return CachedProvider(provider, directory)


def build_provider(config: ProviderConfig) -> Provider:
    provider: Provider = HTTPProvider(config)
    if config.cache.enabled:
        provider = CachedProvider(provider, config.cache.directory)
    return provider
