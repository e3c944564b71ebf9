from __future__ import annotations

import threading

import httpx
import pytest

from apgp.provider import (
    AuthError, CachedProvider, ChatRequest, ChatResponse, MissingScriptEntry, ProtocolError,
    ProviderConfig, ProviderTimeout, RateLimited, RequestRejected, RequestTag, RetryConfig,
    ScriptedProvider, ServerError, HTTPProvider, cache_key, scripted_provider,
)
from conftest import ok_body


def http(stub, attempts=3, **kw) -> HTTPProvider:
    cfg = ProviderConfig(endpoint=stub.url, retry=RetryConfig(max_attempts=attempts, base_backoff=0.0,
                                                              jitter=False), **kw)
    return HTTPProvider(cfg, sleep=lambda s: None)


def req(prompt="hi", temperature=0.2, node="define", attempt=0) -> ChatRequest:
    return ChatRequest.user(prompt, temperature=temperature, tag=RequestTag("run1", node, attempt))


class Counting:
    def __init__(self, text="inner"):
        self.calls = 0
        self.text = text
        self.lock = threading.Lock()

    def complete(self, request):
        with self.lock:
            self.calls += 1
        return ChatResponse(self.text, token_usage={"prompt": 1, "completion": 2}, latency_ms=5.0)


# -- request validation ------------------------------------------------------


def test_request_needs_trailing_user_message():
    with pytest.raises(ValueError):
        ChatRequest(messages=())
    with pytest.raises(ValueError):
        ChatRequest(messages=(("user", "q"), ("assistant", "a")))
    with pytest.raises(ValueError):
        ChatRequest.user("q", temperature=2.5)


def test_config_invariants():
    with pytest.raises(ValueError):
        RetryConfig(max_attempts=0)
    with pytest.raises(ValueError):
        ProviderConfig(timeout=0)
    with pytest.raises(ValueError):
        ProviderConfig(api_key="secret")  # secrets never live in config


# -- scripted ----------------------------------------------------------------


def test_scripted_lookup_is_verbatim():
    p = scripted_provider({("generate", 0): "  SOLUTION 1: x  "})
    assert p.complete(req(node="generate")).content == "  SOLUTION 1: x  "


def test_scripted_missing_entry_names_key():
    p = ScriptedProvider({})
    with pytest.raises(MissingScriptEntry, match="node=define attempt=0"):
        p.complete(req())


def test_scripted_per_run_overrides_and_lists():
    p = ScriptedProvider.from_dict({"generate": ["first", "second"], "runs": {"run1": {"define": "mine"}},
                                    "define": "shared"})
    assert p.complete(req()).content == "mine"
    assert p.complete(ChatRequest.user("x", tag=RequestTag("other", "define"))).content == "shared"
    assert p.complete(req(node="generate", attempt=1)).content == "second"
    assert p.calls == 3


# -- HTTP --------------------------------------------------------------------


def test_retry_on_429_then_success(stub):
    stub.replies = [(429, {"error": "slow down"}), (429, {"error": "slow down"}), (200, ok_body("done"))]
    resp = http(stub).complete(req())
    assert resp.content == "done"
    assert resp.attempts == 3 and stub.hits == 3
    assert resp.token_usage == {"prompt": 11, "completion": 3}
    sent = stub.requests[0]["body"]
    assert sent["messages"] == [{"role": "user", "content": "hi"}]
    assert set(sent) == {"model", "messages", "temperature", "max_tokens"}


def test_retry_on_5xx_then_success(stub):
    stub.replies = [(503, {}), (200, ok_body("ok"))]
    assert http(stub).complete(req()).attempts == 2


def test_401_fails_immediately(stub):
    stub.replies = [(401, {"error": "bad key"})]
    with pytest.raises(AuthError):
        http(stub).complete(req())
    assert stub.hits == 1


def test_other_4xx_not_retried(stub):
    stub.replies = [(400, {"error": "bad"})]
    with pytest.raises(RequestRejected):
        http(stub).complete(req())
    assert stub.hits == 1


def test_attempts_never_exceed_max(stub):
    stub.replies = [(429, {})] * 10
    with pytest.raises(RateLimited):
        http(stub, attempts=4).complete(req())
    assert stub.hits == 4
    stub.requests.clear()
    stub.replies = [(500, {})] * 10
    with pytest.raises(ServerError):
        http(stub, attempts=2).complete(req())
    assert stub.hits == 2


def test_malformed_body_is_protocol_error(stub):
    stub.replies = [(200, b"not json at all")]
    with pytest.raises(ProtocolError):
        http(stub).complete(req())
    assert stub.hits == 1
    stub.replies = [(200, {"choices": []})]
    with pytest.raises(ProtocolError):
        http(stub).complete(req())


def test_auth_header_from_env(stub, monkeypatch):
    monkeypatch.setenv("MY_KEY", "s3cret")
    http(stub, api_key_env="MY_KEY").complete(req())
    assert stub.requests[0]["headers"]["Authorization"] == "Bearer s3cret"


def test_timeout_retried_then_raised():
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ReadTimeout("slow", request=request)

    cfg = ProviderConfig(endpoint="http://stub.invalid/v1/chat/completions",
                         retry=RetryConfig(max_attempts=3, base_backoff=0.0))
    client = httpx.Client(transport=httpx.MockTransport(handler))
    with pytest.raises(ProviderTimeout):
        HTTPProvider(cfg, client=client, sleep=lambda s: None).complete(req())
    assert len(calls) == 3


def test_backoff_is_exponential():
    sleeps = []
    cfg = ProviderConfig(endpoint="http://stub.invalid", retry=RetryConfig(max_attempts=4, base_backoff=0.5,
                                                                           jitter=False))
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(503)))
    with pytest.raises(ServerError):
        HTTPProvider(cfg, client=client, sleep=sleeps.append).complete(req())
    assert sleeps == [0.5, 1.0, 2.0]


# -- cache -------------------------------------------------------------------


def test_cache_hit_skips_inner(tmp_path):
    inner = Counting()
    p = CachedProvider(inner, tmp_path)
    first = p.complete(req())
    second = p.complete(req())
    assert inner.calls == 1
    assert second == first


def test_cache_key_includes_temperature(tmp_path):
    assert cache_key(req(temperature=0.2)) != cache_key(req(temperature=1.0))
    inner = Counting()
    p = CachedProvider(inner, tmp_path)
    p.complete(req(temperature=0.2))
    p.complete(req(temperature=1.0))
    assert inner.calls == 2


def test_cache_key_ignores_tag():
    assert cache_key(req(node="define")) == cache_key(req(node="judge", attempt=3))


def test_cleared_cache_reinvokes(tmp_path):
    inner = Counting()
    p = CachedProvider(inner, tmp_path)
    p.complete(req())
    for f in tmp_path.iterdir():
        f.unlink()
    p.complete(req())
    assert inner.calls == 2


def test_corrupt_cache_entry_is_a_miss(tmp_path, caplog):
    inner = Counting()
    p = CachedProvider(inner, tmp_path)
    p.complete(req())
    (tmp_path / f"{cache_key(req())}.json").write_text("{broken")
    assert p.complete(req()).content == "inner"
    assert inner.calls == 2
    assert "corrupt cache entry" in caplog.text


def test_cache_over_http_is_transparent(stub, tmp_path):
    stub.replies = [(200, ok_body("héllo\n  exact bytes "))]
    direct = http(stub).complete(req()).content
    stub.replies = [(200, ok_body("héllo\n  exact bytes "))]
    p = CachedProvider(http(stub), tmp_path)
    a = p.complete(req())
    hits = stub.hits
    b = p.complete(req())
    assert stub.hits == hits
    assert a.content == b.content == direct


def test_cache_concurrent_same_key(tmp_path):
    inner = Counting()
    p = CachedProvider(inner, tmp_path)
    threads = [threading.Thread(target=p.complete, args=(req(),)) for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert inner.calls == 1
