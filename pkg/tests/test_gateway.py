"""Gateway behavior: caching, retries, concurrency bound, mock scripting."""

from __future__ import annotations

import threading

import pytest

from prefpipe.gateway import (
    BackendRefused,
    ChatMessage,
    ChatRequest,
    DistributionUnavailable,
    Gateway,
    GatewayConfig,
    MockBackend,
    MockRule,
    RetryPolicy,
    TransportError,
    UnmatchedRequest,
    mock_backend,
)

from conftest import gateway_for


def req(text="hello", temperature=0.0, seed=None, model="m", max_tokens=16, dist=False):
    return ChatRequest(
        model_id=model,
        messages=(ChatMessage("user", text),),
        temperature=temperature,
        max_tokens=max_tokens,
        want_token_distribution=dist,
        seed=seed,
    )


def test_temperature_zero_served_from_cache(tmp_path):
    backend = MockBackend(rules=[MockRule(text="SCORE: 7")])
    gateway = gateway_for(backend, cache_dir=tmp_path / "cache")
    first = gateway.complete(req())
    second = gateway.complete(req())
    assert first == second
    assert len(backend.call_log) == 1  # second round-trip never reached the backend


def test_sampling_without_seed_is_not_cached(tmp_path):
    backend = MockBackend(rules=[MockRule(text="SCORE: 7")])
    gateway = gateway_for(backend, cache_dir=tmp_path / "cache")
    gateway.complete(req(temperature=1.0))
    gateway.complete(req(temperature=1.0))
    assert len(backend.call_log) == 2


def test_sampling_with_seed_is_cached(tmp_path):
    backend = MockBackend(rules=[MockRule(text="SCORE: 7")])
    gateway = gateway_for(backend, cache_dir=tmp_path / "cache")
    gateway.complete(req(temperature=1.0, seed=3))
    gateway.complete(req(temperature=1.0, seed=3))
    assert len(backend.call_log) == 1


def test_retry_two_failures_then_success():
    # Scripted backend: fails twice retryably, then answers.
    backend = MockBackend(rules=[MockRule(text="ok", fail_times=2)])
    config = GatewayConfig(retry=RetryPolicy(max_attempts=3, base_backoff_ms=1))
    gateway = Gateway(config, backend=backend)
    result = gateway.complete(req())
    assert result.text == "ok"
    assert len(backend.call_log) == 3


def test_retries_exhausted_raises_transport_error():
    backend = MockBackend(rules=[MockRule(text="ok", fail_times=5)])
    config = GatewayConfig(retry=RetryPolicy(max_attempts=3, base_backoff_ms=1))
    gateway = Gateway(config, backend=backend)
    with pytest.raises(TransportError):
        gateway.complete(req())
    assert len(backend.call_log) == 3


def test_backend_refused_not_retried():
    backend = MockBackend(rules=[MockRule(refuse=True)])
    config = GatewayConfig(retry=RetryPolicy(max_attempts=3, base_backoff_ms=1))
    gateway = Gateway(config, backend=backend)
    with pytest.raises(BackendRefused):
        gateway.complete(req())
    assert len(backend.call_log) == 1


def test_distribution_unavailable_when_rule_has_none():
    backend = MockBackend(rules=[MockRule(text="SCORE: 7")])
    gateway = gateway_for(backend)
    with pytest.raises(DistributionUnavailable):
        gateway.complete(req(dist=True))


def test_unmatched_request_fails_loudly():
    backend = MockBackend(rules=[MockRule(contains=("nope",), text="x")])
    gateway = gateway_for(backend)
    with pytest.raises(UnmatchedRequest):
        gateway.complete(req("something else"))


def test_mock_catch_all_echo():
    backend = mock_backend([{"text": "SCORE: 7"}])
    gateway = gateway_for(backend)
    assert gateway.complete(req("anything at all")).text == "SCORE: 7"


def test_matcher_substring_distinguishes_prompt_kinds():
    backend = MockBackend(
        rules=[
            MockRule(contains=("Response B",), text="SCORE_A: 6\nSCORE_B: 8"),
            MockRule(text="SCORE: 7"),
        ]
    )
    gateway = gateway_for(backend)
    pairwise = gateway.complete(req("## Response A\nfoo\n## Response B\nbar"))
    pointwise = gateway.complete(req("## Response to Evaluate\nfoo"))
    assert pairwise.text == "SCORE_A: 6\nSCORE_B: 8"
    assert pointwise.text == "SCORE: 7"


def test_contains_in_order_matcher():
    rule = MockRule(contains_in_order=("alpha", "beta"), text="x")
    assert rule.matches(req("alpha then beta"))
    assert not rule.matches(req("beta then alpha"))
    assert not rule.matches(req("alpha only"))


def test_cache_key_depends_on_every_field():
    base = req("text", temperature=0.0, seed=1, model="m", max_tokens=16)
    variants = [
        req("text2", temperature=0.0, seed=1, model="m", max_tokens=16),
        req("text", temperature=0.5, seed=1, model="m", max_tokens=16),
        req("text", temperature=0.0, seed=2, model="m", max_tokens=16),
        req("text", temperature=0.0, seed=1, model="m2", max_tokens=16),
        req("text", temperature=0.0, seed=1, model="m", max_tokens=32),
        req("text", temperature=0.0, seed=1, model="m", max_tokens=16, dist=True),
    ]
    hashes = {base.request_hash()}
    for variant in variants:
        assert variant.request_hash() not in hashes
        hashes.add(variant.request_hash())


def test_in_flight_bound_respected():
    backend = MockBackend(rules=[MockRule(text="ok", delay_ms=15)])
    gateway = gateway_for(backend, max_in_flight=2)
    threads = [
        threading.Thread(target=lambda i=i: gateway.complete(req(f"call {i}")))
        for i in range(8)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(backend.call_log) == 8
    assert backend.max_in_flight_seen <= 2


def test_cached_result_round_trips_distribution(tmp_path):
    dist = ({"7": 0.0, "8": -1.0},)
    backend = MockBackend(rules=[MockRule(text="7", token_distribution=dist)])
    gateway = gateway_for(backend, cache_dir=tmp_path / "cache")
    first = gateway.complete(req(dist=True))
    second = gateway.complete(req(dist=True))
    assert len(backend.call_log) == 1
    assert second.token_distribution == dist
    assert first == second


def test_one_shot_complete_wrapper(tmp_path):
    from prefpipe.gateway import complete

    backend = MockBackend(rules=[MockRule(text="pong")])
    config = GatewayConfig(cache_dir=str(tmp_path / "cache"))
    result = complete(req("ping"), config, backend=backend)
    assert result.text == "pong"
    # The wrapper still writes the cache entry for deterministic requests.
    assert list((tmp_path / "cache").glob("*.json"))


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest(model_id="m", messages=(), temperature=0.0, max_tokens=16)
    with pytest.raises(ValueError):
        req(temperature=-1.0)
    with pytest.raises(ValueError):
        req(max_tokens=0)
