"""Uniform client for chat-completion endpoints, plus a scriptable mock backend.

The gateway is the only module that performs I/O concurrency: it bounds
in-flight requests with a semaphore, retries retryable transport failures with
exponential backoff, and caches deterministic calls (temperature 0, or
temperature > 0 with an explicit seed) on disk keyed by the request hash.
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
from typing import Callable, Mapping, Sequence

import requests

logger = logging.getLogger(__name__)


class GatewayError(Exception):
    pass


class TransportError(GatewayError):
    """Retryable failure: connection problems, 429, 5xx."""


class BackendRefused(GatewayError):
    """Non-retryable refusal (4xx other than 429); surfaced on first occurrence."""


class DistributionUnavailable(GatewayError):
    """Token distributions were requested from a backend that cannot provide them."""


class UnmatchedRequest(GatewayError):
    """A mock backend received a request no script entry covers."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[ChatMessage, ...]
    temperature: float
    max_tokens: int
    want_token_distribution: bool = False
    seed: int | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")

    def joined_text(self) -> str:
        return "\n".join(m.text for m in self.messages)

    def to_payload(self) -> dict:
        return {
            "model_id": self.model_id,
            "messages": [{"role": m.role, "text": m.text} for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "want_token_distribution": self.want_token_distribution,
            "seed": self.seed,
        }

    def request_hash(self) -> str:
        blob = json.dumps(self.to_payload(), ensure_ascii=False, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @property
    def cacheable(self) -> bool:
        # Sampling calls are only reproducible when the caller pinned a seed.
        return self.temperature == 0 or self.seed is not None


@dataclass(frozen=True)
class ChatResult:
    text: str
    # One mapping of candidate-token -> log-score per generated position.
    token_distribution: tuple[dict[str, float], ...] | None = None

    def to_payload(self) -> dict:
        return {
            "text": self.text,
            "token_distribution": (
                None
                if self.token_distribution is None
                else [dict(pos) for pos in self.token_distribution]
            ),
        }

    @classmethod
    def from_payload(cls, payload: Mapping) -> "ChatResult":
        dist = payload.get("token_distribution")
        return cls(
            text=str(payload["text"]),
            token_distribution=None if dist is None else tuple(dict(p) for p in dist),
        )


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff_ms: int = 200

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class GatewayConfig:
    endpoint: str = ""
    auth_env: str = ""
    max_in_flight: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    cache_dir: str | None = None
    top_k_logprobs: int = 20

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    def to_payload(self) -> dict:
        return {
            "endpoint": self.endpoint,
            "auth_env": self.auth_env,
            "max_in_flight": self.max_in_flight,
            "retry": {
                "max_attempts": self.retry.max_attempts,
                "base_backoff_ms": self.retry.base_backoff_ms,
            },
            "cache_dir": self.cache_dir,
            "top_k_logprobs": self.top_k_logprobs,
        }

    @classmethod
    def from_payload(cls, payload: Mapping) -> "GatewayConfig":
        retry = payload.get("retry", {})
        return cls(
            endpoint=str(payload.get("endpoint", "")),
            auth_env=str(payload.get("auth_env", "")),
            max_in_flight=int(payload.get("max_in_flight", 4)),
            retry=RetryPolicy(
                max_attempts=int(retry.get("max_attempts", 3)),
                base_backoff_ms=int(retry.get("base_backoff_ms", 200)),
            ),
            cache_dir=payload.get("cache_dir"),
            top_k_logprobs=int(payload.get("top_k_logprobs", 20)),
        )


class HttpBackend:
    """De-facto chat-completion JSON interface over HTTP."""

    def __init__(self, config: GatewayConfig, timeout: float = 120.0):
        if not config.endpoint:
            raise ValueError("HttpBackend needs a non-empty endpoint URL")
        self._config = config
        self._timeout = timeout
        self._session = requests.Session()

    def complete(self, request: ChatRequest) -> ChatResult:
        body = {
            "model": request.model_id,
            "messages": [{"role": m.role, "content": m.text} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        if request.want_token_distribution:
            body["logprobs"] = True
            body["top_logprobs"] = self._config.top_k_logprobs

        headers = {"Content-Type": "application/json"}
        if self._config.auth_env:
            credential = os.environ.get(self._config.auth_env, "")
            if credential:
                headers["Authorization"] = f"Bearer {credential}"

        try:
            resp = self._session.post(
                self._config.endpoint.rstrip("/") + "/chat/completions",
                json=body,
                headers=headers,
                timeout=self._timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"request failed: {exc}") from exc

        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"backend returned {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendRefused(f"backend refused with {resp.status_code}: {resp.text[:200]}")

        try:
            data = resp.json()
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion payload: {exc}") from exc

        distribution = None
        if request.want_token_distribution:
            distribution = self._extract_distribution(choice)
        return ChatResult(text=text, token_distribution=distribution)

    @staticmethod
    def _extract_distribution(choice: Mapping) -> tuple[dict[str, float], ...]:
        logprobs = choice.get("logprobs")
        content = (logprobs or {}).get("content")
        if not content:
            raise DistributionUnavailable("backend returned no logprobs content")
        positions = []
        for pos in content:
            candidates = {
                str(top["token"]): float(top["logprob"])
                for top in pos.get("top_logprobs", [])
            }
            if not candidates and "token" in pos:
                candidates = {str(pos["token"]): float(pos.get("logprob", 0.0))}
            positions.append(candidates)
        return tuple(positions)


@dataclass
class MockRule:
    """One script entry: matcher fields plus the canned reply.

    All set matcher fields must hold for the rule to apply; the first matching
    rule in script order wins. ``fail_times`` makes the first N matched calls
    raise (retryable by default) before the canned reply is served, and
    ``delay_ms`` holds the call open so concurrency bounds become observable.
    """

    text: str | None = None
    token_distribution: tuple[dict[str, float], ...] | None = None
    contains: tuple[str, ...] = ()
    contains_in_order: tuple[str, ...] = ()
    model_id: str | None = None
    temperature: float | None = None
    seed: int | None = None
    match_fn: Callable[[ChatRequest], bool] | None = None
    fail_times: int = 0
    retryable_failure: bool = True
    refuse: bool = False
    delay_ms: int = 0

    def matches(self, request: ChatRequest) -> bool:
        if self.model_id is not None and request.model_id != self.model_id:
            return False
        if self.temperature is not None and request.temperature != self.temperature:
            return False
        if self.seed is not None and request.seed != self.seed:
            return False
        joined = request.joined_text()
        if any(fragment not in joined for fragment in self.contains):
            return False
        if self.contains_in_order:
            cursor = 0
            for fragment in self.contains_in_order:
                idx = joined.find(fragment, cursor)
                if idx < 0:
                    return False
                cursor = idx + len(fragment)
        if self.match_fn is not None and not self.match_fn(request):
            return False
        return True

    def result(self) -> ChatResult:
        return ChatResult(text=self.text or "", token_distribution=self.token_distribution)

    @classmethod
    def from_payload(cls, payload: Mapping) -> "MockRule":
        dist = payload.get("token_distribution")
        return cls(
            text=payload.get("text"),
            token_distribution=(
                None if dist is None else tuple({str(k): float(v) for k, v in p.items()} for p in dist)
            ),
            contains=tuple(payload.get("contains", [])),
            contains_in_order=tuple(payload.get("contains_in_order", [])),
            model_id=payload.get("model_id"),
            temperature=payload.get("temperature"),
            seed=payload.get("seed"),
            fail_times=int(payload.get("fail_times", 0)),
            retryable_failure=bool(payload.get("retryable_failure", True)),
            refuse=bool(payload.get("refuse", False)),
            delay_ms=int(payload.get("delay_ms", 0)),
        )


class MockBackend:
    """Deterministic stand-in for a live endpoint.

    Usable wherever an HttpBackend is; records a call log and the maximum
    number of concurrently in-flight calls for instrumentation.
    """

    def __init__(
        self,
        rules: Sequence[MockRule] = (),
        by_hash: Mapping[str, ChatResult] | None = None,
    ):
        self.rules = list(rules)
        self.by_hash = dict(by_hash or {})
        self.call_log: list[ChatRequest] = []
        self.max_in_flight_seen = 0
        self._in_flight = 0
        self._fail_counts: dict[int, int] = {}
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResult:
        with self._lock:
            self.call_log.append(request)
            self._in_flight += 1
            self.max_in_flight_seen = max(self.max_in_flight_seen, self._in_flight)
        try:
            return self._respond(request)
        finally:
            with self._lock:
                self._in_flight -= 1

    def _respond(self, request: ChatRequest) -> ChatResult:
        canned = self.by_hash.get(request.request_hash())
        if canned is not None:
            return canned
        for idx, rule in enumerate(self.rules):
            if not rule.matches(request):
                continue
            if rule.delay_ms:
                time.sleep(rule.delay_ms / 1000.0)
            if rule.fail_times:
                with self._lock:
                    used = self._fail_counts.get(idx, 0)
                    if used < rule.fail_times:
                        self._fail_counts[idx] = used + 1
                        if rule.retryable_failure:
                            raise TransportError(f"scripted failure {used + 1}/{rule.fail_times}")
                        raise BackendRefused("scripted refusal")
            if rule.refuse:
                raise BackendRefused("scripted refusal")
            if request.want_token_distribution and rule.token_distribution is None:
                raise DistributionUnavailable("mock rule has no token distribution")
            return rule.result()
        raise UnmatchedRequest(
            f"no script entry matches request to {request.model_id!r}: "
            f"{request.joined_text()[:120]!r}"
        )


def mock_backend(script) -> MockBackend:
    """Build a MockBackend from a script.

    Accepts a mapping of request-hash -> ChatResult, a sequence of MockRule
    entries (or payload dicts), or a mixture via ``{"rules": [...], "by_hash":
    {...}}``.
    """
    if isinstance(script, MockBackend):
        return script
    if isinstance(script, Mapping):
        if "rules" in script or "by_hash" in script:
            rules = [_coerce_rule(r) for r in script.get("rules", [])]
            by_hash = {
                k: v if isinstance(v, ChatResult) else ChatResult.from_payload(v)
                for k, v in script.get("by_hash", {}).items()
            }
            return MockBackend(rules=rules, by_hash=by_hash)
        by_hash = {
            k: v if isinstance(v, ChatResult) else ChatResult.from_payload(v)
            for k, v in script.items()
        }
        return MockBackend(by_hash=by_hash)
    return MockBackend(rules=[_coerce_rule(r) for r in script])


def _coerce_rule(rule) -> MockRule:
    if isinstance(rule, MockRule):
        return rule
    return MockRule.from_payload(rule)


def load_mock_script(path: str | Path) -> MockBackend:
    with Path(path).open("r", encoding="utf-8") as fh:
        return mock_backend(json.load(fh))


class Gateway:
    """Shareable completion client enforcing the in-flight bound internally."""

    def __init__(self, config: GatewayConfig, backend=None):
        self.config = config
        self.backend = backend if backend is not None else HttpBackend(config)
        self._semaphore = threading.BoundedSemaphore(config.max_in_flight)

    def complete(self, request: ChatRequest) -> ChatResult:
        cache_path = self._cache_path(request)
        if cache_path is not None and cache_path.exists():
            with cache_path.open("r", encoding="utf-8") as fh:
                entry = json.load(fh)
            return ChatResult.from_payload(entry["result"])

        result = self._complete_with_retry(request)

        if cache_path is not None:
            cache_path.parent.mkdir(parents=True, exist_ok=True)
            tmp = cache_path.with_suffix(".tmp-%d" % threading.get_ident())
            with tmp.open("w", encoding="utf-8") as fh:
                json.dump(
                    {"request": request.to_payload(), "result": result.to_payload()},
                    fh,
                    ensure_ascii=False,
                    sort_keys=True,
                )
            os.replace(tmp, cache_path)
        return result

    def _cache_path(self, request: ChatRequest) -> Path | None:
        if self.config.cache_dir is None or not request.cacheable:
            return None
        return Path(self.config.cache_dir) / (request.request_hash() + ".json")

    def _complete_with_retry(self, request: ChatRequest) -> ChatResult:
        policy = self.config.retry
        last_error: TransportError | None = None
        for attempt in range(1, policy.max_attempts + 1):
            try:
                with self._semaphore:
                    return self.backend.complete(request)
            except TransportError as exc:
                last_error = exc
                logger.warning(
                    "attempt %d/%d failed for %s: %s",
                    attempt,
                    policy.max_attempts,
                    request.model_id,
                    exc,
                )
                if attempt < policy.max_attempts:
                    time.sleep(policy.base_backoff_ms / 1000.0 * (2 ** (attempt - 1)))
        assert last_error is not None
        raise last_error


def complete(request: ChatRequest, config: GatewayConfig, backend=None) -> ChatResult:
    """One-shot convenience wrapper; long-lived callers should hold a Gateway."""
    return Gateway(config, backend=backend).complete(request)
