"""Pluggable model backends.

Every model call in the engine goes through one of three small interfaces:

* ``TextGenerator.generate(prompt, max_length)`` for summaries, persona
  extraction, complex merges, judging and answering;
* ``SimilarityScorer.score(a, b)`` for contradiction checks and label matching;
* ``Reranker.rerank(query, candidates)`` for retrieval.

The mocks here are pure functions of their input so that a whole ingest run is
reproducible byte for byte. Prompts start with a ``task: <name>`` line, which is
how the rule-based mock tells summarization requests from persona requests.
"""

from __future__ import annotations

import json
import logging
import os
import random
import re
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, runtime_checkable

import httpx

from .errors import (
    AuthError,
    BackendTimeoutError,
    BudgetExceededError,
    ConfigError,
    ProtocolError,
    TransportError,
)
from .text import tokenize

logger = logging.getLogger(__name__)


@runtime_checkable
class TextGenerator(Protocol):
    identity: str

    def generate(self, prompt: str, max_length: int) -> str: ...


@runtime_checkable
class SimilarityScorer(Protocol):
    identity: str

    def score(self, a: str, b: str) -> float: ...


@runtime_checkable
class Reranker(Protocol):
    identity: str

    def rerank(self, query: str, candidates: Sequence[tuple[str, str]]) -> list[tuple[str, float]]: ...


def prompt_task(prompt: str) -> str:
    first = prompt.split("\n", 1)[0].strip()
    if first.startswith("task:"):
        return first[len("task:"):].strip()
    return ""


def prompt_field(prompt: str, name: str) -> str | None:
    """Return the value of a ``name: value`` header line, if present."""
    match = re.search(rf"^{re.escape(name)}:[ \t]*(.*)$", prompt, flags=re.MULTILINE)
    return match.group(1).strip() if match else None


def prompt_section(prompt: str, name: str) -> str:
    """Return the body between ``<<name>>`` and ``<</name>>`` markers."""
    match = re.search(rf"<<{re.escape(name)}>>\n?(.*?)\n?<</{re.escape(name)}>>", prompt, flags=re.DOTALL)
    return match.group(1) if match else ""


# ---------------------------------------------------------------------------
# Mocks
# ---------------------------------------------------------------------------


class MockGenerator:
    """Deterministic generator with three behaviours.

    ``echo`` truncates the prompt to ``max_length``; ``template_sum`` answers
    ``SUM[<ids>]`` using the prompt's ``ids:`` line; ``fixed_json`` always returns
    the canned payload.
    """

    BEHAVIORS = ("echo", "template_sum", "fixed_json")

    def __init__(self, behavior: str = "echo", canned: object = None):
        if behavior not in self.BEHAVIORS:
            raise ConfigError(f"unknown mock behaviour {behavior!r}")
        self.behavior = behavior
        if isinstance(canned, str) or canned is None:
            self._canned = canned if canned is not None else "{}"
        else:
            self._canned = json.dumps(canned, ensure_ascii=False, sort_keys=True)
        self.identity = f"mock:{behavior}"

    def generate(self, prompt: str, max_length: int) -> str:
        if self.behavior == "echo":
            return prompt[:max_length]
        if self.behavior == "template_sum":
            return f"SUM[{prompt_field(prompt, 'ids') or ''}]"
        return self._canned


class CallableGenerator:
    """Adapter turning a plain function into a TextGenerator."""

    def __init__(self, fn: Callable[[str], str], identity: str = "callable"):
        self._fn = fn
        self.identity = identity

    def generate(self, prompt: str, max_length: int) -> str:
        return self._fn(prompt)


_PERSONA_PATTERNS: list[tuple[str, re.Pattern]] = [
    ("Name", re.compile(r"\bmy name is ([A-Z][\w-]*)")),
    ("Age", re.compile(r"\bI am (\d{1,3}) years old", re.IGNORECASE)),
    ("Gender", re.compile(r"\bI am an? (man|woman|boy|girl)\b", re.IGNORECASE)),
    ("Profession", re.compile(r"\bI work as an? ([\w -]+?)(?:[.,!?]|$)", re.IGNORECASE)),
    ("Preferences", re.compile(r"\bI prefer ([\w -]+?)(?:[.,!?]|$)", re.IGNORECASE)),
    ("Skills", re.compile(r"\bI can ([\w -]+?)(?:[.,!?]|$)", re.IGNORECASE)),
    ("Hobbies", re.compile(r"\bmy hobby is ([\w -]+?)(?:[.,!?]|$)", re.IGNORECASE)),
    ("RecentEvents", re.compile(r"\brecently I ([\w -]+?)(?:[.,!?]|$)", re.IGNORECASE)),
    ("Plans", re.compile(r"\bI plan to ([\w -]+?)(?:[.,!?]|$)", re.IGNORECASE)),
    ("FavoriteAnimals", re.compile(r"\bI love (cats|dogs|birds|horses|rabbits|spiders|snakes|fish)\b", re.IGNORECASE)),
    ("DislikedAnimals", re.compile(r"\bI hate (cats|dogs|birds|horses|rabbits|spiders|snakes|fish)\b", re.IGNORECASE)),
    ("FavoriteFoods", re.compile(r"\bI enjoy eating ([\w -]+?)(?:[.,!?]|$)", re.IGNORECASE)),
    ("DislikedFoods", re.compile(r"\bI can't stand ([\w -]+?)(?:[.,!?]|$)", re.IGNORECASE)),
    ("Personality", re.compile(r"\bI am (shy|outgoing|calm|curious|stubborn|cheerful)\b", re.IGNORECASE)),
]


class RuleBasedMock:
    """Offline stand-in for a real LLM covering every task the engine issues.

    Summaries follow ``summary_behavior`` (``template_sum`` or ``echo``). Persona
    snapshots are extracted with fixed English regexes from user lines, complex
    merges return the de-duplicated union, the judge scores token overlap on a
    0-5 scale, and the answerer picks the option that appears in the supplied
    memories (falling back to ``A``).
    """

    def __init__(self, summary_behavior: str = "template_sum"):
        self._summary = MockGenerator(summary_behavior)
        self.identity = f"mock:rules+{summary_behavior}"

    def generate(self, prompt: str, max_length: int) -> str:
        task = prompt_task(prompt)
        if task == "persona_snapshot":
            return self._snapshot(prompt)
        if task == "persona_merge":
            old = json.loads(prompt_section(prompt, "old") or "[]")
            new = json.loads(prompt_section(prompt, "new") or "[]")
            return json.dumps(list(dict.fromkeys(old + new)), ensure_ascii=False)
        if task == "judge":
            return str(_overlap_grade(prompt_section(prompt, "response"), prompt_section(prompt, "reference")))
        if task == "answer":
            if prompt_section(prompt, "options"):
                return _pick_option(prompt)
            return prompt_section(prompt, "memories").strip() or "I don't remember."
        return self._summary.generate(prompt, max_length)

    @staticmethod
    def _snapshot(prompt: str) -> str:
        keys = set(k.strip() for k in (prompt_field(prompt, "keys") or "").split(",") if k.strip())
        found: dict[str, list[str]] = {}
        for line in prompt_section(prompt, "dialogue").splitlines():
            if not line.startswith("user:"):
                continue
            for key, pattern in _PERSONA_PATTERNS:
                if key not in keys:
                    continue
                for match in pattern.finditer(line):
                    value = match.group(1).strip()
                    if value and value not in found.setdefault(key, []):
                        found[key].append(value)
        return json.dumps(found, ensure_ascii=False, sort_keys=True)


def _overlap_grade(response: str, reference: str) -> int:
    ref = set(tokenize(reference.lower()))
    if not ref:
        return 0
    got = set(tokenize(response.lower()))
    return round(5 * len(ref & got) / len(ref))


def _pick_option(prompt: str) -> str:
    memories = prompt_section(prompt, "memories").lower()
    for line in prompt_section(prompt, "options").splitlines():
        match = re.match(r"([A-D])\.\s*(.*)", line.strip())
        if match and match.group(2).strip() and match.group(2).strip().lower() in memories:
            return match.group(1)
    return "A"


# ---------------------------------------------------------------------------
# Lexical scoring
# ---------------------------------------------------------------------------


class LexicalScorer:
    """Dice coefficient over lowercased token multisets."""

    identity = "lexical-dice"

    def score(self, a: str, b: str) -> float:
        ta = Counter(tokenize(a.lower()))
        tb = Counter(tokenize(b.lower()))
        total = sum(ta.values()) + sum(tb.values())
        if total == 0:
            return 1.0 if a == b else 0.0
        return 2 * sum((ta & tb).values()) / total


class ScorerReranker:
    """Reranker that orders candidates by a similarity scorer against the query."""

    def __init__(self, scorer: SimilarityScorer | None = None):
        self.scorer = scorer or LexicalScorer()
        self.identity = f"rerank:{self.scorer.identity}"

    def rerank(self, query: str, candidates: Sequence[tuple[str, str]]) -> list[tuple[str, float]]:
        scored = [(cid, self.scorer.score(query, text)) for cid, text in candidates]
        # sorted() is stable, so equal scores keep input order.
        return sorted(scored, key=lambda pair: -pair[1])


# ---------------------------------------------------------------------------
# Call accounting
# ---------------------------------------------------------------------------


@dataclass
class CallLedger:
    """Counts backend calls per (round, purpose) and enforces a per-round cap."""

    max_calls_per_round: int | None = None
    counts: Counter = field(default_factory=Counter)

    def record(self, round_index: int, purpose: str) -> None:
        used = sum(n for (r, _), n in self.counts.items() if r == round_index)
        if self.max_calls_per_round is not None and used >= self.max_calls_per_round:
            raise BudgetExceededError(
                f"round {round_index}: budget of {self.max_calls_per_round} backend calls exhausted"
            )
        self.counts[(round_index, purpose)] += 1

    def calls_in_round(self, round_index: int) -> dict[str, int]:
        return {p: n for (r, p), n in self.counts.items() if r == round_index}

    def total(self, purpose: str | None = None) -> int:
        return sum(n for (_, p), n in self.counts.items() if purpose is None or p == purpose)


# ---------------------------------------------------------------------------
# Remote client
# ---------------------------------------------------------------------------


@dataclass
class EndpointConfig:
    base_url: str
    model_name: str
    timeout_ms: int = 30000
    max_retries: int = 3
    api_key_env_var: str = "LONGMEM_API_KEY"

    def __post_init__(self):
        if not self.base_url:
            raise ConfigError("endpoint base_url is required")
        if self.timeout_ms <= 0 or self.max_retries < 0:
            raise ConfigError("timeout_ms must be positive and max_retries non-negative")


class RemoteGenerator:
    """Chat-completions client with timeout, bounded retries and jittered backoff.

    401/403 fail immediately with ``AuthError``. Timeouts, connection failures,
    429 and 5xx are retried up to ``max_retries`` times and then surface as
    ``BackendTimeoutError`` / ``TransportError``. A 2xx answer without a usable
    ``choices[0].message.content`` raises ``ProtocolError``.
    """

    def __init__(
        self,
        endpoint: EndpointConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        backoff_base: float = 0.5,
        rng: random.Random | None = None,
    ):
        self.endpoint = endpoint
        self.identity = f"remote:{endpoint.model_name}@{endpoint.base_url}"
        self._sleep = sleep
        self._backoff_base = backoff_base
        self._rng = rng or random.Random()
        headers = {}
        api_key = os.environ.get(endpoint.api_key_env_var)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(
            base_url=endpoint.base_url.rstrip("/"),
            headers=headers,
            timeout=endpoint.timeout_ms / 1000,
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def generate(self, prompt: str, max_length: int) -> str:
        payload = {
            "model": self.endpoint.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": max_length,
        }
        last_error: Exception | None = None
        for attempt in range(self.endpoint.max_retries + 1):
            if attempt:
                delay = self._backoff_base * 2 ** (attempt - 1) * (0.5 + self._rng.random())
                self._sleep(delay)
            try:
                response = self._client.post("/chat/completions", json=payload)
            except httpx.TimeoutException as exc:
                last_error = BackendTimeoutError(f"timed out after {self.endpoint.timeout_ms} ms: {exc}")
                continue
            except httpx.TransportError as exc:
                last_error = TransportError(f"transport failure: {exc}")
                continue
            if response.status_code in (401, 403):
                raise AuthError(f"authentication rejected (HTTP {response.status_code})")
            if response.status_code == 429 or response.status_code >= 500:
                last_error = TransportError(f"HTTP {response.status_code}")
                continue
            if response.status_code >= 400:
                raise ProtocolError(f"HTTP {response.status_code}: {response.text[:200]}")
            return self._extract(response)
        logger.warning("giving up after %d attempts: %s", self.endpoint.max_retries + 1, last_error)
        assert last_error is not None
        raise last_error

    @staticmethod
    def _extract(response: httpx.Response) -> str:
        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion response: {response.text[:200]}") from exc
        if not isinstance(content, str):
            raise ProtocolError("completion content is not a string")
        return content


class MeteredGenerator:
    """Wraps a generator so every call is charged to a ledger under one purpose."""

    def __init__(self, inner: TextGenerator, ledger: CallLedger, purpose: str, round_index: int):
        self.inner = inner
        self.ledger = ledger
        self.purpose = purpose
        self.round_index = round_index
        self.identity = inner.identity

    def generate(self, prompt: str, max_length: int) -> str:
        self.ledger.record(self.round_index, self.purpose)
        return self.inner.generate(prompt, max_length)
