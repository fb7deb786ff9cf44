"""Competition-inhibition forgetting and the baseline eviction policies.

Once per completed round every memory gets an importance score

    S = alpha / (exp(gamma * (r_c - b)) + 1 - eps) + beta * sum(1 / (r_c - r + eps) for r in R)

where ``r_c`` is the current round, ``b`` the creation round and ``R`` the rounds
in which the memory was retrieved as relevant. Retrieval then ranks the pool
against a query: the top ``k`` are relevant (``r_c`` is added to their ``R``), the
next ``k`` are noisy (their suppression factor halves) and the rest are left
alone. Finally the lowest effective scores (``S`` times suppression factor) are
evicted until the pool fits its character capacity.

Scores are computed before the round's retrievals are recorded, so every
``r`` in ``R`` is strictly below ``r_c`` and the reinforcement term stays finite.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping

from .backends import Reranker
from .core import MemoryItem, MemoryPool
from .errors import (
    BackendError,
    CapacityOverflowError,
    ConfigError,
    InvariantBreachError,
    LongMemError,
    ProtocolError,
)

logger = logging.getLogger(__name__)


class Policy(str, Enum):
    COMPETITION_INHIBITION = "competition_inhibition"
    EBBINGHAUS = "ebbinghaus"
    FIFO = "fifo"
    NO_INHIBITION = "no_inhibition"
    NONE = "none"


@dataclass
class ForgettingConfig:
    alpha: float = 0.1
    beta: float = 0.9
    gamma: float = 1.0
    epsilon: float = 1e-6
    k: int = 9
    policy: Policy = Policy.COMPETITION_INHIBITION

    def __post_init__(self):
        try:
            self.policy = Policy(self.policy)
        except ValueError as exc:
            raise ConfigError(f"unknown forgetting policy {self.policy!r}") from exc
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("forgetting.alpha and forgetting.beta must be non-negative")
        if self.epsilon <= 0:
            raise ConfigError("forgetting.epsilon must be positive")
        if self.k < 1:
            raise ConfigError("forgetting.k must be at least 1")


@dataclass
class RetrievalPartition:
    relevant: list[str] = field(default_factory=list)
    noisy: list[str] = field(default_factory=list)
    unactivated: list[str] = field(default_factory=list)
    rerank_scores: dict[str, float] = field(default_factory=dict)


@dataclass
class EvictionRecord:
    round: int
    evicted_id: str
    effective_score: float
    policy: str
    kind: str = ""

    def to_record(self) -> dict:
        return {
            "round": self.round,
            "evicted_id": self.evicted_id,
            "effective_score": self.effective_score,
            "policy": self.policy,
            "kind": self.kind,
        }


@dataclass
class ForgettingOutcome:
    scores: dict[str, float] = field(default_factory=dict)
    partition: RetrievalPartition | None = None
    evicted: list[EvictionRecord] = field(default_factory=list)


def compute_score(item: MemoryItem, current_round: int, config: ForgettingConfig) -> float:
    """Importance score of ``item`` at ``current_round``, before suppression."""
    age = current_round - item.creation_round
    if age < 0:
        raise InvariantBreachError(
            f"memory {item.id}: current round {current_round} precedes creation round {item.creation_round}"
        )
    if any(r >= current_round for r in item.retrieval_rounds):
        raise InvariantBreachError(
            f"memory {item.id}: retrieval rounds must precede the scoring round {current_round}"
        )
    # alpha / (e^x + 1 - eps) rewritten with e^-x so large ages underflow instead of overflowing.
    shrink = math.exp(-config.gamma * age)
    decay = config.alpha * shrink / (1.0 + (1.0 - config.epsilon) * shrink)
    reinforcement = config.beta * math.fsum(
        1.0 / (current_round - r + config.epsilon) for r in item.retrieval_rounds
    )
    return decay + reinforcement


def effective_score(item: MemoryItem, current_round: int, config: ForgettingConfig) -> float:
    return compute_score(item, current_round, config) * item.suppression_factor


def ebbinghaus_retention(item: MemoryItem, current_round: int) -> float:
    strength = 1 + len(item.retrieval_rounds)
    return math.exp(-(current_round - item.creation_round) / strength)


def partition_retrieval(
    pool: MemoryPool,
    query: str,
    reranker: Reranker,
    config: ForgettingConfig,
    scores: Mapping[str, float] | None = None,
) -> RetrievalPartition:
    """Split the pool into relevant / noisy / unactivated by rerank order.

    Equal rerank scores fall back to higher effective score, then older creation
    round, then id. ``scores`` defaults to each item's cached ``last_score``.
    """
    if not len(pool):
        raise InvariantBreachError("cannot partition an empty pool")
    if not query.strip():
        raise InvariantBreachError("retrieval query must not be empty")
    candidates = [(item.id, item.text) for item in pool]
    try:
        ranked = reranker.rerank(query, candidates)
    except LongMemError:
        raise
    except Exception as exc:
        raise BackendError(f"reranker {reranker.identity} failed: {exc}") from exc
    rerank = dict(ranked)
    if len(ranked) != len(candidates) or rerank.keys() != pool.items.keys():
        raise ProtocolError(f"reranker {reranker.identity} did not return a permutation of the pool")

    eff = scores if scores is not None else {item.id: item.last_score for item in pool}
    order = sorted(
        pool,
        key=lambda it: (-rerank[it.id], -eff[it.id], it.creation_round, it.id),
    )
    ids = [item.id for item in order]
    k = config.k
    return RetrievalPartition(
        relevant=ids[:k],
        noisy=ids[k:2 * k],
        unactivated=ids[2 * k:],
        rerank_scores=rerank,
    )


def apply_reinforcement_suppression(
    pool: MemoryPool, partition: RetrievalPartition, current_round: int, inhibit: bool = True
) -> MemoryPool:
    """Record the retrieval for relevant items and halve noisy ones.

    Relevant items also get their suppression factor reset to 1. With
    ``inhibit=False`` noisy items are left alone.
    """
    for item_id in partition.relevant:
        item = pool.items[item_id]
        item.record_retrieval(current_round)
        item.suppression_factor = 1.0
    if inhibit:
        for item_id in partition.noisy:
            pool.items[item_id].suppression_factor *= 0.5
    return pool


def _default_exempt(item: MemoryItem) -> bool:
    return item.exempt


def enforce_capacity(
    pool: MemoryPool,
    rank: Callable[[MemoryItem], float],
    policy: str = Policy.COMPETITION_INHIBITION.value,
    exempt: Callable[[MemoryItem], bool] = _default_exempt,
) -> list[EvictionRecord]:
    """Evict lowest-ranked non-exempt items until the pool fits ``capacity_chars``.

    ``rank`` is the policy's retention value (higher survives). Ties go oldest
    first, then by id, so the evicted set does not depend on iteration order.
    Nothing is evicted if the exempt items alone already exceed the capacity.
    """
    capacity = pool.capacity_chars
    if capacity is None:
        return []
    total = pool.total_chars()
    if total <= capacity:
        return []
    protected = sum(item.size for item in pool if exempt(item))
    if protected > capacity:
        raise CapacityOverflowError(
            f"round {pool.current_round}: exempt memories hold {protected} chars, capacity is {capacity}"
        )
    victims = sorted(
        (item for item in pool if not exempt(item)),
        key=lambda it: (rank(it), it.creation_round, it.id),
    )
    evicted = []
    for item in victims:
        if total <= capacity:
            break
        pool.remove(item.id)
        total -= item.size
        evicted.append(EvictionRecord(pool.current_round, item.id, rank(item), policy, item.kind.value))
    return evicted


def forgetting_step(
    pool: MemoryPool,
    query: str,
    reranker: Reranker,
    config: ForgettingConfig,
    exempt: Callable[[MemoryItem], bool] = _default_exempt,
    policy: Policy | str | None = None,
) -> ForgettingOutcome:
    """Run one round of scoring, retrieval bookkeeping and eviction under ``policy``.

    ``policy`` defaults to ``config.policy``. Every policy refreshes the cached
    ``last_score`` of each item; ``none`` stops there.
    """
    policy = Policy(policy or config.policy)
    r_c = pool.current_round
    outcome = ForgettingOutcome()
    if not len(pool):
        return outcome

    base = {item.id: compute_score(item, r_c, config) for item in pool}
    for item in pool:
        item.last_score = base[item.id] * item.suppression_factor
    if policy is Policy.NONE:
        outcome.scores = {item.id: item.last_score for item in pool}
        return outcome

    if policy is not Policy.FIFO and query.strip():
        eff = {item.id: item.last_score for item in pool}
        outcome.partition = partition_retrieval(pool, query, reranker, config, eff)
        apply_reinforcement_suppression(
            pool, outcome.partition, r_c, inhibit=policy is Policy.COMPETITION_INHIBITION
        )
        for item in pool:
            item.last_score = base[item.id] * item.suppression_factor
    outcome.scores = {item.id: item.last_score for item in pool}

    if policy is Policy.FIFO:
        rank: Callable[[MemoryItem], float] = lambda it: float(it.creation_round)
    elif policy is Policy.EBBINGHAUS:
        rank = lambda it: ebbinghaus_retention(it, r_c)
    else:
        rank = lambda it: it.last_score
    outcome.evicted = enforce_capacity(pool, rank, policy.value, exempt)
    if outcome.evicted:
        logger.debug("round %d: evicted %s", r_c, [e.evicted_id for e in outcome.evicted])
    return outcome


def baseline_policy_step(
    pool: MemoryPool,
    policy: Policy | str,
    current_round: int,
    config: ForgettingConfig | None = None,
    query: str = "",
    reranker: Reranker | None = None,
    exempt: Callable[[MemoryItem], bool] = _default_exempt,
) -> ForgettingOutcome:
    """Run a comparison policy (``ebbinghaus``, ``fifo`` or ``no_inhibition``) for one round."""
    policy = Policy(policy)
    if policy not in (Policy.EBBINGHAUS, Policy.FIFO, Policy.NO_INHIBITION):
        raise ConfigError(f"{policy.value} is not a baseline policy")
    if policy is not Policy.FIFO and reranker is None:
        raise ConfigError(f"policy {policy.value} needs a reranker")
    pool.advance_to(current_round)
    return forgetting_step(pool, query, reranker, config or ForgettingConfig(), exempt, policy)
