"""Turn ingestion and the per-round pipeline: NSB, then PCB, then forgetting."""

from __future__ import annotations

import copy
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .backends import (
    CallLedger,
    LexicalScorer,
    MeteredGenerator,
    Reranker,
    RuleBasedMock,
    ScorerReranker,
    SimilarityScorer,
    TextGenerator,
)
from .config import EngineConfig
from .core import DialogueTurn, MemoryItem, MemoryPool, Speaker, Transcript, format_round, round_significant
from .errors import InputFormatError, TurnOrderError
from .forgetting import EvictionRecord, forgetting_step, partition_retrieval
from .nsb import NsbState, nsb_step
from .pcb import PcbState, pcb_step

logger = logging.getLogger(__name__)


@dataclass
class Backends:
    summarizer: TextGenerator
    extractor: TextGenerator
    merger: TextGenerator
    scorer: SimilarityScorer
    reranker: Reranker

    @classmethod
    def mock(cls, summary_behavior: str = "template_sum") -> "Backends":
        gen = RuleBasedMock(summary_behavior)
        scorer = LexicalScorer()
        return cls(gen, gen, gen, scorer, ScorerReranker(scorer))

    @classmethod
    def single(cls, generator: TextGenerator, scorer: SimilarityScorer | None = None,
               reranker: Reranker | None = None) -> "Backends":
        scorer = scorer or LexicalScorer()
        return cls(generator, generator, generator, scorer, reranker or ScorerReranker(scorer))

    def identities(self) -> dict[str, str]:
        return {
            "summarizer": self.summarizer.identity,
            "extractor": self.extractor.identity,
            "merger": self.merger.identity,
            "scorer": self.scorer.identity,
            "reranker": self.reranker.identity,
        }


@dataclass
class EngineState:
    session_id: str
    config: EngineConfig
    pool: MemoryPool
    nsb: NsbState = field(default_factory=NsbState)
    pcb: PcbState = field(default_factory=PcbState)
    next_turn_index: int = 0
    pending_turn: DialogueTurn | None = None
    last_round: tuple[DialogueTurn, DialogueTurn] | None = None
    first_speaker: Speaker | None = None
    backend_identities: dict[str, str] = field(default_factory=dict)

    @classmethod
    def new(cls, session_id: str, config: EngineConfig | None = None) -> "EngineState":
        config = config or EngineConfig()
        return cls(
            session_id=session_id,
            config=config,
            pool=MemoryPool(capacity_chars=config.capacity_chars),
            first_speaker=config.first_speaker,
        )

    @property
    def current_round(self) -> int:
        return self.pool.current_round

    def exempt_ids(self) -> set[str]:
        return self.nsb.pending_ids()


@dataclass
class StepReport:
    turn_index: int
    completed_round: int | None = None
    created: list[str] = field(default_factory=list)
    persona_updated: list[str] = field(default_factory=list)
    evicted: list[EvictionRecord] = field(default_factory=list)
    merge_errors: list[tuple[str, str]] = field(default_factory=list)
    calls: dict[str, int] = field(default_factory=dict)


@dataclass
class RetrievedMemory:
    id: str
    kind: str
    text: str
    rerank_score: float
    effective_score: float


QueryFn = Callable[[EngineState], str]


def latest_round_query(state: EngineState) -> str:
    """Default retrieval query: the text of the round that just completed."""
    if state.last_round is None:
        return ""
    return format_round(*state.last_round)


def _check_turn(state: EngineState, turn: DialogueTurn) -> None:
    if turn.session_id != state.session_id:
        raise InputFormatError(f"turn belongs to session {turn.session_id!r}, engine holds {state.session_id!r}")
    if turn.turn_index != state.next_turn_index:
        raise TurnOrderError(state.next_turn_index, turn.turn_index)
    first = state.first_speaker or turn.speaker
    other = Speaker.CHATBOT if first is Speaker.USER else Speaker.USER
    expected = first if turn.turn_index % 2 == 0 else other
    if turn.speaker is not expected:
        raise InputFormatError(f"turn {turn.turn_index}: expected speaker {expected.value}, got {turn.speaker.value}")


def ingest_turn(
    state: EngineState,
    turn: DialogueTurn,
    backends: Backends,
    ledger: CallLedger | None = None,
    query_fn: QueryFn = latest_round_query,
) -> tuple[EngineState, StepReport]:
    """Return the state after ``turn`` plus a report of what the round did.

    The input state is never modified. When ``turn`` completes a round the
    branches fire in order NSB, PCB, forgetting; if any of them raises, the
    error propagates and the caller keeps the old state.
    """
    _check_turn(state, turn)
    report = StepReport(turn_index=turn.turn_index)
    if state.pending_turn is None:
        new = copy.copy(state)
        new.pending_turn = turn
        new.next_turn_index = turn.turn_index + 1
        if new.first_speaker is None:
            new.first_speaker = turn.speaker
        return new, report

    new = copy.deepcopy(state)
    pair = (new.pending_turn, turn)
    new.pending_turn = None
    new.next_turn_index = turn.turn_index + 1
    new.last_round = pair
    round_index = turn.round_index
    new.pool.advance_to(round_index)
    report.completed_round = round_index

    ledger = ledger if ledger is not None else CallLedger(state.config.max_calls_per_round)
    cfg = new.config
    summarizer = MeteredGenerator(backends.summarizer, ledger, "summarize", round_index)
    extractor = MeteredGenerator(backends.extractor, ledger, "snapshot", round_index)
    merger = MeteredGenerator(backends.merger, ledger, "merge", round_index)

    created = nsb_step(new.nsb, new.pool, pair, summarizer, cfg.nsb)
    report.created = [item.id for item in created]

    pcb = pcb_step(new.pcb, new.pool, pair, extractor, merger, backends.scorer, cfg.pcb)
    report.persona_updated = [item.id for item in pcb.items]
    report.merge_errors = pcb.errors

    exempt_ids = new.exempt_ids()
    outcome = forgetting_step(
        new.pool, query_fn(new), backends.reranker, cfg.forgetting, exempt=lambda it: it.id in exempt_ids
    )
    report.evicted = outcome.evicted
    # The cached score is for display and retrieval tie-breaks only; keep it at
    # stored precision so a reloaded state answers queries identically.
    for item in new.pool:
        item.last_score = round_significant(item.last_score)
    report.calls = ledger.calls_in_round(round_index)
    new.backend_identities = backends.identities()
    return new, report


class Engine:
    """Single-session memory engine.

    Writes are serialized by a lock; :meth:`retrieve` and the inspection helpers
    only read the current state object, which is swapped atomically after each
    successful turn.
    """

    def __init__(
        self,
        session_id: str = "default",
        config: EngineConfig | None = None,
        backends: Backends | None = None,
        *,
        state: EngineState | None = None,
        query_fn: QueryFn = latest_round_query,
        on_event: Callable[[dict], None] | None = None,
    ):
        self.state = state or EngineState.new(session_id, config)
        self.backends = backends or Backends.mock()
        self.ledger = CallLedger(self.state.config.max_calls_per_round)
        self.query_fn = query_fn
        self.on_event = on_event
        self._lock = threading.RLock()

    @property
    def config(self) -> EngineConfig:
        return self.state.config

    @property
    def session_id(self) -> str:
        return self.state.session_id

    @property
    def pool(self) -> MemoryPool:
        return self.state.pool

    def ingest_turn(self, turn: DialogueTurn) -> StepReport:
        with self._lock:
            self.state, report = ingest_turn(self.state, turn, self.backends, self.ledger, self.query_fn)
            if self.on_event is not None:
                self.on_event({"type": "turn", **turn.to_record()})
                for record in report.evicted:
                    self.on_event({"type": "evict", **record.to_record()})
            return report

    def add_turn(self, speaker: Speaker | str, text: str) -> StepReport:
        """Ingest the next turn without spelling out its index."""
        with self._lock:
            turn = DialogueTurn(self.session_id, self.state.next_turn_index, Speaker(speaker), text)
            return self.ingest_turn(turn)

    def ingest(self, turns: Transcript | Iterable[DialogueTurn]) -> list[StepReport]:
        turns = turns.turns if isinstance(turns, Transcript) else turns
        return [self.ingest_turn(turn) for turn in turns]

    def retrieve(self, query: str, k: int | None = None) -> list[RetrievedMemory]:
        """Top-``k`` memories for ``query`` without touching retrieval bookkeeping."""
        state = self.state
        k = k or state.config.retrieval_k
        if not len(state.pool) or not query.strip():
            return []
        partition = partition_retrieval(state.pool, query, self.backends.reranker, state.config.forgetting)
        ranked = (partition.relevant + partition.noisy + partition.unactivated)[:k]
        out = []
        for item_id in ranked:
            item: MemoryItem = state.pool.items[item_id]
            out.append(RetrievedMemory(
                item.id, item.kind.value, item.text, partition.rerank_scores[item_id], item.last_score
            ))
        return out

    def memories(self) -> list[MemoryItem]:
        return list(self.state.pool)

    def persona(self) -> dict[str, list[str]]:
        return self.state.pcb.sketch.as_dict()

    def stats(self) -> dict:
        state = self.state
        pool = state.pool
        kinds: dict[str, int] = {}
        for item in pool:
            kinds[item.kind.value] = kinds.get(item.kind.value, 0) + 1
        return {
            "session_id": state.session_id,
            "turns": state.next_turn_index,
            "current_round": pool.current_round,
            "memory_count": len(pool),
            "total_chars": pool.total_chars(),
            "capacity_chars": pool.capacity_chars,
            "kinds": dict(sorted(kinds.items())),
            "narrative_units_created": {str(k): v for k, v in sorted(state.nsb.counts.items())},
            "policy": state.config.forgetting.policy.value,
        }
