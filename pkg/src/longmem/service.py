"""Session registry and response models shared by the HTTP API and the CLI.

Both front ends call the functions here and serialize the same pydantic
models, so a request answered over HTTP and the equivalent CLI invocation
produce the same JSON.
"""

from __future__ import annotations

import logging
import threading
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, Field

from . import store
from .backends import LexicalScorer, RemoteGenerator, ScorerReranker
from .config import EngineConfig
from .core import DialogueTurn, Speaker
from .engine import Backends, Engine, StepReport
from .errors import ConfigError

logger = logging.getLogger(__name__)

BACKEND_CHOICES = ("mock-echo", "mock-sum", "remote")


def make_backends(name: str, config: EngineConfig) -> Backends:
    if name == "mock-sum":
        return Backends.mock("template_sum")
    if name == "mock-echo":
        return Backends.mock("echo")
    if name == "remote":
        if config.remote is None:
            raise ConfigError("--backend remote needs a 'remote' section in the config file")
        scorer = LexicalScorer()
        return Backends.single(RemoteGenerator(config.remote), scorer, ScorerReranker(scorer))
    raise ConfigError(f"unknown backend {name!r}; choose from {', '.join(BACKEND_CHOICES)}")


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class TurnIn(BaseModel):
    session_id: str = "default"
    turn_index: int | None = Field(default=None, ge=0)
    speaker: Literal["user", "chatbot"]
    text: str = Field(min_length=1)


class EvictionOut(BaseModel):
    round: int
    evicted_id: str
    effective_score: float
    policy: str
    kind: str


class StepOut(BaseModel):
    session_id: str
    turn_index: int
    completed_round: int | None
    created: list[str]
    persona_updated: list[str]
    evicted: list[EvictionOut]
    merge_errors: list[tuple[str, str]]


class MemoryOut(BaseModel):
    id: str
    kind: str
    text: str
    creation_round: int
    retrieval_rounds: list[int]
    suppression_factor: float
    last_score: float
    exempt: bool
    source_span: tuple[int, int]


class MemoriesOut(BaseModel):
    session_id: str
    current_round: int
    memories: list[MemoryOut]


class RetrieveIn(BaseModel):
    session_id: str = "default"
    query: str = Field(min_length=1)
    k: int | None = Field(default=None, ge=1)


class RetrievedOut(BaseModel):
    id: str
    kind: str
    text: str
    rerank_score: float
    effective_score: float


class RetrieveOut(BaseModel):
    session_id: str
    query: str
    results: list[RetrievedOut]


class PersonaOut(BaseModel):
    session_id: str
    persona: dict[str, list[str]]


class StatsOut(BaseModel):
    session_id: str
    turns: int
    current_round: int
    memory_count: int
    total_chars: int
    capacity_chars: int | None
    kinds: dict[str, int]
    narrative_units_created: dict[str, int]
    policy: str


# ---------------------------------------------------------------------------
# Views over an engine
# ---------------------------------------------------------------------------


def step_view(engine: Engine, report: StepReport) -> StepOut:
    return StepOut(
        session_id=engine.session_id,
        turn_index=report.turn_index,
        completed_round=report.completed_round,
        created=report.created,
        persona_updated=report.persona_updated,
        evicted=[EvictionOut(**r.to_record()) for r in report.evicted],
        merge_errors=report.merge_errors,
    )


def memories_view(engine: Engine) -> MemoriesOut:
    return MemoriesOut(
        session_id=engine.session_id,
        current_round=engine.pool.current_round,
        memories=[
            MemoryOut(
                id=m.id, kind=m.kind.value, text=m.text, creation_round=m.creation_round,
                retrieval_rounds=m.retrieval_rounds, suppression_factor=m.suppression_factor,
                last_score=m.last_score, exempt=m.exempt, source_span=m.source_span,
            )
            for m in engine.memories()
        ],
    )


def retrieve_view(engine: Engine, query: str, k: int | None = None) -> RetrieveOut:
    results = [RetrievedOut(**vars(r)) for r in engine.retrieve(query, k)]
    return RetrieveOut(session_id=engine.session_id, query=query, results=results)


def persona_view(engine: Engine) -> PersonaOut:
    return PersonaOut(session_id=engine.session_id, persona=engine.persona())


def stats_view(engine: Engine) -> StatsOut:
    return StatsOut(**engine.stats())


def add_turn(engine: Engine, body: TurnIn) -> StepOut:
    with engine._lock:
        index = engine.state.next_turn_index if body.turn_index is None else body.turn_index
        turn = DialogueTurn(body.session_id, index, Speaker(body.speaker), body.text)
        return step_view(engine, engine.ingest_turn(turn))


# ---------------------------------------------------------------------------
# Session registry
# ---------------------------------------------------------------------------


class MemoryService:
    """Holds one engine per session; optionally persists each to ``state_dir``.

    Sessions are independent. Writes to one session are serialized by that
    engine's lock; creating sessions is guarded by a registry lock.
    """

    def __init__(self, config: EngineConfig | None = None, backend: str = "mock-sum",
                 state_dir: str | Path | None = None):
        self.config = config or EngineConfig()
        self.backend = backend
        self.state_dir = Path(state_dir) if state_dir else None
        self._engines: dict[str, Engine] = {}
        self._lock = threading.Lock()
        make_backends(backend, self.config)  # fail fast on a bad backend choice

    def _path(self, session_id: str) -> Path | None:
        if self.state_dir is None:
            return None
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in session_id)
        return self.state_dir / f"{safe}.json"

    def engine(self, session_id: str, create: bool = True) -> Engine | None:
        with self._lock:
            engine = self._engines.get(session_id)
            if engine is not None:
                return engine
            path = self._path(session_id)
            if path is not None and path.exists():
                state = store.load_file(path)
                engine = Engine(state=state, backends=make_backends(self.backend, state.config))
            elif create:
                engine = Engine(session_id, self.config, make_backends(self.backend, self.config))
            else:
                return None
            self._engines[session_id] = engine
            return engine

    def sessions(self) -> list[str]:
        return sorted(self._engines)

    def add_turn(self, body: TurnIn) -> StepOut:
        engine = self.engine(body.session_id)
        with engine._lock:
            out = add_turn(engine, body)
            path = self._path(body.session_id)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                store.save_file(engine.state, path)
            return out
