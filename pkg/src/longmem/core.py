"""Domain types shared by every branch: turns, transcripts and the memory pool."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

from .errors import InputFormatError, InvariantBreachError

logger = logging.getLogger(__name__)

# Per-item retrieval history is capped; older terms contribute < 0.015 each.
MAX_RETRIEVAL_ROUNDS = 64
SIGNIFICANT_DIGITS = 9


def round_significant(value: float, digits: int = SIGNIFICANT_DIGITS) -> float:
    """Round to ``digits`` significant digits, the precision used for stored and displayed scores."""
    return float(f"{value:.{digits}g}")


class Speaker(str, Enum):
    USER = "user"
    CHATBOT = "chatbot"

    @property
    def label(self) -> str:
        return "user" if self is Speaker.USER else "bot"


class MemoryKind(str, Enum):
    NARRATIVE_LEVEL1 = "narrative_level1"
    NARRATIVE_LEVEL2 = "narrative_level2"
    NARRATIVE_LEVEL3 = "narrative_level3"
    PERSONA_FACT = "persona_fact"

    @classmethod
    def for_level(cls, level: int) -> "MemoryKind":
        return {1: cls.NARRATIVE_LEVEL1, 2: cls.NARRATIVE_LEVEL2, 3: cls.NARRATIVE_LEVEL3}[level]


@dataclass(frozen=True)
class DialogueTurn:
    """One utterance by one speaker.

    ``round_index`` is the 1-based round the turn belongs to: turns 0 and 1 form
    round 1, turns 2 and 3 form round 2, and so on.
    """

    session_id: str
    turn_index: int
    speaker: Speaker
    text: str

    def __post_init__(self):
        if self.turn_index < 0:
            raise InputFormatError(f"turn_index must be non-negative, got {self.turn_index}")
        if not isinstance(self.text, str) or not self.text.strip():
            raise InputFormatError(f"turn {self.turn_index}: text must be non-empty")
        if not isinstance(self.speaker, Speaker):
            try:
                object.__setattr__(self, "speaker", Speaker(self.speaker))
            except ValueError as exc:
                raise InputFormatError(f"turn {self.turn_index}: unknown speaker {self.speaker!r}") from exc

    @property
    def round_index(self) -> int:
        return self.turn_index // 2 + 1

    def to_record(self) -> dict:
        return {
            "session_id": self.session_id,
            "turn_index": self.turn_index,
            "speaker": self.speaker.value,
            "text": self.text,
        }

    @classmethod
    def from_record(cls, record: dict) -> "DialogueTurn":
        try:
            return cls(
                session_id=str(record["session_id"]),
                turn_index=int(record["turn_index"]),
                speaker=record["speaker"],
                text=record["text"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InputFormatError):
                raise
            raise InputFormatError(f"bad turn record {record!r}: {exc}") from exc


@dataclass
class Transcript:
    session_id: str
    turns: list[DialogueTurn] = field(default_factory=list)

    def __post_init__(self):
        for expected, turn in enumerate(self.turns):
            if turn.turn_index != expected:
                raise InputFormatError(
                    f"transcript {self.session_id}: expected turn_index {expected}, got {turn.turn_index}"
                )
            if turn.session_id != self.session_id:
                raise InputFormatError(f"turn {turn.turn_index} belongs to session {turn.session_id}")
        for prev, cur in zip(self.turns, self.turns[1:]):
            if prev.speaker == cur.speaker:
                raise InputFormatError(f"turn {cur.turn_index}: speakers must alternate")

    def __len__(self) -> int:
        return len(self.turns)


def pair_rounds(transcript: Transcript | Iterable[DialogueTurn]) -> list[tuple[DialogueTurn, DialogueTurn]]:
    """Pair consecutive turns into rounds; a trailing odd turn is left out."""
    turns = list(transcript.turns if isinstance(transcript, Transcript) else transcript)
    return [(turns[i], turns[i + 1]) for i in range(0, len(turns) - 1, 2)]


def format_round(first: DialogueTurn, second: DialogueTurn) -> str:
    return f"{first.speaker.label}: {first.text}\n{second.speaker.label}: {second.text}"


def iter_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise InputFormatError(f"{path}:{lineno}: expected an object")
            yield record


def read_transcripts(path: str | Path) -> dict[str, Transcript]:
    """Read a JSONL transcript file; records may interleave several sessions."""
    by_session: dict[str, list[DialogueTurn]] = {}
    for record in iter_jsonl(path):
        turn = DialogueTurn.from_record(record)
        by_session.setdefault(turn.session_id, []).append(turn)
    return {
        sid: Transcript(sid, sorted(turns, key=lambda t: t.turn_index))
        for sid, turns in by_session.items()
    }


@dataclass
class MemoryItem:
    id: str
    kind: MemoryKind
    text: str
    creation_round: int
    source_span: tuple[int, int]
    retrieval_rounds: list[int] = field(default_factory=list)
    suppression_factor: float = 1.0
    last_score: float = 0.0
    # Pending NSB units must survive until they are aggregated.
    exempt: bool = False
    persona_key: str | None = None

    def __post_init__(self):
        if not self.text:
            raise InvariantBreachError(f"memory {self.id}: empty text")
        self.kind = MemoryKind(self.kind)
        self.source_span = tuple(self.source_span)

    def record_retrieval(self, round_index: int) -> None:
        if round_index < self.creation_round:
            raise InvariantBreachError(
                f"memory {self.id}: retrieval round {round_index} precedes creation round {self.creation_round}"
            )
        if round_index not in self.retrieval_rounds:
            self.retrieval_rounds.append(round_index)
            self.retrieval_rounds.sort()
            del self.retrieval_rounds[:-MAX_RETRIEVAL_ROUNDS]

    @property
    def size(self) -> int:
        return len(self.text)


@dataclass
class MemoryPool:
    items: dict[str, MemoryItem] = field(default_factory=dict)
    capacity_chars: int | None = None
    current_round: int = 0
    next_seq: int = 1

    def __post_init__(self):
        if self.capacity_chars is not None and self.capacity_chars <= 0:
            raise InvariantBreachError("capacity_chars must be positive")

    def new_id(self) -> str:
        # Ids are never reused, even after eviction.
        item_id = f"m{self.next_seq:06d}"
        self.next_seq += 1
        return item_id

    def add(self, item: MemoryItem) -> MemoryItem:
        if item.id in self.items:
            raise InvariantBreachError(f"duplicate memory id {item.id}")
        self.items[item.id] = item
        return item

    def remove(self, item_id: str) -> MemoryItem:
        return self.items.pop(item_id)

    def advance_to(self, round_index: int) -> None:
        if round_index < self.current_round:
            raise InvariantBreachError(f"round may not go backwards ({self.current_round} -> {round_index})")
        self.current_round = round_index

    def total_chars(self) -> int:
        return sum(item.size for item in self.items.values())

    def by_kind(self, kind: MemoryKind) -> list[MemoryItem]:
        return [item for item in self.items.values() if item.kind == kind]

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[MemoryItem]:
        return iter(self.items.values())

    def __contains__(self, item_id: object) -> bool:
        return item_id in self.items
