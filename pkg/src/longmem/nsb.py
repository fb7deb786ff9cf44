"""Narrative summarization: count-based packaging of rounds into a 3-level story tree.

Every ``theta1`` completed rounds become one level-1 unit holding the verbatim
rounds. Every ``theta2`` level-1 units are summarized by the text backend into a
level-2 unit, and every ``theta3`` level-2 units into a level-3 unit. Level 3 is
the top; nothing aggregates it further.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

from .backends import TextGenerator
from .core import DialogueTurn, MemoryItem, MemoryKind, MemoryPool
from .errors import ConfigError, InvariantBreachError
from .templates import render

logger = logging.getLogger(__name__)

MAX_LEVEL = 3


@dataclass
class NsbConfig:
    theta1: int = 6
    theta2: int = 5
    theta3: int = 5
    summary_max_length: int = 1024

    def __post_init__(self):
        for name in ("theta1", "theta2", "theta3"):
            if getattr(self, name) < 2:
                raise ConfigError(f"nsb.{name} must be at least 2")
        if self.summary_max_length < 1:
            raise ConfigError("nsb.summary_max_length must be positive")

    def threshold_into(self, level: int) -> int:
        """Number of level-(level-1) units that make one level-``level`` unit."""
        return {2: self.theta2, 3: self.theta3}[level]


@dataclass
class NarrativeUnit:
    id: str
    level: int
    index_at_level: int
    text: str
    span_rounds: tuple[int, int]
    span_turns: tuple[int, int]
    children: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.span_rounds = tuple(self.span_rounds)
        self.span_turns = tuple(self.span_turns)


@dataclass
class NsbState:
    # Complete rounds not yet packaged, flattened to turns.
    buffer: list[DialogueTurn] = field(default_factory=list)
    # Units waiting for siblings, keyed by their level (1 and 2 only).
    pending: dict[int, list[NarrativeUnit]] = field(default_factory=lambda: {1: [], 2: []})
    counts: dict[int, int] = field(default_factory=lambda: {1: 0, 2: 0, 3: 0})

    def pending_ids(self) -> set[str]:
        return {unit.id for units in self.pending.values() for unit in units}


def level1_text(turns: list[DialogueTurn]) -> str:
    lines = []
    for i in range(0, len(turns), 2):
        first, second = turns[i], turns[i + 1]
        lines.append(
            f"round {first.round_index}: {first.speaker.label}: {first.text}; "
            f"{second.speaker.label}: {second.text}"
        )
    return "\n".join(lines)


def package_level1(
    buffer: list[DialogueTurn], config: NsbConfig, new_id: Callable[[], str], index_at_level: int = 1
) -> NarrativeUnit | None:
    """Cut one level-1 unit off the front of ``buffer`` once it holds ``theta1`` rounds.

    ``buffer`` must contain complete rounds only. The packaged turns are removed
    from it in place.
    """
    needed = 2 * config.theta1
    if len(buffer) % 2:
        raise InvariantBreachError("NSB buffer must hold complete rounds")
    if len(buffer) < needed:
        return None
    turns = buffer[:needed]
    del buffer[:needed]
    return NarrativeUnit(
        id=new_id(),
        level=1,
        index_at_level=index_at_level,
        text=level1_text(turns),
        span_rounds=(turns[0].round_index, turns[-1].round_index),
        span_turns=(turns[0].turn_index, turns[-1].turn_index),
    )


def summarize_level(
    units: list[NarrativeUnit],
    level: int,
    backend: TextGenerator,
    config: NsbConfig,
    new_id: Callable[[], str],
    index_at_level: int = 1,
) -> NarrativeUnit | None:
    """Summarize ``theta`` contiguous level-``level`` units into one unit one level up.

    Returns ``None`` while fewer units than the threshold are available.
    """
    if not 1 <= level < MAX_LEVEL:
        raise InvariantBreachError(f"cannot summarize level {level}")
    threshold = config.threshold_into(level + 1)
    if len(units) < threshold:
        return None
    if len(units) > threshold:
        raise InvariantBreachError(f"got {len(units)} level-{level} units, expected {threshold}")
    if any(u.level != level for u in units):
        raise InvariantBreachError("units passed to summarize_level must share one level")
    for prev, cur in zip(units, units[1:]):
        if cur.span_rounds[0] != prev.span_rounds[1] + 1:
            raise InvariantBreachError(f"units {prev.id} and {cur.id} are not contiguous")

    ids = [u.id for u in units]
    prompt = render(
        f"summarize_level{level + 1}.txt",
        target_level=level + 1,
        ids=",".join(ids),
        count=len(units),
        segments="\n\n".join(f"[{u.id}]\n{u.text}" for u in units),
    )
    text = backend.generate(prompt, config.summary_max_length).strip()
    if not text:
        # An empty summary would make an unstorable memory item.
        text = f"(empty summary of {', '.join(ids)})"
        logger.warning("backend %s returned an empty level-%d summary", backend.identity, level + 1)
    return NarrativeUnit(
        id=new_id(),
        level=level + 1,
        index_at_level=index_at_level,
        text=text,
        span_rounds=(units[0].span_rounds[0], units[-1].span_rounds[1]),
        span_turns=(units[0].span_turns[0], units[-1].span_turns[1]),
        children=ids,
    )


def _as_item(unit: NarrativeUnit, current_round: int) -> MemoryItem:
    return MemoryItem(
        id=unit.id,
        kind=MemoryKind.for_level(unit.level),
        text=unit.text,
        creation_round=current_round,
        source_span=unit.span_turns,
        exempt=unit.level < MAX_LEVEL,
    )


def nsb_step(
    state: NsbState,
    pool: MemoryPool,
    round_turns: tuple[DialogueTurn, DialogueTurn],
    backend: TextGenerator,
    config: NsbConfig,
) -> list[MemoryItem]:
    """Absorb one completed round and cascade packaging and summarization.

    All new units are built before anything is committed, so a backend failure
    leaves ``state`` and ``pool`` untouched.
    """
    current_round = pool.current_round
    seq_before = pool.next_seq
    buffer = state.buffer + list(round_turns)
    pending = {level: list(units) for level, units in state.pending.items()}
    counts = dict(state.counts)
    created: list[NarrativeUnit] = []
    consumed: list[NarrativeUnit] = []

    try:
        unit = package_level1(buffer, config, pool.new_id, counts[1] + 1)
        if unit is not None:
            counts[1] += 1
            created.append(unit)
            pending[1].append(unit)
            for level in range(1, MAX_LEVEL):
                higher = summarize_level(
                    pending[level], level, backend, config, pool.new_id, counts[level + 1] + 1
                )
                if higher is None:
                    break
                counts[level + 1] += 1
                created.append(higher)
                consumed.extend(pending[level])
                pending[level] = []
                if level + 1 < MAX_LEVEL:
                    pending[level + 1].append(higher)
    except Exception:
        pool.next_seq = seq_before
        raise

    items = [_as_item(u, current_round) for u in created]
    for item in items:
        pool.add(item)
    for child in consumed:
        # Consumed units stay in the pool but become forgettable.
        if child.id in pool:
            pool.items[child.id].exempt = False
    state.buffer = buffer
    state.pending = pending
    state.counts = counts
    if items:
        logger.debug("round %d: NSB created %s", current_round, [i.id for i in items])
    return items

