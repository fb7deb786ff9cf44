"""Persona construction: periodic key-value snapshots merged into a running sketch.

Each schema key has a merge category. Replace, append and trajectory keys are
merged by fixed rules, contradictory keys use a similarity scorer to drop
outdated values from their partner key, and complex keys are handed to the text
backend. Merge functions never mutate their input sketch; they return a copy.
"""

from __future__ import annotations

import copy
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib.resources import files
from pathlib import Path

import yaml

from .backends import SimilarityScorer, TextGenerator
from .core import DialogueTurn, MemoryItem, MemoryKind, MemoryPool, format_round
from .errors import BackendError, ConfigError, InvariantBreachError, LongMemError, ParseError
from .templates import render

logger = logging.getLogger(__name__)


class Category(str, Enum):
    REPLACE = "replace"
    APPEND = "append"
    TRAJECTORY = "trajectory"
    CONTRADICTORY = "contradictory"
    COMPLEX = "complex"


@dataclass(frozen=True)
class PersonaKeySchema:
    key_name: str
    category: Category
    conflict_partner: str | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "category", Category(self.category))
        except ValueError as exc:
            raise ConfigError(f"persona key {self.key_name!r}: unknown category {self.category!r}") from exc
        if (self.category is Category.CONTRADICTORY) != (self.conflict_partner is not None):
            raise ConfigError(f"persona key {self.key_name!r}: conflict_partner is required iff contradictory")

    def to_record(self) -> dict:
        record = {"key_name": self.key_name, "category": self.category.value}
        if self.conflict_partner is not None:
            record["conflict_partner"] = self.conflict_partner
        return record


def validate_schema(schema: list[PersonaKeySchema]) -> dict[str, PersonaKeySchema]:
    if not schema:
        raise ConfigError("persona schema must not be empty")
    by_name: dict[str, PersonaKeySchema] = {}
    for entry in schema:
        if entry.key_name in by_name:
            raise ConfigError(f"duplicate persona key {entry.key_name!r}")
        by_name[entry.key_name] = entry
    for entry in schema:
        if entry.conflict_partner is None:
            continue
        partner = by_name.get(entry.conflict_partner)
        if partner is None or partner.conflict_partner != entry.key_name:
            raise ConfigError(f"persona key {entry.key_name!r}: conflict partnership must be symmetric")
    return by_name


def load_schema(path: str | Path | None = None) -> list[PersonaKeySchema]:
    if path is None:
        raw = (files("longmem") / "data" / "default_schema.yaml").read_text(encoding="utf-8")
    else:
        raw = Path(path).read_text(encoding="utf-8")
    try:
        records = yaml.safe_load(raw)
        schema = [PersonaKeySchema(**record) for record in records]
    except (yaml.YAMLError, TypeError) as exc:
        raise ConfigError(f"bad persona schema file: {exc}") from exc
    validate_schema(schema)
    return schema


@dataclass
class PcbConfig:
    snapshot_interval_rounds: int = 10
    contradiction_threshold: float = 0.8
    schema: list[PersonaKeySchema] = field(default_factory=load_schema)
    snapshot_max_length: int = 1024

    def __post_init__(self):
        if self.snapshot_interval_rounds < 1:
            raise ConfigError("pcb.snapshot_interval_rounds must be positive")
        if not 0.0 <= self.contradiction_threshold <= 1.0:
            raise ConfigError("pcb.contradiction_threshold must lie in [0, 1]")
        self.schema = [s if isinstance(s, PersonaKeySchema) else PersonaKeySchema(**s) for s in self.schema]
        self._by_name = validate_schema(self.schema)

    def key(self, name: str) -> PersonaKeySchema:
        try:
            return self._by_name[name]
        except KeyError:
            raise InvariantBreachError(f"unknown persona key {name!r}") from None

    @property
    def key_names(self) -> list[str]:
        return [s.key_name for s in self.schema]


@dataclass
class PersonaSnapshot:
    window_span: tuple[int, int]
    entries: dict[str, list[str]] = field(default_factory=dict)
    dropped_keys: list[str] = field(default_factory=list)


@dataclass
class PersonaSketch:
    entries: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    last_snapshot_round: int = 0

    def values(self, key: str) -> list[str]:
        return [value for value, _ in self.entries.get(key, [])]

    def copy(self) -> "PersonaSketch":
        return copy.deepcopy(self)

    def as_dict(self) -> dict[str, list[str]]:
        return {key: self.values(key) for key in self.entries if self.entries[key]}


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_FENCE = re.compile(r"^```(?:json)?\s*|\s*```$", re.MULTILINE)


def _load_json(raw: str, opener: str, closer: str) -> object:
    text = _FENCE.sub("", raw.strip())
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        start, end = text.find(opener), text.rfind(closer)
        if start == -1 or end <= start:
            raise ParseError("no JSON payload in backend output", raw) from None
        try:
            return json.loads(text[start:end + 1])
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON in backend output: {exc.msg}", raw) from exc


def _clean_values(value: object, raw: str) -> list[str]:
    if value is None:
        return []
    if isinstance(value, (str, int, float)):
        value = [value]
    if not isinstance(value, list):
        raise ParseError(f"expected a list of strings, got {type(value).__name__}", raw)
    cleaned = []
    for v in value:
        if isinstance(v, (dict, list)):
            raise ParseError("persona values must be scalars", raw)
        if v is None:
            continue
        s = str(v).strip()
        if s:
            cleaned.append(s)
    return cleaned


def parse_snapshot_output(raw: str) -> dict[str, list[str]]:
    payload = _load_json(raw, "{", "}")
    if not isinstance(payload, dict):
        raise ParseError("snapshot output must be a JSON object", raw)
    return {str(k): _clean_values(v, raw) for k, v in payload.items()}


def parse_value_list(raw: str) -> list[str]:
    payload = _load_json(raw, "[", "]")
    if not isinstance(payload, list):
        raise ParseError("merge output must be a JSON list", raw)
    return list(dict.fromkeys(_clean_values(payload, raw)))


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


def window_text(window: list[DialogueTurn]) -> str:
    lines = []
    for i in range(0, len(window) - 1, 2):
        lines.append(format_round(window[i], window[i + 1]))
    if len(window) % 2:
        last = window[-1]
        lines.append(f"{last.speaker.label}: {last.text}")
    return "\n".join(lines)


def extract_snapshot(
    window: list[DialogueTurn],
    schema: list[PersonaKeySchema],
    backend: TextGenerator,
    max_length: int = 1024,
) -> PersonaSnapshot:
    """Ask the backend for a persona snapshot of ``window`` restricted to ``schema`` keys.

    Keys the backend invents are dropped (and logged); keys it omits come back
    as empty lists.
    """
    if not window:
        raise InvariantBreachError("snapshot window must not be empty")
    names = [s.key_name for s in schema]
    prompt = render("persona_snapshot.txt", keys=", ".join(names), dialogue=window_text(window))
    raw = backend.generate(prompt, max_length)
    parsed = parse_snapshot_output(raw)
    snapshot = PersonaSnapshot(window_span=(window[0].round_index, window[-1].round_index))
    known = set(names)
    for key, values in parsed.items():
        if key not in known:
            snapshot.dropped_keys.append(key)
            logger.warning("snapshot key %r is not in the persona schema; dropped", key)
            continue
        snapshot.entries[key] = list(dict.fromkeys(values))
    for name in names:
        snapshot.entries.setdefault(name, [])
    return snapshot


# ---------------------------------------------------------------------------
# Merge rules
# ---------------------------------------------------------------------------


def merge_replace(sketch: PersonaSketch, key: str, new_values: list[str]) -> PersonaSketch:
    out = sketch.copy()
    if new_values:
        out.entries[key] = [(new_values[-1], 0)]
    return out


def merge_append(sketch: PersonaSketch, key: str, new_values: list[str]) -> PersonaSketch:
    out = sketch.copy()
    current = out.entries.setdefault(key, [])
    seen = {value for value, _ in current}
    for value in new_values:
        if value not in seen:
            current.append((value, 0))
            seen.add(value)
    return out


def merge_trajectory(sketch: PersonaSketch, key: str, new_values: list[str]) -> PersonaSketch:
    """Age existing values by one stamp and add ``new_values`` at stamp 0.

    A value mentioned again moves to the recent end with stamp 0.
    """
    out = sketch.copy()
    if not new_values:
        return out
    fresh = list(dict.fromkeys(new_values))
    kept = [(value, stamp + 1) for value, stamp in out.entries.get(key, []) if value not in fresh]
    out.entries[key] = kept + [(value, 0) for value in fresh]
    return out


def merge_contradictory(
    sketch: PersonaSketch,
    key: str,
    new_values: list[str],
    scorer: SimilarityScorer,
    config: PcbConfig,
) -> PersonaSketch:
    partner = config.key(key).conflict_partner
    if partner is None:
        raise InvariantBreachError(f"persona key {key!r} has no conflict partner")
    out = merge_append(sketch, key, new_values)
    if not new_values:
        return out
    survivors = []
    for value, stamp in out.entries.get(partner, []):
        try:
            sims = [scorer.score(new, value) for new in new_values]
        except LongMemError:
            raise
        except Exception as exc:
            raise BackendError(f"scorer {scorer.identity} failed: {exc}") from exc
        if max(sims) >= config.contradiction_threshold:
            logger.debug("dropping %s=%r, contradicted by new %s values", partner, value, key)
        else:
            survivors.append((value, stamp))
    if partner in out.entries:
        out.entries[partner] = survivors
    return out


def merge_complex(
    sketch: PersonaSketch,
    key: str,
    new_values: list[str],
    backend: TextGenerator,
    max_length: int = 1024,
) -> PersonaSketch:
    if not new_values:
        return sketch.copy()
    prompt = render(
        "persona_merge.txt",
        key=key,
        old=json.dumps(sketch.values(key), ensure_ascii=False),
        new=json.dumps(list(new_values), ensure_ascii=False),
    )
    merged = parse_value_list(backend.generate(prompt, max_length))
    out = sketch.copy()
    out.entries[key] = [(value, 0) for value in merged]
    return out


def merge_key(
    sketch: PersonaSketch,
    key: str,
    new_values: list[str],
    config: PcbConfig,
    backend: TextGenerator,
    scorer: SimilarityScorer,
) -> PersonaSketch:
    category = config.key(key).category
    if category is Category.REPLACE:
        return merge_replace(sketch, key, new_values)
    if category is Category.APPEND:
        return merge_append(sketch, key, new_values)
    if category is Category.TRAJECTORY:
        return merge_trajectory(sketch, key, new_values)
    if category is Category.CONTRADICTORY:
        return merge_contradictory(sketch, key, new_values, scorer, config)
    return merge_complex(sketch, key, new_values, backend, config.snapshot_max_length)


# ---------------------------------------------------------------------------
# Branch step
# ---------------------------------------------------------------------------


@dataclass
class PcbState:
    sketch: PersonaSketch = field(default_factory=PersonaSketch)
    # Turns of completed rounds since the last snapshot.
    window: list[DialogueTurn] = field(default_factory=list)
    # Persona key -> id of the pool item that renders it.
    item_ids: dict[str, str] = field(default_factory=dict)


@dataclass
class PcbStepResult:
    items: list[MemoryItem] = field(default_factory=list)
    removed: list[str] = field(default_factory=list)
    snapshot: PersonaSnapshot | None = None
    errors: list[tuple[str, str]] = field(default_factory=list)


def persona_text(key: str, values: list[str]) -> str:
    return f"{key}: " + "; ".join(values)


def pcb_step(
    state: PcbState,
    pool: MemoryPool,
    round_turns: tuple[DialogueTurn, DialogueTurn],
    extractor: TextGenerator,
    merger: TextGenerator,
    scorer: SimilarityScorer,
    config: PcbConfig,
) -> PcbStepResult:
    """Absorb one completed round; every ``snapshot_interval_rounds`` rounds, snapshot and merge.

    Extraction errors propagate and leave the state untouched. Merge errors are
    per key: a failing key keeps its old values and is reported in ``errors``
    while the other keys still merge.
    """
    window = state.window + list(round_turns)
    current_round = pool.current_round
    if current_round - state.sketch.last_snapshot_round < config.snapshot_interval_rounds:
        state.window = window
        return PcbStepResult()

    snapshot = extract_snapshot(window, config.schema, extractor, config.snapshot_max_length)
    result = PcbStepResult(snapshot=snapshot)
    before = state.sketch
    sketch = before.copy()
    for name in config.key_names:
        values = snapshot.entries.get(name, [])
        if not values:
            continue
        try:
            sketch = merge_key(sketch, name, values, config, merger, scorer)
        except BackendError as exc:
            logger.warning("round %d: merge of %s failed: %s", current_round, name, exc)
            result.errors.append((name, str(exc)))
    sketch.last_snapshot_round = current_round

    span = (window[0].turn_index, window[-1].turn_index)
    for name in config.key_names:
        new = sketch.values(name)
        if new == before.values(name):
            continue
        item_id = state.item_ids.get(name)
        if not new:
            if item_id is not None:
                if item_id in pool:
                    pool.remove(item_id)
                    result.removed.append(item_id)
                del state.item_ids[name]
            continue
        text = persona_text(name, new)
        if item_id is not None and item_id in pool:
            item = pool.items[item_id]
            item.text = text
            item.source_span = (item.source_span[0], span[1])
        else:
            item = pool.add(MemoryItem(
                id=pool.new_id(),
                kind=MemoryKind.PERSONA_FACT,
                text=text,
                creation_round=current_round,
                source_span=span,
                persona_key=name,
            ))
            state.item_ids[name] = item.id
        result.items.append(item)

    state.sketch = sketch
    state.window = []
    return result
