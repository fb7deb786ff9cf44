"""State documents and event logs.

A state file is one canonical JSON document::

    {"checksum":"<sha256 of the canonical state>","state":{"format_version":1,...}}

Canonical means sorted keys, no insignificant whitespace, UTF-8, and every float
rounded to 9 significant digits, so equal states always produce equal bytes.
Suppression factors are stored as their number of halvings to keep them exact.

An event log is JSON Lines: a ``header`` record carrying the config, then one
``turn`` record per ingested turn, interleaved with ``evict`` audit records.
Replaying the turn records from an empty state reproduces the saved state.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import IO, Iterator

from .config import EngineConfig
from .core import DialogueTurn, MemoryItem, MemoryPool, Speaker, round_significant
from .errors import CorruptStateError, InputFormatError, VersionMismatchError
from .nsb import NarrativeUnit, NsbState
from .pcb import PcbState, PersonaSketch

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def _canon(obj):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError(f"cannot serialize non-finite float {obj}")
        return round_significant(obj)
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    return obj


def canonical_bytes(obj) -> bytes:
    return json.dumps(_canon(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


# ---------------------------------------------------------------------------
# to / from plain data
# ---------------------------------------------------------------------------


def _halvings(factor: float) -> int:
    n = round(-math.log2(factor))
    if n < 0 or 0.5 ** n != factor:
        raise CorruptStateError(f"suppression factor {factor} is not a power of 0.5")
    return n


def _item_to_data(item: MemoryItem) -> dict:
    return {
        "id": item.id,
        "kind": item.kind.value,
        "text": item.text,
        "creation_round": item.creation_round,
        "retrieval_rounds": list(item.retrieval_rounds),
        "suppression_halvings": _halvings(item.suppression_factor),
        "source_span": list(item.source_span),
        "last_score": item.last_score,
        "exempt": item.exempt,
        "persona_key": item.persona_key,
    }


def _item_from_data(d: dict) -> MemoryItem:
    return MemoryItem(
        id=d["id"],
        kind=d["kind"],
        text=d["text"],
        creation_round=d["creation_round"],
        source_span=tuple(d["source_span"]),
        retrieval_rounds=list(d["retrieval_rounds"]),
        suppression_factor=0.5 ** d["suppression_halvings"],
        last_score=d["last_score"],
        exempt=d["exempt"],
        persona_key=d["persona_key"],
    )


def _unit_to_data(u: NarrativeUnit) -> dict:
    return {
        "id": u.id,
        "level": u.level,
        "index_at_level": u.index_at_level,
        "text": u.text,
        "span_rounds": list(u.span_rounds),
        "span_turns": list(u.span_turns),
        "children": list(u.children),
    }


def _turns(data: list[dict]) -> list[DialogueTurn]:
    return [DialogueTurn.from_record(r) for r in data]


def state_to_data(state) -> dict:
    pool = state.pool
    return {
        "format_version": FORMAT_VERSION,
        "config_hash": state.config.config_hash(),
        "config": state.config.to_dict(),
        "session_id": state.session_id,
        "next_turn_index": state.next_turn_index,
        "pending_turn": state.pending_turn.to_record() if state.pending_turn else None,
        "last_round": [t.to_record() for t in state.last_round] if state.last_round else None,
        "first_speaker": state.first_speaker.value if state.first_speaker else None,
        "round_counter": pool.current_round,
        "pool": {
            "capacity_chars": pool.capacity_chars,
            "next_seq": pool.next_seq,
            "items": [_item_to_data(item) for item in pool],
        },
        "nsb_pending": {
            "buffer": [t.to_record() for t in state.nsb.buffer],
            "pending": {str(level): [_unit_to_data(u) for u in units] for level, units in state.nsb.pending.items()},
            "counts": {str(level): n for level, n in state.nsb.counts.items()},
        },
        "persona_sketch": {
            "entries": {k: [[v, s] for v, s in vals] for k, vals in state.pcb.sketch.entries.items()},
            "last_snapshot_round": state.pcb.sketch.last_snapshot_round,
        },
        "pcb": {
            "window": [t.to_record() for t in state.pcb.window],
            "item_ids": dict(state.pcb.item_ids),
        },
        "backend_identities": dict(state.backend_identities),
    }


def state_from_data(data: dict):
    from .engine import EngineState

    config = EngineConfig.from_dict(data["config"])
    if config.config_hash() != data["config_hash"]:
        logger.warning("config hash differs from the saved one; prompt templates or defaults may have changed")
    items = [_item_from_data(d) for d in data["pool"]["items"]]
    pool = MemoryPool(
        items={item.id: item for item in items},
        capacity_chars=data["pool"]["capacity_chars"],
        current_round=data["round_counter"],
        next_seq=data["pool"]["next_seq"],
    )
    nsb_data = data["nsb_pending"]
    nsb = NsbState(
        buffer=_turns(nsb_data["buffer"]),
        pending={int(level): [NarrativeUnit(**u) for u in units] for level, units in nsb_data["pending"].items()},
        counts={int(level): n for level, n in nsb_data["counts"].items()},
    )
    sketch_data = data["persona_sketch"]
    sketch = PersonaSketch(
        entries={k: [(v, s) for v, s in vals] for k, vals in sketch_data["entries"].items()},
        last_snapshot_round=sketch_data["last_snapshot_round"],
    )
    pcb = PcbState(sketch=sketch, window=_turns(data["pcb"]["window"]), item_ids=dict(data["pcb"]["item_ids"]))
    last_round = data["last_round"]
    return EngineState(
        session_id=data["session_id"],
        config=config,
        pool=pool,
        nsb=nsb,
        pcb=pcb,
        next_turn_index=data["next_turn_index"],
        pending_turn=DialogueTurn.from_record(data["pending_turn"]) if data["pending_turn"] else None,
        last_round=tuple(_turns(last_round)) if last_round else None,
        first_speaker=Speaker(data["first_speaker"]) if data["first_speaker"] else None,
        backend_identities=dict(data["backend_identities"]),
    )


# ---------------------------------------------------------------------------
# bytes
# ---------------------------------------------------------------------------


def save(state) -> bytes:
    body = state_to_data(state)
    checksum = hashlib.sha256(canonical_bytes(body)).hexdigest()
    return canonical_bytes({"checksum": checksum, "state": body})


def load(blob: bytes):
    try:
        doc = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptStateError(f"state document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("state"), dict) or "checksum" not in doc:
        raise CorruptStateError("state document lacks the checksum/state envelope")
    body = doc["state"]
    version = body.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"state format_version {version!r}; this build reads {FORMAT_VERSION}")
    if hashlib.sha256(canonical_bytes(body)).hexdigest() != doc["checksum"]:
        raise CorruptStateError("state checksum mismatch")
    try:
        return state_from_data(body)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptStateError(f"state document is incomplete: {exc!r}") from exc


def save_file(state, path: str | Path) -> None:
    """Write atomically: a crash leaves either the old file or the new one."""
    path = Path(path)
    data = save(state)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_file(path: str | Path):
    return load(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# event log
# ---------------------------------------------------------------------------


class EventLog:
    """Append-only JSONL log of turns and evictions for one session."""

    def __init__(self, path: str | Path, fh: IO[str]):
        self.path = Path(path)
        self._fh = fh

    @classmethod
    def create(cls, path: str | Path, session_id: str, config: EngineConfig) -> "EventLog":
        fh = open(path, "w", encoding="utf-8")
        log = cls(path, fh)
        log.append({
            "type": "header",
            "format_version": FORMAT_VERSION,
            "session_id": session_id,
            "config": config.to_dict(),
        })
        return log

    @classmethod
    def open_append(cls, path: str | Path) -> "EventLog":
        return cls(path, open(path, "a", encoding="utf-8"))

    def append(self, record: dict) -> None:
        self._fh.write(canonical_bytes(record).decode("utf-8") + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "EventLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_events(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                # A torn final line after a crash is expected; anything earlier is not.
                rest = fh.read()
                if rest.strip():
                    raise CorruptStateError(f"{path}:{lineno}: corrupt event record") from exc
                logger.warning("%s:%d: ignoring torn trailing record", path, lineno)
                return


def read_header(path: str | Path) -> dict:
    for record in read_events(path):
        if record.get("type") != "header":
            break
        if record.get("format_version") != FORMAT_VERSION:
            raise VersionMismatchError(f"event log format_version {record.get('format_version')!r}")
        return record
    raise InputFormatError(f"{path}: event log has no header")


def replay(path: str | Path, backends=None):
    """Rebuild an engine by re-ingesting every turn recorded in the log."""
    from .engine import Engine

    header = read_header(path)
    engine = Engine(header["session_id"], EngineConfig.from_dict(header["config"]), backends)
    for record in read_events(path):
        if record.get("type") == "turn":
            engine.ingest_turn(DialogueTurn.from_record(record))
    return engine


def eviction_records(path: str | Path) -> list[dict]:
    return [r for r in read_events(path) if r.get("type") == "evict"]
