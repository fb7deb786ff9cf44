"""Command-line interface.

Exit codes: 0 success, 2 usage, 3 input format, 4 backend, 5 capacity overflow.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import store
from .config import EngineConfig, load_config
from .core import read_transcripts
from .engine import Engine
from .errors import ConfigError, InputFormatError, LongMemError
from .evaluation import (
    EvalReport,
    evaluate_labels,
    load_labels,
    load_probes,
    load_triplets,
    probe_qa_details,
    probe_table_details,
)
from .forgetting import Policy
from .service import (
    BACKEND_CHOICES,
    MemoryService,
    TurnIn,
    add_turn,
    make_backends,
    memories_view,
    persona_view,
    retrieve_view,
    stats_view,
)

logger = logging.getLogger("longmem")

DEFAULT_STATE = "state.json"


def event_log_path(state_path: str | Path) -> Path:
    return Path(f"{state_path}.events.jsonl")


def _emit(obj) -> None:
    if hasattr(obj, "model_dump_json"):
        print(obj.model_dump_json(indent=2))
    else:
        print(json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=True))


def _config(args) -> EngineConfig:
    config = load_config(args.config)
    overrides = {}
    if args.capacity_chars is not None:
        overrides["capacity_chars"] = args.capacity_chars
    if args.policy is not None:
        overrides["forgetting"] = {**config.to_dict()["forgetting"], "policy": args.policy}
    return config.replace(**overrides) if overrides else config


def _load_engine(args) -> Engine:
    path = Path(args.state)
    if not path.exists():
        raise InputFormatError(f"state file {path} does not exist; run 'ingest' first")
    state = store.load_file(path)
    if args.capacity_chars is not None or args.policy is not None:
        logger.warning("--capacity-chars/--policy only apply when a new state is created; using the saved config")
    return Engine(state=state, backends=make_backends(args.backend, state.config))


def _write_report(report: EvalReport, args) -> None:
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2, ensure_ascii=False), encoding="utf-8")
    _emit(report.to_dict())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    transcripts = read_transcripts(args.transcript)
    if not transcripts:
        raise InputFormatError(f"{args.transcript} holds no turns")
    if args.session is None:
        if len(transcripts) > 1:
            raise ConfigError(f"{args.transcript} holds several sessions; pick one with --session")
        session_id = next(iter(transcripts))
    else:
        session_id = args.session
        if session_id not in transcripts:
            raise InputFormatError(f"session {session_id!r} not found in {args.transcript}")
    log_path = event_log_path(args.state)
    if args.resume and Path(args.state).exists():
        engine = _load_engine(args)
        log = store.EventLog.open_append(log_path)
    else:
        config = _config(args)
        engine = Engine(session_id, config, make_backends(args.backend, config))
        log = store.EventLog.create(log_path, session_id, config)
    with log:
        engine.on_event = log.append
        for turn in transcripts[session_id].turns:
            if turn.turn_index < engine.state.next_turn_index:
                continue
            engine.ingest_turn(turn)
    store.save_file(engine.state, args.state)
    _emit(stats_view(engine))
    return 0


def cmd_step(args) -> int:
    engine = _load_engine(args)
    with store.EventLog.open_append(event_log_path(args.state)) as log:
        engine.on_event = log.append
        out = add_turn(engine, TurnIn(session_id=engine.session_id, speaker=args.speaker, text=args.text))
    store.save_file(engine.state, args.state)
    _emit(out)
    return 0


def cmd_dump(args) -> int:
    engine = _load_engine(args)
    if args.what == "state":
        _emit(store.state_to_data(engine.state))
    elif args.what == "memories":
        _emit(memories_view(engine))
    elif args.what == "persona":
        _emit(persona_view(engine))
    else:
        _emit(stats_view(engine))
    return 0


def cmd_retrieve(args) -> int:
    engine = _load_engine(args)
    _emit(retrieve_view(engine, args.query, args.k))
    return 0


def cmd_evict_log(args) -> int:
    path = event_log_path(args.state)
    if not path.exists():
        raise InputFormatError(f"no event log at {path}")
    for record in store.eviction_records(path):
        print(json.dumps(record, sort_keys=True, ensure_ascii=False))
    return 0


def cmd_eval_labels(args) -> int:
    engine = _load_engine(args)
    labels = load_labels(args.labels)
    memories = [m.text for m in engine.memories()]
    judge = engine.backends.summarizer if args.judge else None
    report = evaluate_labels(labels, memories, engine.backends.scorer, judge)
    report.metrics["memory_count"] = len(memories)
    _write_report(report, args)
    return 0


def cmd_eval_probes(args) -> int:
    probes = sorted(load_probes(args.probes), key=lambda p: p.turn)
    if not probes:
        raise InputFormatError(f"{args.probes} holds no probes")
    if args.transcript:
        # Replay the dialogue so each probe sees the memories of its own turn.
        transcripts = read_transcripts(args.transcript)
        if args.session is None and len(transcripts) > 1:
            raise ConfigError("several sessions in the transcript; pick one with --session")
        session_id = args.session or next(iter(transcripts))
        config = _config(args)
        engine = Engine(session_id, config, make_backends(args.backend, config))
        turns = iter(transcripts[session_id].turns)

        def provider(probe):
            while engine.state.next_turn_index < probe.turn:
                turn = next(turns, None)
                if turn is None:
                    break
                engine.ingest_turn(turn)
            return [m.text for m in engine.retrieve(probe.question, config.retrieval_k)]
    else:
        engine = _load_engine(args)

        def provider(probe):
            return [m.text for m in engine.retrieve(probe.question, engine.config.retrieval_k)]

    rows = probe_qa_details(probes, provider, engine.backends.summarizer)
    report = EvalReport(metrics={"probe_precision": sum(r["correct"] for r in rows) / len(rows)}, details=rows)
    _write_report(report, args)
    return 0


def cmd_eval_table(args) -> int:
    triplets = load_triplets(args.triplets)
    if not triplets:
        raise InputFormatError(f"{args.triplets} holds no triplets")
    if args.state and Path(args.state).exists():
        engine = _load_engine(args)
    else:
        config = _config(args)
        engine = Engine("probe-table", config, make_backends(args.backend, config))
    gen = engine.backends.summarizer
    rows = probe_table_details(triplets, engine, gen, gen)
    report = EvalReport(metrics={"probe_table_score": sum(r["score"] for r in rows) / len(rows)}, details=rows)
    _write_report(report, args)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .api import create_app

    service = MemoryService(_config(args), args.backend, args.state_dir)
    uvicorn.run(create_app(service), host=args.host, port=args.port)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="YAML/JSON engine config file")
    shared.add_argument("--state", default=DEFAULT_STATE, help="state file (default: %(default)s)")
    shared.add_argument("--backend", choices=BACKEND_CHOICES, default="mock-sum")
    shared.add_argument("--capacity-chars", type=int, help="memory capacity in characters")
    shared.add_argument("--policy", choices=[p.value for p in Policy])
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="longmem", description="Long-term dialogue memory engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[shared], help="replay a transcript into a state file")
    p.add_argument("--transcript", required=True)
    p.add_argument("--session")
    p.add_argument("--resume", action="store_true", help="continue an existing state instead of starting over")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("step", parents=[shared], help="ingest one more turn into a state file")
    p.add_argument("--speaker", choices=["user", "chatbot"], required=True)
    p.add_argument("--text", required=True)
    p.set_defaults(func=cmd_step)

    p = sub.add_parser("dump", parents=[shared], help="print state, memories, persona or stats")
    p.add_argument("what", nargs="?", choices=["state", "memories", "persona", "stats"], default="stats")
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("retrieve", parents=[shared], help="top-k memories for a query")
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("evict-log", parents=[shared], help="print the eviction audit log")
    p.set_defaults(func=cmd_evict_log)

    p = sub.add_parser("eval-labels", parents=[shared], help="score memories against labels")
    p.add_argument("--labels", required=True)
    p.add_argument("--judge", action="store_true", help="also compute MemScore with the backend as judge")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval_labels)

    p = sub.add_parser("eval-probes", parents=[shared], help="multiple-choice probe precision")
    p.add_argument("--probes", required=True)
    p.add_argument("--transcript", help="replay this transcript so each probe sees memories at its turn")
    p.add_argument("--session")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval_probes)

    p = sub.add_parser("eval-table", parents=[shared], help="(P, Q, A) probe-table evaluation")
    p.add_argument("--triplets", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval_table)

    p = sub.add_parser("serve", parents=[shared], help="run the HTTP API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--state-dir", help="persist one state file per session here")
    p.set_defaults(func=cmd_serve)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LongMemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputFormatError.exit_code


def main() -> None:
    sys.exit(run())
