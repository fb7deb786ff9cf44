"""HTTP API over :class:`~longmem.service.MemoryService`.

Endpoints::

    POST /turns      ingest one turn            body: TurnIn
    GET  /memories   list the memory pool       ?session_id=
    POST /retrieve   top-k memories for a query body: RetrieveIn
    GET  /persona    current persona sketch     ?session_id=
    GET  /stats      pool and branch counters   ?session_id=
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from .errors import (
    BackendError,
    CapacityOverflowError,
    InputFormatError,
    LongMemError,
    TurnOrderError,
)
from .service import (
    MemoriesOut,
    MemoryService,
    PersonaOut,
    RetrieveIn,
    RetrieveOut,
    StatsOut,
    StepOut,
    TurnIn,
    memories_view,
    persona_view,
    retrieve_view,
    stats_view,
)


def create_app(service: MemoryService | None = None) -> FastAPI:
    service = service or MemoryService()
    app = FastAPI(title="longmem", version="0.1.0")
    app.state.service = service

    @app.exception_handler(LongMemError)
    async def _engine_error(request: Request, exc: LongMemError):
        if isinstance(exc, TurnOrderError):
            return JSONResponse(status_code=409, content={"detail": str(exc), "expected": exc.expected})
        if isinstance(exc, InputFormatError):
            status = 422
        elif isinstance(exc, BackendError):
            status = 502
        elif isinstance(exc, CapacityOverflowError):
            status = 507
        else:
            status = 500
        return JSONResponse(status_code=status, content={"detail": str(exc), "error": type(exc).__name__})

    def _existing(session_id: str):
        engine = service.engine(session_id, create=False)
        if engine is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        return engine

    @app.post("/turns", response_model=StepOut)
    def post_turn(body: TurnIn):
        return service.add_turn(body)

    @app.get("/memories", response_model=MemoriesOut)
    def get_memories(session_id: str = "default"):
        return memories_view(_existing(session_id))

    @app.post("/retrieve", response_model=RetrieveOut)
    def post_retrieve(body: RetrieveIn):
        return retrieve_view(_existing(body.session_id), body.query, body.k)

    @app.get("/persona", response_model=PersonaOut)
    def get_persona(session_id: str = "default"):
        return persona_view(_existing(session_id))

    @app.get("/stats", response_model=StatsOut)
    def get_stats(session_id: str = "default"):
        return stats_view(_existing(session_id))

    return app
