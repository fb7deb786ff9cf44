import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from longmem import store
from longmem.api import create_app
from longmem.cli import run
from longmem.config import EngineConfig
from longmem.service import MemoryService
from synth import synthetic_turns

DATA = Path(__file__).parent / "data"


@pytest.fixture
def client():
    return TestClient(create_app(MemoryService(EngineConfig(capacity_chars=4000))))


def post_turns(client, turns, session="s1"):
    for t in turns:
        r = client.post("/turns", json={"session_id": session, "speaker": t.speaker.value, "text": t.text})
        assert r.status_code == 200, r.text
    return r.json()


def test_turn_flow(client):
    last = post_turns(client, synthetic_turns(40))
    assert last["completed_round"] == 40
    stats = client.get("/stats", params={"session_id": "s1"}).json()
    assert stats["current_round"] == 40 and stats["total_chars"] <= 4000
    memories = client.get("/memories", params={"session_id": "s1"}).json()["memories"]
    assert memories and {"id", "kind", "suppression_factor", "retrieval_rounds"} <= set(memories[0])
    persona = client.get("/persona", params={"session_id": "s1"}).json()
    assert persona["session_id"] == "s1"
    hits = client.post("/retrieve", json={"session_id": "s1", "query": "jazz", "k": 3}).json()["results"]
    assert 0 < len(hits) <= 3


def test_unknown_session_404(client):
    assert client.get("/stats", params={"session_id": "ghost"}).status_code == 404


def test_validation_errors(client):
    assert client.post("/turns", json={"speaker": "user", "text": ""}).status_code == 422
    assert client.post("/turns", json={"speaker": "robot", "text": "x"}).status_code == 422


def test_turn_order_conflict(client):
    client.post("/turns", json={"speaker": "user", "text": "hi"})
    r = client.post("/turns", json={"turn_index": 5, "speaker": "chatbot", "text": "x"})
    assert r.status_code == 409 and r.json()["expected"] == 1
    r = client.post("/turns", json={"speaker": "user", "text": "again"})
    assert r.status_code == 422


def test_sessions_independent_under_concurrency():
    service = MemoryService()
    client = TestClient(create_app(service))
    sessions = [f"s{i}" for i in range(4)]
    with ThreadPoolExecutor(4) as pool:
        list(pool.map(lambda s: post_turns(client, synthetic_turns(30, s), s), sessions))
    bodies = []
    for s in sessions:
        body = store.state_to_data(service.engine(s).state)
        assert body["round_counter"] == 30
        body["session_id"] = None
        bodies.append(store.canonical_bytes(body).replace(s.encode(), b"S"))
    assert len(set(bodies)) == 1


def test_serve_and_cli_agree(tmp_path, capsys):
    state_dir = tmp_path / "states"
    service = MemoryService(EngineConfig(capacity_chars=5000), state_dir=state_dir)
    client = TestClient(create_app(service))
    turns = synthetic_turns(50, "demo")
    post_turns(client, turns, "demo")
    state_path = str(state_dir / "demo.json")

    assert run(["retrieve", "--state", state_path, "--query", "jazz night", "--k", "5"]) == 0
    cli_out = json.loads(capsys.readouterr().out)
    api_out = client.post("/retrieve", json={"session_id": "demo", "query": "jazz night", "k": 5}).json()
    assert cli_out == api_out

    for endpoint, what in (("/memories", "memories"), ("/persona", "persona"), ("/stats", "stats")):
        run(["dump", what, "--state", state_path])
        assert json.loads(capsys.readouterr().out) == client.get(endpoint, params={"session_id": "demo"}).json()


def test_persisted_session_reloads(tmp_path):
    state_dir = tmp_path / "states"
    first = TestClient(create_app(MemoryService(state_dir=state_dir)))
    post_turns(first, synthetic_turns(12, "demo"), "demo")
    second = TestClient(create_app(MemoryService(state_dir=state_dir)))
    assert second.get("/stats", params={"session_id": "demo"}).json()["current_round"] == 12
