import json
from pathlib import Path

import pytest

from longmem import store
from longmem.cli import event_log_path, run

DATA = Path(__file__).parent / "data"
TRANSCRIPT = str(DATA / "transcript_600.jsonl")


def cli(capsys, *argv):
    code = run(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def state(tmp_path, capsys):
    path = str(tmp_path / "state.json")
    code, _, _ = cli(capsys, "ingest", "--transcript", TRANSCRIPT, "--state", path, "--capacity-chars", "6000")
    assert code == 0
    return path


def test_ingest_reports_cascade(tmp_path, capsys):
    path = str(tmp_path / "s.json")
    code, out, _ = cli(capsys, "ingest", "--transcript", TRANSCRIPT, "--state", path)
    assert code == 0
    assert json.loads(out)["narrative_units_created"] == {"1": 50, "2": 10, "3": 2}
    assert store.load_file(path).nsb.counts == {1: 50, 2: 10, 3: 2}


def test_ingest_twice_byte_identical(tmp_path, capsys):
    paths = [tmp_path / "a.json", tmp_path / "b.json"]
    for p in paths:
        assert cli(capsys, "ingest", "--transcript", TRANSCRIPT, "--state", str(p), "--capacity-chars", "3000")[0] == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert event_log_path(paths[0]).read_bytes() == event_log_path(paths[1]).read_bytes()


def test_retrieve_bounded_by_k(state, capsys):
    code, out, _ = cli(capsys, "retrieve", "--state", state, "--query", "favorite animal", "--k", "4")
    results = json.loads(out)["results"]
    assert code == 0 and 0 < len(results) <= 4
    assert all("effective_score" in r for r in results)


def test_step_appends_turn(state, capsys):
    code, out, _ = cli(capsys, "step", "--state", state, "--speaker", "user", "--text", "I love dogs")
    assert code == 0 and json.loads(out)["turn_index"] == 600
    code, out, _ = cli(capsys, "step", "--state", state, "--speaker", "chatbot", "--text", "Nice")
    assert json.loads(out)["completed_round"] == 301
    assert store.load_file(state).next_turn_index == 602


def test_step_wrong_speaker_is_input_error(state, capsys):
    assert cli(capsys, "step", "--state", state, "--speaker", "chatbot", "--text", "x")[0] == 3


def test_dump_views(state, capsys):
    for what in ("state", "memories", "persona", "stats"):
        code, out, _ = cli(capsys, "dump", what, "--state", state)
        assert code == 0 and json.loads(out)
    assert json.loads(cli(capsys, "dump", "persona", "--state", state)[1])["persona"]["Name"] == ["Mira"]


def test_evict_log(state, capsys):
    code, out, _ = cli(capsys, "evict-log", "--state", state)
    records = [json.loads(line) for line in out.splitlines()]
    assert code == 0 and records
    assert all(r["policy"] == "competition_inhibition" for r in records)


def test_eval_labels(state, capsys, tmp_path):
    report_path = tmp_path / "r.json"
    code, out, _ = cli(capsys, "eval-labels", "--state", state, "--labels", str(DATA / "labels.jsonl"),
                       "--judge", "--report", str(report_path))
    report = json.loads(out)
    assert code == 0 and json.loads(report_path.read_text()) == report
    assert 0 <= report["metrics"]["mem_score"] <= 5
    assert len(report["details"]) == 4


def test_eval_probes_from_state(state, capsys):
    code, out, _ = cli(capsys, "eval-probes", "--state", state, "--probes", str(DATA / "probes.jsonl"))
    assert code == 0 and 0 <= json.loads(out)["metrics"]["probe_precision"] <= 1


def test_eval_probes_replaying_transcript(tmp_path, capsys):
    code, out, _ = cli(capsys, "eval-probes", "--state", str(tmp_path / "none.json"), "--transcript", TRANSCRIPT,
                       "--probes", str(DATA / "probes.jsonl"))
    assert code == 0 and len(json.loads(out)["details"]) == 8


def test_eval_table(tmp_path, capsys):
    code, out, _ = cli(capsys, "eval-table", "--state", str(tmp_path / "fresh.json"),
                       "--triplets", str(DATA / "triplets.jsonl"))
    assert code == 0 and 0 <= json.loads(out)["metrics"]["probe_table_score"] <= 5


def test_policy_flag(tmp_path, capsys):
    path = str(tmp_path / "s.json")
    cli(capsys, "ingest", "--transcript", TRANSCRIPT, "--state", path, "--capacity-chars", "3000", "--policy", "fifo")
    assert json.loads(cli(capsys, "dump", "stats", "--state", path)[1])["policy"] == "fifo"


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("nsb: {theta1: 3}\nforgetting: {k: 4}\n")
    path = str(tmp_path / "s.json")
    code, out, _ = cli(capsys, "ingest", "--config", str(cfg), "--transcript", TRANSCRIPT, "--state", path)
    assert code == 0 and json.loads(out)["narrative_units_created"]["1"] == 100


@pytest.mark.parametrize("argv", [["ingest", "--bogus"], ["nope"], [], ["retrieve", "--k", "x"]])
def test_usage_errors_exit_2(argv, capsys):
    code, _, err = cli(capsys, *argv)
    assert code == 2 and "usage" in err


def test_bad_config_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("nsb: {theta1: 1}\n")
    assert cli(capsys, "ingest", "--config", str(cfg), "--transcript", TRANSCRIPT)[0] == 2


def test_input_format_errors_exit_3(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not json\n")
    assert cli(capsys, "ingest", "--transcript", str(bad), "--state", str(tmp_path / "s.json"))[0] == 3
    assert cli(capsys, "ingest", "--transcript", str(tmp_path / "missing.jsonl"))[0] == 3
    assert cli(capsys, "dump", "--state", str(tmp_path / "missing.json"))[0] == 3
    corrupt = tmp_path / "corrupt.json"
    corrupt.write_text("{")
    assert cli(capsys, "dump", "--state", str(corrupt))[0] == 3


def test_remote_backend_unreachable_exit_4(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("remote: {base_url: 'http://127.0.0.1:9', model_name: m, timeout_ms: 200, max_retries: 0}\n")
    code, _, err = cli(capsys, "ingest", "--config", str(cfg), "--backend", "remote", "--transcript", TRANSCRIPT,
                       "--state", str(tmp_path / "s.json"))
    assert code == 4 and "error" in err


def test_remote_without_config_is_usage_error(capsys):
    assert cli(capsys, "ingest", "--backend", "remote", "--transcript", TRANSCRIPT)[0] == 2


def test_capacity_overflow_exit_5(tmp_path, capsys):
    code, _, err = cli(capsys, "ingest", "--transcript", TRANSCRIPT, "--state", str(tmp_path / "s.json"),
                       "--capacity-chars", "100")
    assert code == 5 and "exempt" in err
