"""Acceptance criteria, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL: ...`` line; the lines are
repeated in the terminal summary (see conftest.py). Run alone with::

    pytest tests/test_acceptance.py -v
"""

import random
import time
import zlib
from pathlib import Path

import pytest

from longmem import store
from longmem.backends import CallableGenerator, LexicalScorer, RuleBasedMock
from longmem.config import EngineConfig
from longmem.core import DialogueTurn, MemoryItem, MemoryKind, MemoryPool, Speaker
from longmem.engine import Backends, Engine
from longmem.evaluation import load_probes, probe_qa_precision, rouge_precision
from longmem.forgetting import ForgettingConfig, compute_score, forgetting_step
from longmem.pcb import (
    Category,
    PcbConfig,
    PersonaSketch,
    merge_append,
    merge_contradictory,
    merge_key,
    merge_replace,
    merge_trajectory,
)
from longmem.text import tokenize
from oracles import (
    AGE3_SCORE,
    AGE10_TWO_RETRIEVALS_SCORE,
    FRESH_SCORE,
    rouge2_oracle,
    rougeL_oracle,
    score_oracle,
)
from synth import fuzzed_turns, synthetic_turns

DATA = Path(__file__).parent / "data"
RESULTS: dict[str, str] = {}


def verdict(number, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {str(number):>3} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS[str(number)] = line
    print(line)
    assert ok, line


# 1 ---------------------------------------------------------------------------

def test_01_nsb_cascade_arithmetic():
    start = time.perf_counter()
    engine = Engine("s1", EngineConfig())
    engine.ingest(synthetic_turns(300))
    elapsed = time.perf_counter() - start
    kinds = {k: len(engine.pool.by_kind(k)) for k in MemoryKind}
    counts = engine.state.nsb.counts
    ok = counts == {1: 50, 2: 10, 3: 2} and kinds[MemoryKind.NARRATIVE_LEVEL3] == 2 and elapsed < 5.0
    verdict(1, ok, f"units per level {counts}, {elapsed:.2f}s (limit 5s)")


# 2 ---------------------------------------------------------------------------

def test_02_score_oracles():
    cfg = ForgettingConfig()
    cases = [
        ("fresh", MemoryItem("a", "persona_fact", "x", 0, (0, 0)), 0, FRESH_SCORE),
        ("age 3", MemoryItem("a", "persona_fact", "x", 0, (0, 0)), 3, AGE3_SCORE),
        ("age 10, two retrievals", MemoryItem("a", "persona_fact", "x", 0, (0, 0), [8, 9]), 10,
         AGE10_TWO_RETRIEVALS_SCORE),
    ]
    parts, ok = [], True
    for name, item, now, frozen in cases:
        got = compute_score(item, now, cfg)
        rel = abs(got - frozen) / frozen
        ok &= rel <= 1e-6
        parts.append(f"{name}={got:.7g} (rel err {rel:.1e})")
    verdict(2, ok, "; ".join(parts) + "; tolerance rel 1e-6")


# 3 ---------------------------------------------------------------------------

def test_03_monotonicity():
    rng = random.Random(3)
    cfg = ForgettingConfig()
    violations = 0
    for _ in range(1000):
        age = rng.randint(0, 200)
        created = rng.randint(0, 50)
        now = created + age
        pool = list(range(created, now))
        retrieved = sorted(rng.sample(pool, rng.randint(0, min(len(pool), 10))))
        item = MemoryItem("a", "persona_fact", "x", created, (0, 0), retrieved)
        base = compute_score(item, now, cfg)
        if not compute_score(item, now + 1, cfg) < base:
            violations += 1
        spare = [r for r in pool if r not in retrieved]
        if spare:
            more = MemoryItem("b", "persona_fact", "x", created, (0, 0), sorted(retrieved + [rng.choice(spare)]))
            if not compute_score(more, now, cfg) > base:
                violations += 1
        if not base > 0:
            violations += 1
    verdict(3, violations == 0, f"1000 random (age in [0,200], R_c) cases, {violations} violations")


# 4 ---------------------------------------------------------------------------

class RandomReranker:
    identity = "random"

    def __init__(self, rng):
        self.rng = rng

    def rerank(self, query, candidates):
        return sorted(((cid, self.rng.random()) for cid, _ in candidates), key=lambda p: -p[1])


def test_04_suppression_algebra():
    rng = random.Random(4)
    violations = checks = 0
    for trial in range(50):
        pool = MemoryPool()
        for i in range(rng.randint(3, 30)):
            pool.add(MemoryItem(pool.new_id(), "narrative_level1", f"t{i}", 0, (0, 1)))
        streak = {item.id: 0 for item in pool}
        cfg = ForgettingConfig(k=rng.randint(1, 9))
        reranker = RandomReranker(rng)
        for r in range(1, 40):
            pool.advance_to(r)
            part = forgetting_step(pool, "q", reranker, cfg).partition
            for item_id in part.relevant:
                streak[item_id] = 0
            for item_id in part.noisy:
                streak[item_id] += 1
            for item in pool:
                checks += 1
                factor = item.suppression_factor
                if factor != 0.5 ** streak[item.id] or (item.id in part.relevant and factor != 1.0):
                    violations += 1
    verdict(4, violations == 0, f"{checks} factor checks over random partition sequences, {violations} violations")


# 5 ---------------------------------------------------------------------------

def test_05_capacity_bound():
    turns = fuzzed_turns(300, seed=5)
    details, ok = [], True
    for capacity in (3000, 6000, 10000):
        engine = Engine("fuzz", EngineConfig(capacity_chars=capacity))
        over = exempt_hits = evictions = 0
        for turn in turns:
            report = engine.ingest_turn(turn)
            if report.completed_round is None:
                continue
            pending = engine.state.nsb.pending_ids()
            evicted = {e.evicted_id for e in report.evicted}
            evictions += len(evicted)
            exempt_hits += len(evicted & pending)
            over += engine.pool.total_chars() > capacity
        ok &= over == 0 and exempt_hits == 0 and evictions > 0
        details.append(f"{capacity}: {evictions} evictions, {over} rounds over, {exempt_hits} exempt evicted")
    verdict(5, ok, "; ".join(details))


# 6 ---------------------------------------------------------------------------

PLANTED_ID = "m000001"


def _run_policy(policy, capacity, turns, backends=None):
    engine = Engine("fuzz", EngineConfig(capacity_chars=capacity, forgetting=ForgettingConfig(policy=policy)),
                    backends)
    engine.ingest(turns)
    return engine


def _field_differences(a: Engine, b: Engine) -> set[str]:
    if a.pool.items.keys() != b.pool.items.keys():
        return {"<membership>"}
    fields = set()
    for item_id, x in a.pool.items.items():
        y = b.pool.items[item_id]
        fields |= {name for name, value in vars(x).items() if getattr(y, name) != value}
    return fields


class StrictOrderReranker:
    """Lexical reranker with a tiny content hash added, so no two texts tie."""

    identity = "rerank:lexical+crc32"

    def __init__(self):
        self.scorer = LexicalScorer()

    def rerank(self, query, candidates):
        scored = [(cid, self.scorer.score(query, text) + (zlib.crc32(text.encode()) % 10**6) * 1e-12)
                  for cid, text in candidates]
        return sorted(scored, key=lambda pair: -pair[1])


def test_06a_planted_memory_retention():
    planted = fuzzed_turns(300, seed=11, plant=True)
    kept = {}
    for policy in ("competition_inhibition", "fifo"):
        for capacity in (6000, 10000):
            engine = _run_policy(policy, capacity, planted)
            assert engine.pool.items.get(PLANTED_ID) is None or "Odile" in engine.pool.items[PLANTED_ID].text
            kept[policy, capacity] = PLANTED_ID in engine.pool
    ok = all(kept["competition_inhibition", c] for c in (6000, 10000)) and not any(
        kept["fifo", c] for c in (6000, 10000))
    verdict("6a", ok, "planted memory retained: " + ", ".join(f"{p}@{c}={v}" for (p, c), v in kept.items()))


def _separation(backends_factory):
    workload = fuzzed_turns(300, seed=6)
    diffs = _field_differences(_run_policy("no_inhibition", None, workload, backends_factory()),
                               _run_policy("competition_inhibition", None, workload, backends_factory()))
    # The cached score is the effective score, i.e. derived from suppression_factor.
    diffs.discard("last_score")
    return diffs


def test_06b_inhibition_only_changes_suppression():
    diffs = _separation(Backends.mock)
    verdict("6b", diffs <= {"suppression_factor"},
            f"default lexical reranker: no_inhibition vs competition_inhibition at infinite capacity "
            f"differ in {sorted(diffs)} (allowed: suppression_factor)")


def test_06c_inhibition_only_changes_suppression_without_rerank_ties():
    def strict():
        backends = Backends.mock()
        backends.reranker = StrictOrderReranker()
        return backends

    diffs = _separation(strict)
    verdict("6c", diffs <= {"suppression_factor"},
            f"tie-free reranker: no_inhibition vs competition_inhibition at infinite capacity "
            f"differ in {sorted(diffs)} (allowed: suppression_factor)")


# 7 ---------------------------------------------------------------------------

class ExactScorer:
    identity = "exact"

    def score(self, a, b):
        return 1.0 if a == b else 0.0


def test_07_persona_merges():
    cfg = PcbConfig()
    sk = lambda **e: PersonaSketch({k: [(v, 0) for v in vals] for k, vals in e.items()})
    examples = [
        merge_replace(sk(Name=["Alice"]), "Name", ["Bob"]).values("Name") == ["Bob"],
        merge_replace(sk(Age=[]), "Age", ["25"]).values("Age") == ["25"],
        merge_replace(sk(Name=["Bob"]), "Name", []).values("Name") == ["Bob"],
        merge_append(sk(Preferences=["tea"]), "Preferences", ["coffee"]).values("Preferences") == ["tea", "coffee"],
        merge_append(sk(Skills=["chess"]), "Skills", ["chess"]).values("Skills") == ["chess"],
        merge_append(sk(Hobbies=[]), "Hobbies", ["hiking", "hiking"]).values("Hobbies") == ["hiking"],
        merge_trajectory(sk(RecentEvents=["moved"]), "RecentEvents", ["got a dog"]).entries["RecentEvents"]
        == [("moved", 1), ("got a dog", 0)],
        [s for _, s in merge_trajectory(merge_trajectory(sk(RecentEvents=["a"]), "RecentEvents", ["b"]),
                                         "RecentEvents", ["c"]).entries["RecentEvents"]] == [2, 1, 0],
        merge_trajectory(PersonaSketch({"Plans": [("x", 3)]}), "Plans", []).entries["Plans"] == [("x", 3)],
        (lambda o: o.values("FavoriteAnimals") == [] and o.values("DislikedAnimals") == ["cats"])(
            merge_contradictory(sk(FavoriteAnimals=["cats"]), "DislikedAnimals", ["cats"], ExactScorer(), cfg)),
        (lambda o: o.values("FavoriteAnimals") == ["cats"] and o.values("DislikedAnimals") == ["spiders"])(
            merge_contradictory(sk(FavoriteAnimals=["cats"]), "DislikedAnimals", ["spiders"], ExactScorer(), cfg)),
        merge_contradictory(sk(DislikedAnimals=["cats"]), "DislikedAnimals", ["cats"], ExactScorer(), cfg)
        .values("DislikedAnimals") == ["cats"],
        merge_key(sk(Personality=["shy"]), "Personality", ["calm"], cfg, RuleBasedMock(), ExactScorer())
        .values("Personality") == ["shy", "calm"],
        merge_key(sk(Relationship=["likes dogs"]), "Relationship", ["adores dogs"], cfg,
                  CallableGenerator(lambda p: '["adores dogs"]'), ExactScorer()).values("Relationship")
        == ["adores dogs"],
    ]

    rng = random.Random(7)
    values = ["cats", "dogs", "tea", "jazz", "moved", "chess", "Bob"]
    violations = 0
    for _ in range(300):
        sketch, events, arrivals = PersonaSketch(), {}, {}
        for _ in range(rng.randint(1, 25)):
            key = rng.choice(cfg.key_names)
            new = rng.sample(values, rng.randint(0, 3))
            before = sketch
            sketch = merge_key(sketch, key, new, cfg, RuleBasedMock(), ExactScorer())
            category = cfg.key(key).category
            if category is Category.REPLACE and len(sketch.values(key)) > 1:
                violations += 1
            if category is Category.CONTRADICTORY and not set(before.values(key)) <= set(sketch.values(key)):
                violations += 1
            if category is Category.TRAJECTORY and new:
                events[key] = events.get(key, 0) + 1
                for v in new:
                    arrivals[key, v] = events[key]
                stamps = sketch.entries[key]
                if any(s != events[key] - arrivals[key, v] for v, s in stamps) or \
                        [s for _, s in stamps] != sorted((s for _, s in stamps), reverse=True):
                    violations += 1
    ok = all(examples) and violations == 0
    verdict(7, ok, f"{sum(examples)}/{len(examples)} merge examples exact; 300 random merge sequences, "
                   f"{violations} invariant violations")


# 8 ---------------------------------------------------------------------------

def test_08_rouge_oracle_equivalence():
    rng = random.Random(8)
    vocab = ["a", "b", "c", "d", "e", "我", "猫", "the", "cat"]
    mismatches = 0
    for _ in range(500):
        cand = " ".join(rng.choice(vocab) for _ in range(rng.randint(0, 30)))
        ref = " ".join(rng.choice(vocab) for _ in range(rng.randint(0, 30)))
        ct, rt = tokenize(cand), tokenize(ref)
        mismatches += rouge_precision(cand, ref, "rouge2") != rouge2_oracle(ct, rt)
        mismatches += rouge_precision(cand, ref, "rougeL") != rougeL_oracle(ct, rt)
    verdict(8, mismatches == 0, f"500 random pairs (<= 30 tokens), {mismatches} exact mismatches")


# 9 ---------------------------------------------------------------------------

def _pipeline(turns, log=None):
    engine = Engine("s1", EngineConfig(capacity_chars=4000), on_event=log.append if log else None)
    engine.ingest(turns)
    engine.add_turn(Speaker.USER, "one more thing: I love dogs")
    engine.add_turn(Speaker.CHATBOT, "noted")
    return engine


def test_09_determinism(tmp_path):
    turns = synthetic_turns(200, seed=9)
    first, second = store.save(_pipeline(turns).state), store.save(_pipeline(turns).state)
    two_runs = first == second

    half = Engine("s1", EngineConfig(capacity_chars=4000))
    half.ingest(turns[:200])
    resumed = Engine(state=store.load(store.save(half.state)))
    resumed.ingest(turns[200:])
    resumed.add_turn(Speaker.USER, "one more thing: I love dogs")
    resumed.add_turn(Speaker.CHATBOT, "noted")
    cycle = store.save(resumed.state) == first and store.save(store.load(first)) == first

    path = tmp_path / "events.jsonl"
    with store.EventLog.create(path, "s1", EngineConfig(capacity_chars=4000)) as log:
        _pipeline(turns, log)
    replayed = store.save(store.replay(path).state) == first

    verdict(9, two_runs and cycle and replayed,
            f"two runs identical={two_runs}; save/load/continue identical={cycle}; event-log replay identical={replayed}")


# 10 --------------------------------------------------------------------------

def test_10_backend_budget():
    engine = Engine("s1", EngineConfig())
    violations = rounds = 0
    for turn in synthetic_turns(300):
        before = dict(engine.state.nsb.counts)
        report = engine.ingest_turn(turn)
        if report.completed_round is None:
            continue
        rounds += 1
        triggered = sum(engine.state.nsb.counts[level] > before[level] for level in (2, 3))
        snapshot_due = report.completed_round % engine.config.pcb.snapshot_interval_rounds == 0
        if report.calls.get("summarize", 0) > triggered:
            violations += 1
        if report.calls.get("snapshot", 0) > (1 if snapshot_due else 0):
            violations += 1
    totals = {p: engine.ledger.total(p) for p in ("summarize", "snapshot", "merge")}
    ok = violations == 0 and totals["summarize"] == 12 and totals["snapshot"] == 30
    verdict(10, ok, f"{rounds} rounds, call totals {totals}, {violations} rounds over budget")


# 11 --------------------------------------------------------------------------

def test_11_probe_precision_depends_on_memory():
    probes = load_probes(DATA / "probes.jsonl")
    engine = Engine("demo", EngineConfig())
    engine.ingest(synthetic_turns(300, "demo", seed=0))
    facts = [m.text for m in engine.pool.by_kind(MemoryKind.PERSONA_FACT)]
    answerer = RuleBasedMock()
    with_memory = probe_qa_precision(probes, lambda p: facts, answerer)
    emptied = probe_qa_precision(probes, lambda p: [], answerer)
    verdict(11, with_memory == 1.0 and emptied <= 0.3,
            f"precision with persona memories {with_memory:.2f} (need 1.0), with empty pool {emptied:.2f} (need <= 0.3)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
