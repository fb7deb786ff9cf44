"""Memory evaluation: label matching, ROUGE precision, MemScore and probe tests.

Embedding metrics (BERTScore, M3E) plug in as ``SimilarityScorer`` objects; the
package ships only the lexical scorer and the ROUGE scorers defined here.
"""

from __future__ import annotations

import logging
import re
import statistics
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .backends import SimilarityScorer, TextGenerator
from .core import Speaker, iter_jsonl
from .errors import InputFormatError
from .templates import render
from .text import tokenize

logger = logging.getLogger(__name__)

JUDGE_MAX_LENGTH = 16
ANSWER_MAX_LENGTH = 512
OPTION_LETTERS = "ABCD"


@dataclass(frozen=True)
class MemoryLabel:
    text: str
    turn: int

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise InputFormatError("memory label text must be non-empty")


@dataclass(frozen=True)
class ProbeQuestion:
    question: str
    options: tuple[str, ...]
    answer_index: int
    turn: int

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        if len(self.options) != 4:
            raise InputFormatError(f"probe needs exactly 4 options, got {len(self.options)}")
        if len(set(self.options)) != 4:
            raise InputFormatError("probe options must be distinct")
        if not 0 <= self.answer_index <= 3:
            raise InputFormatError(f"answer_index {self.answer_index} out of range")


@dataclass(frozen=True)
class ProbeTriplet:
    P: str
    Q: str
    A: str

    def __post_init__(self):
        if not all(s and s.strip() for s in (self.P, self.Q, self.A)):
            raise InputFormatError("probe triplet fields must be non-empty")


def _load(path: str | Path, build: Callable[[dict], object]) -> list:
    out = []
    for record in iter_jsonl(path):
        try:
            out.append(build(record))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InputFormatError):
                raise
            raise InputFormatError(f"{path}: bad record {record!r}: {exc!r}") from exc
    return out


def load_labels(path: str | Path) -> list[MemoryLabel]:
    return _load(path, lambda r: MemoryLabel(text=r["text"], turn=int(r["turn"])))


def load_probes(path: str | Path) -> list[ProbeQuestion]:
    return _load(path, lambda r: ProbeQuestion(
        question=r["question"], options=tuple(r["options"]), answer_index=int(r["answer_index"]), turn=int(r["turn"])
    ))


def load_triplets(path: str | Path) -> list[ProbeTriplet]:
    return _load(path, lambda r: ProbeTriplet(P=r["P"], Q=r["Q"], A=r["A"]))


@dataclass
class EvalReport:
    metrics: dict[str, float] = field(default_factory=dict)
    details: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "details": self.details}


# ---------------------------------------------------------------------------
# ROUGE
# ---------------------------------------------------------------------------


def _bigrams(tokens: Sequence[str]) -> Counter:
    return Counter(zip(tokens, tokens[1:]))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_precision(candidate: str, reference: str, variant: str = "rougeL") -> float:
    """ROUGE-2 or ROUGE-L precision of ``candidate`` against ``reference``.

    Empty candidates score 0, as do one-token candidates under ROUGE-2.
    """
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if variant == "rouge2":
        grams = _bigrams(cand)
        total = sum(grams.values())
        if not total:
            return 0.0
        return sum((grams & _bigrams(ref)).values()) / total
    if variant == "rougeL":
        if not cand:
            return 0.0
        return lcs_length(cand, ref) / len(cand)
    raise ValueError(f"unknown ROUGE variant {variant!r}")


class RougeScorer:
    """ROUGE precision as a similarity scorer: ``score(label, memory)``."""

    def __init__(self, variant: str = "rougeL"):
        if variant not in ("rouge2", "rougeL"):
            raise ValueError(f"unknown ROUGE variant {variant!r}")
        self.variant = variant
        self.identity = f"rouge:{variant}"

    def score(self, a: str, b: str) -> float:
        return rouge_precision(b, a, self.variant)


# ---------------------------------------------------------------------------
# Label-based metrics
# ---------------------------------------------------------------------------


def best_match_details(
    labels: Sequence[MemoryLabel], memories: Sequence[str], scorer: SimilarityScorer
) -> list[dict]:
    rows = []
    for label in labels:
        best, best_idx = 0.0, None
        for idx, memory in enumerate(memories):
            s = scorer.score(label.text, memory)
            if best_idx is None or s > best:
                best, best_idx = s, idx
        rows.append({"label": label.text, "turn": label.turn, "score": best, "best_memory": best_idx})
    return rows


def best_match_score(labels: Sequence[MemoryLabel], memories: Sequence[str], scorer: SimilarityScorer) -> float:
    """Mean over labels of the best similarity any memory reaches."""
    if not labels:
        raise ValueError("best_match_score needs at least one label")
    return statistics.fmean(row["score"] for row in best_match_details(labels, memories, scorer))


def parse_judge_score(raw: str) -> int | None:
    match = re.search(r"(?<![\d.])([0-5])(?![\d.])", raw)
    return int(match.group(1)) if match else None


def judge(judge_backend: TextGenerator, response: str, reference: str) -> int | None:
    raw = judge_backend.generate(render("judge.txt", response=response, reference=reference), JUDGE_MAX_LENGTH)
    score = parse_judge_score(raw)
    if score is None:
        logger.warning("unparseable judge output %r; scoring 0", raw)
    return score


def mem_score_details(
    memories: Sequence[str],
    labels: Sequence[MemoryLabel],
    scorer: SimilarityScorer,
    judge_backend: TextGenerator,
) -> list[dict]:
    if not labels:
        raise ValueError("mem_score needs at least one label")
    best_per_label: dict[int, int] = {}
    rows = []
    for m_idx, memory in enumerate(memories):
        sims = [scorer.score(label.text, memory) for label in labels]
        l_idx = max(range(len(labels)), key=lambda i: (sims[i], -i))
        grade = judge(judge_backend, memory, labels[l_idx].text)
        rows.append({"memory": m_idx, "label": l_idx, "similarity": sims[l_idx], "judge": grade})
        best_per_label[l_idx] = max(best_per_label.get(l_idx, 0), grade or 0)
    return [
        {"label": label.text, "turn": label.turn, "score": best_per_label.get(i, 0), "matched": i in best_per_label,
         "pairs": [r for r in rows if r["label"] == i]}
        for i, label in enumerate(labels)
    ]


def mem_score(
    memories: Sequence[str],
    labels: Sequence[MemoryLabel],
    scorer: SimilarityScorer,
    judge_backend: TextGenerator,
) -> float:
    """Judge-graded (0-5) fidelity per label, keeping the best matched memory; unmatched labels get 0."""
    return statistics.fmean(row["score"] for row in mem_score_details(memories, labels, scorer, judge_backend))


def evaluate_labels(
    labels: Sequence[MemoryLabel],
    memories: Sequence[str],
    scorer: SimilarityScorer,
    judge_backend: TextGenerator | None = None,
) -> EvalReport:
    report = EvalReport()
    rows = best_match_details(labels, memories, scorer)
    report.metrics[f"best_match[{scorer.identity}]"] = statistics.fmean(r["score"] for r in rows)
    rouge_rows = {v: best_match_details(labels, memories, RougeScorer(v)) for v in ("rouge2", "rougeL")}
    for variant, vrows in rouge_rows.items():
        report.metrics[f"{variant}_precision"] = statistics.fmean(r["score"] for r in vrows)
    if judge_backend is not None:
        ms_rows = mem_score_details(memories, labels, scorer, judge_backend)
        report.metrics["mem_score"] = statistics.fmean(r["score"] for r in ms_rows)
    for i, row in enumerate(rows):
        detail = {
            "label": row["label"],
            "turn": row["turn"],
            "best_match": row["score"],
            "rouge2_precision": rouge_rows["rouge2"][i]["score"],
            "rougeL_precision": rouge_rows["rougeL"][i]["score"],
        }
        if judge_backend is not None:
            detail["mem_score"] = ms_rows[i]["score"]
        report.details.append(detail)
    return report


# ---------------------------------------------------------------------------
# Probe questions
# ---------------------------------------------------------------------------


def parse_choice(raw: str) -> int | None:
    match = re.search(r"(?<![A-Za-z])([A-D])(?![A-Za-z])", raw.strip())
    return OPTION_LETTERS.index(match.group(1)) if match else None


def _memory_block(memories: Sequence[str]) -> str:
    return "\n".join(f"- {m}" for m in memories) if memories else "(none)"


def probe_qa_details(
    probes: Sequence[ProbeQuestion],
    memory_provider: Callable[[ProbeQuestion], Sequence[str]],
    answerer: TextGenerator,
) -> list[dict]:
    rows = []
    for probe in probes:
        memories = list(memory_provider(probe))
        prompt = render(
            "answer_probe.txt",
            memories=_memory_block(memories),
            question=probe.question,
            options="\n".join(f"{OPTION_LETTERS[i]}. {opt}" for i, opt in enumerate(probe.options)),
        )
        raw = answerer.generate(prompt, ANSWER_MAX_LENGTH)
        choice = parse_choice(raw)
        if choice is None:
            logger.warning("unparseable probe answer %r; counted wrong", raw)
        rows.append({
            "question": probe.question,
            "turn": probe.turn,
            "choice": choice,
            "answer_index": probe.answer_index,
            "correct": choice == probe.answer_index,
        })
    return rows


def probe_qa_precision(
    probes: Sequence[ProbeQuestion],
    memory_provider: Callable[[ProbeQuestion], Sequence[str]],
    answerer: TextGenerator,
) -> float:
    if not probes:
        raise ValueError("probe_qa_precision needs at least one probe")
    rows = probe_qa_details(probes, memory_provider, answerer)
    return sum(r["correct"] for r in rows) / len(rows)


def _say(engine, speaker: Speaker, text: str, filler: str) -> None:
    """Add a turn for ``speaker``, inserting a filler turn first if it is not their turn."""
    state = engine.state
    first = state.first_speaker or speaker
    other = Speaker.CHATBOT if first is Speaker.USER else Speaker.USER
    expected = first if state.next_turn_index % 2 == 0 else other
    if expected is not speaker:
        engine.add_turn(expected, filler)
    engine.add_turn(speaker, text)


def probe_table_details(
    triplets: Sequence[ProbeTriplet],
    engine,
    answerer: TextGenerator,
    judge_backend: TextGenerator,
    advance_rounds: int | None = None,
    memory_provider: Callable[[str], Sequence[str]] | None = None,
    k: int | None = None,
) -> list[dict]:
    cfg = engine.config
    if advance_rounds is None:
        advance_rounds = max(cfg.nsb.theta1, cfg.pcb.snapshot_interval_rounds)
    if memory_provider is None:
        memory_provider = lambda q: [m.text for m in engine.retrieve(q, k)]
    rows = []
    for n, triplet in enumerate(triplets):
        _say(engine, Speaker.USER, triplet.P, "Go on.")
        engine.add_turn(Speaker.CHATBOT, "I see.")
        for i in range(advance_rounds):
            engine.add_turn(Speaker.USER, f"Let us keep going with the story, part {n}.{i}.")
            engine.add_turn(Speaker.CHATBOT, f"Alright, continuing part {n}.{i}.")
        memories = list(memory_provider(triplet.Q))
        response = answerer.generate(
            render("answer_free.txt", memories=_memory_block(memories), question=triplet.Q), ANSWER_MAX_LENGTH
        ).strip() or "..."
        _say(engine, Speaker.USER, triplet.Q, "Go on.")
        engine.add_turn(Speaker.CHATBOT, response)
        grade = judge(judge_backend, response, triplet.A)
        rows.append({"P": triplet.P, "Q": triplet.Q, "A": triplet.A, "response": response, "score": grade or 0})
    return rows


def probe_table_eval(
    triplets: Sequence[ProbeTriplet],
    engine,
    answerer: TextGenerator,
    judge_backend: TextGenerator,
    advance_rounds: int | None = None,
    memory_provider: Callable[[str], Sequence[str]] | None = None,
    k: int | None = None,
) -> float:
    """Insert each (P, Q, A) probe into the live dialogue and grade the reply to Q against A.

    ``P`` goes in as a user turn, the dialogue advances ``advance_rounds`` filler
    rounds (by default enough for both branches to fire once), then the
    answerer replies to ``Q`` from retrieved memories and the judge scores that
    reply against ``A`` on 0-5.
    """
    if not triplets:
        raise ValueError("probe_table_eval needs at least one triplet")
    rows = probe_table_details(triplets, engine, answerer, judge_backend, advance_rounds, memory_provider, k)
    return statistics.fmean(r["score"] for r in rows)
