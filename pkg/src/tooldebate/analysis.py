"""Post-hoc analysis over evaluation outputs and debate transcripts.

Three families of measurement live here: lexical overlap between two texts
(ROUGE-1/2/L and Jaccard, used to compare what agents said across rounds),
expected calibration error over confidence-annotated predictions, and
transcript statistics (which tools get recruited, how often agents disagree).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .answering import ParseFailure, normalize_answer, parse_agent_output
from .transcript import STAGE_DISCUSS, STAGE_INITIAL

ECE_BINS = 10


@dataclass(frozen=True)
class OverlapMetrics:
    rouge1: float
    rouge2: float
    rouge_l: float
    jaccard: float
    empty_input: bool = False

    def to_json(self) -> dict:
        return {
            "rouge1": self.rouge1,
            "rouge2": self.rouge2,
            "rouge_l": self.rouge_l,
            "jaccard": self.jaccard,
            "empty_input": self.empty_input,
        }


@dataclass(frozen=True)
class CalibrationRecord:
    confidence: float
    correct: bool


@dataclass
class ToolDistribution:
    questions_with_calls: int
    questions_total: int
    per_tool: dict[str, float] = field(default_factory=dict)
    calls_per_question: float = 0.0

    def to_json(self) -> dict:
        return {
            "questions_with_calls": self.questions_with_calls,
            "questions_total": self.questions_total,
            "per_tool": dict(sorted(self.per_tool.items())),
            "calls_per_question": self.calls_per_question,
        }


def overlap_tokens(text: str) -> list[str]:
    """Tokens for overlap metrics: lowercase words, punctuation stripped."""
    tokens = []
    for word in text.lower().split():
        cleaned = "".join(ch for ch in word if ch.isalnum())
        if cleaned:
            tokens.append(cleaned)
    return tokens


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap: int, len_a: int, len_b: int) -> float:
    if len_a == 0 or len_b == 0 or overlap == 0:
        return 0.0
    precision = overlap / len_a
    recall = overlap / len_b
    return 2 * precision * recall / (precision + recall)


def rouge_n(tokens_a: Sequence[str], tokens_b: Sequence[str], n: int) -> float:
    """F1 over clipped n-gram multiset overlap."""
    grams_a = _ngrams(tokens_a, n)
    grams_b = _ngrams(tokens_b, n)
    overlap = sum((grams_a & grams_b).values())
    return _f1(overlap, sum(grams_a.values()), sum(grams_b.values()))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length, two-row dynamic programming."""
    if not a or not b:
        return 0
    if len(b) > len(a):
        a, b = b, a
    previous = [0] * (len(b) + 1)
    for item in a:
        current = [0]
        for j, other in enumerate(b, start=1):
            if item == other:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(tokens_a: Sequence[str], tokens_b: Sequence[str]) -> float:
    """F1 over longest-common-subsequence length."""
    return _f1(lcs_length(tokens_a, tokens_b), len(tokens_a), len(tokens_b))


def jaccard(tokens_a: Sequence[str], tokens_b: Sequence[str]) -> float:
    set_a, set_b = set(tokens_a), set(tokens_b)
    union = set_a | set_b
    if not union:
        return 0.0
    return len(set_a & set_b) / len(union)


def compute_overlap(text_a: str, text_b: str) -> OverlapMetrics:
    """All overlap metrics for a pair of texts.

    Symmetric in its arguments.  When both sides tokenize to nothing every
    metric is 0.0 and ``empty_input`` is set.
    """
    tokens_a = overlap_tokens(text_a)
    tokens_b = overlap_tokens(text_b)
    empty = not tokens_a and not tokens_b
    return OverlapMetrics(
        rouge1=rouge_n(tokens_a, tokens_b, 1),
        rouge2=rouge_n(tokens_a, tokens_b, 2),
        rouge_l=rouge_l(tokens_a, tokens_b),
        jaccard=jaccard(tokens_a, tokens_b),
        empty_input=empty,
    )


def compute_ece(records: Sequence[CalibrationRecord], bins: int = ECE_BINS) -> float:
    """Expected calibration error with equal-width confidence bins.

    Per-bin terms are accumulated in exact rational arithmetic and converted
    to float once at the end, so duplicating the record list exactly
    preserves the result.
    """
    if bins <= 0:
        raise ValueError("bins must be positive")
    if not records:
        return 0.0
    bin_confidence = [Fraction(0)] * bins
    bin_correct = [Fraction(0)] * bins
    bin_count = [0] * bins
    for record in records:
        confidence = Fraction(record.confidence)
        if not 0 <= confidence <= 1:
            raise ValueError(f"confidence {float(confidence)} outside [0, 1]")
        index = min(int(confidence * bins), bins - 1)
        bin_confidence[index] += confidence
        bin_correct[index] += int(record.correct)
        bin_count[index] += 1
    total = len(records)
    error = Fraction(0)
    for index in range(bins):
        if bin_count[index] == 0:
            continue
        accuracy = bin_correct[index] / bin_count[index]
        confidence = bin_confidence[index] / bin_count[index]
        error += Fraction(bin_count[index], total) * abs(accuracy - confidence)
    return float(error)


def calibration_records_from_rows(rows: Iterable) -> list[CalibrationRecord]:
    """Binarize eval rows for calibration: correct means score >= 0.5."""
    return [
        CalibrationRecord(confidence=row.confidence, correct=row.score >= 0.5)
        for row in rows
    ]


def _tool_events(transcript: Sequence[dict]) -> list[dict]:
    return [event for event in transcript if event.get("kind") == "tool"]


def _plan_events(transcript: Sequence[dict]) -> list[dict]:
    return [event for event in transcript if event.get("kind") == "plan"]


def tool_distribution(transcripts: Sequence[Sequence[dict]]) -> ToolDistribution:
    """How often each tool is invoked, per question.

    ``per_tool`` maps tool name to the fraction of tool-using questions that
    invoked it at least once; ``calls_per_question`` averages raw invocation
    counts over all questions.
    """
    questions_total = len(transcripts)
    questions_with_calls = 0
    used_by: Counter = Counter()
    total_calls = 0
    for transcript in transcripts:
        events = _tool_events(transcript)
        total_calls += len(events)
        if not events:
            continue
        questions_with_calls += 1
        for name in {event["tool_name"] for event in events}:
            used_by[name] += 1
    per_tool = {}
    if questions_with_calls:
        per_tool = {
            name: count / questions_with_calls for name, count in sorted(used_by.items())
        }
    calls_per_question = total_calls / questions_total if questions_total else 0.0
    return ToolDistribution(
        questions_with_calls=questions_with_calls,
        questions_total=questions_total,
        per_tool=per_tool,
        calls_per_question=calls_per_question,
    )


def disagreement_rate(transcripts: Sequence[Sequence[dict]]) -> float:
    """Mean number of planned tool invocations per question.

    A unanimous question recruits nothing and contributes 0.
    """
    if not transcripts:
        return 0.0
    total = 0
    for transcript in transcripts:
        for event in _plan_events(transcript):
            total += len(event.get("invocations", []))
    return total / len(transcripts)


def _initial_chat_events(transcript: Sequence[dict]) -> dict[str, dict]:
    events = {}
    for event in transcript:
        if event.get("kind") == "chat" and event.get("stage") == STAGE_INITIAL:
            events.setdefault(event["actor"], event)
    return events


def _discussion_chat_events(transcript: Sequence[dict], round_index: int) -> dict[str, dict]:
    events = {}
    for event in transcript:
        if (
            event.get("kind") == "chat"
            and event.get("stage") == STAGE_DISCUSS
            and event.get("round") == round_index
        ):
            events.setdefault(event["actor"], event)
    return events


def _evidence_text(transcript: Sequence[dict], round_index: int) -> str:
    parts = []
    for event in _tool_events(transcript):
        if event.get("round", 0) <= round_index and event.get("succeeded", False):
            parts.append(event.get("evidence_text", ""))
    return " ".join(parts)


def transcript_round_overlap(
    transcript: Sequence[dict], round_index: int = 1
) -> dict[str, OverlapMetrics]:
    """Per-agent overlap between what an agent saw going into a discussion
    round (its initial reply plus accumulated tool evidence) and what it said
    in that round's reply."""
    initial = _initial_chat_events(transcript)
    discussion = _discussion_chat_events(transcript, round_index)
    evidence = _evidence_text(transcript, round_index)
    overlaps = {}
    for actor in sorted(initial):
        if actor not in discussion:
            continue
        before = initial[actor]["response"]["text"] + " " + evidence
        after = discussion[actor]["response"]["text"]
        overlaps[actor] = compute_overlap(before, after)
    return overlaps


def answer_churn(transcript: Sequence[dict]) -> dict[str, bool]:
    """Which agents changed their normalized answer between the initial round
    and their last discussion reply."""
    initial = _initial_chat_events(transcript)
    finals: dict[str, dict] = {}
    for event in transcript:
        if event.get("kind") == "chat" and event.get("stage") == STAGE_DISCUSS:
            finals[event["actor"]] = event
    def answer_of(text: str) -> str:
        try:
            return normalize_answer(parse_agent_output(text)[0])
        except ParseFailure:
            return normalize_answer(text.splitlines()[0] if text.strip() else "")

    churn = {}
    for actor, event in initial.items():
        if actor not in finals:
            continue
        churn[actor] = answer_of(event["response"]["text"]) != answer_of(
            finals[actor]["response"]["text"]
        )
    return churn


def summarize_run(
    rows: Iterable,
    transcripts: Sequence[Sequence[dict]],
) -> dict:
    """One JSON-friendly summary combining calibration and transcript stats."""
    rows = list(rows)
    records = calibration_records_from_rows(rows)
    distribution = tool_distribution(transcripts)
    return {
        "examples": len(rows),
        "ece": compute_ece(records) if records else None,
        "tool_distribution": distribution.to_json(),
        "disagreement_rate": disagreement_rate(transcripts),
    }
