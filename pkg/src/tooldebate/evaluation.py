"""Dataset loading, answer scoring, and the checkpointed evaluation loop.

Datasets are JSONL, one example per line.  Multiple-choice predictions are
matched by choice letter or full choice text; direct-answer predictions are
scored by how many reference annotators agree, capped at three.  The eval
loop writes per-example artifacts (transcript, report row, checkpoint id)
as soon as each question finishes, so an interrupted run can resume without
recomputing or overwriting completed work.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .config import RunConfig
from .debate import PipelineResult, run_pipeline
from .gateway import ImageAttachment, ModelGateway
from .prompts import PromptLibrary
from .tools import ToolRegistry
from .answering import normalize_answer
from .transcript import save_transcript

KIND_MULTIPLE_CHOICE = "multiple_choice"
KIND_DIRECT_ANSWER = "direct_answer"

_ARTICLES = frozenset({"a", "an", "the"})
_LETTER_RE = re.compile(r"(?:option|choice|answer)?\s*\(?([a-z])\)?$")

_MEDIA_TYPES = {
    ".png": "image/png",
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
    ".gif": "image/gif",
    ".webp": "image/webp",
    ".bmp": "image/bmp",
}


class RecordValidationError(ValueError):
    """A dataset line failed validation; carries its 1-based line number."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True)
class Example:
    question_id: str
    question: str
    image_path: Path | None
    kind: str
    gold: object
    choices: tuple[str, ...] | None = None
    category: str | None = None


@dataclass
class EvalRow:
    question_id: str
    prediction: str
    score: float
    confidence: float
    category: str | None = None
    flags: list[str] = field(default_factory=list)
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "prediction": self.prediction,
            "score": self.score,
            "confidence": self.confidence,
            "category": self.category,
            "flags": list(self.flags),
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }

    @classmethod
    def from_json(cls, data: dict) -> "EvalRow":
        return cls(
            question_id=data["question_id"],
            prediction=data["prediction"],
            score=data["score"],
            confidence=data["confidence"],
            category=data.get("category"),
            flags=list(data.get("flags", [])),
            prompt_tokens=data.get("prompt_tokens", 0),
            completion_tokens=data.get("completion_tokens", 0),
        )


@dataclass
class EvalReport:
    rows: list[EvalRow]
    aggregate: float | None
    per_category: dict[str, float]
    token_totals: dict[str, int]


def _validate_example(record: object, line_number: int) -> Example:
    if not isinstance(record, dict):
        raise RecordValidationError(line_number, "record must be a JSON object")
    question_id = record.get("question_id")
    if not isinstance(question_id, str) or not question_id:
        raise RecordValidationError(line_number, "question_id must be a non-empty string")
    question = record.get("question")
    if not isinstance(question, str) or not question:
        raise RecordValidationError(line_number, "question must be a non-empty string")
    kind = record.get("kind")
    if kind not in (KIND_MULTIPLE_CHOICE, KIND_DIRECT_ANSWER):
        raise RecordValidationError(line_number, f"unknown kind {kind!r}")
    image_value = record.get("image")
    image_path = None
    if image_value is not None:
        if not isinstance(image_value, str):
            raise RecordValidationError(line_number, "image must be a path string or null")
        image_path = Path(image_value)
    category = record.get("category")
    if category is not None and not isinstance(category, str):
        raise RecordValidationError(line_number, "category must be a string")
    gold = record.get("gold")
    choices = None
    if kind == KIND_MULTIPLE_CHOICE:
        raw_choices = record.get("choices")
        if (
            not isinstance(raw_choices, list)
            or not raw_choices
            or not all(isinstance(c, str) and c for c in raw_choices)
        ):
            raise RecordValidationError(line_number, "choices must be a non-empty list of strings")
        choices = tuple(raw_choices)
        if not isinstance(gold, int) or isinstance(gold, bool) or not 0 <= gold < len(choices):
            raise RecordValidationError(line_number, "gold must be a choice index")
    else:
        if (
            not isinstance(gold, list)
            or not gold
            or not all(isinstance(g, str) and g for g in gold)
        ):
            raise RecordValidationError(line_number, "gold must be a non-empty list of reference strings")
        gold = list(gold)
    return Example(
        question_id=question_id,
        question=question,
        image_path=image_path,
        kind=kind,
        gold=gold,
        choices=choices,
        category=category,
    )


def load_dataset(path: str | Path) -> list[Example]:
    """Read and validate a JSONL dataset; blank lines are ignored."""
    examples = []
    seen: set[str] = set()
    for line_number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordValidationError(line_number, f"invalid JSON: {exc}") from None
        example = _validate_example(record, line_number)
        if example.question_id in seen:
            raise RecordValidationError(line_number, f"duplicate question_id {example.question_id!r}")
        seen.add(example.question_id)
        examples.append(example)
    return examples


def load_image(path: Path | None) -> ImageAttachment | None:
    """Best-effort image load; missing files yield no attachment so fully
    mocked runs do not need real pixels on disk."""
    if path is None or not path.exists():
        return None
    media_type = _MEDIA_TYPES.get(path.suffix.lower(), "application/octet-stream")
    return ImageAttachment(media_type=media_type, data=path.read_bytes())


def match_choice(prediction: str, choices: Sequence[str]) -> int | None:
    """Resolve a free-text prediction to a choice index, or None.

    Accepts a bare letter ("A", "(b)"), an option reference ("Option A",
    "choice c"), or the full choice text, all compared after answer
    normalization.
    """
    normalized = normalize_answer(prediction)
    match = _LETTER_RE.fullmatch(normalized)
    if match:
        index = ord(match.group(1)) - ord("a")
        if 0 <= index < len(choices):
            return index
        return None
    for index, choice in enumerate(choices):
        if normalized == normalize_answer(choice):
            return index
    return None


def score_multiple_choice(prediction: str, example: Example) -> int:
    """1 when the prediction resolves to the gold choice, else 0."""
    if example.choices is None:
        raise ValueError(f"{example.question_id} is not multiple choice")
    matched = match_choice(prediction, example.choices)
    return int(matched is not None and matched == example.gold)


def normalize_direct_answer(text: str) -> str:
    """Grouping normalization plus English article removal."""
    words = [w for w in normalize_answer(text).split() if w not in _ARTICLES]
    return " ".join(words)


def score_direct_answer(prediction: str, gold: Sequence[str]) -> float:
    """min(1, matches / 3) over normalized reference annotations."""
    normalized = normalize_direct_answer(prediction)
    matches = sum(1 for reference in gold if normalize_direct_answer(reference) == normalized)
    return min(3, matches) / 3.0


def score_example(prediction: str, example: Example) -> tuple[float, list[str]]:
    """Score plus flags (``unparsed_choice`` when a MC prediction matched
    neither letter nor text)."""
    if example.kind == KIND_MULTIPLE_CHOICE:
        matched = match_choice(prediction, example.choices)
        if matched is None:
            return 0.0, ["unparsed_choice"]
        return float(matched == example.gold), []
    return score_direct_answer(prediction, example.gold), []


def _aggregate(rows: Sequence[EvalRow]) -> tuple[float | None, dict[str, float]]:
    if not rows:
        return None, {}
    aggregate = sum(row.score for row in rows) / len(rows)
    per_category: dict[str, list[float]] = {}
    for row in rows:
        if row.category is not None:
            per_category.setdefault(row.category, []).append(row.score)
    breakdown = {
        category: sum(scores) / len(scores) for category, scores in sorted(per_category.items())
    }
    return aggregate, breakdown


def _read_completed(run_dir: Path) -> tuple[set[str], list[EvalRow]]:
    completed: set[str] = set()
    rows: list[EvalRow] = []
    checkpoint = run_dir / "checkpoints" / "completed.jsonl"
    if checkpoint.exists():
        for line in checkpoint.read_text(encoding="utf-8").splitlines():
            if line.strip():
                completed.add(json.loads(line)["question_id"])
    results = run_dir / "reports" / "results.jsonl"
    if results.exists():
        for line in results.read_text(encoding="utf-8").splitlines():
            if line.strip():
                row = EvalRow.from_json(json.loads(line))
                if row.question_id in completed:
                    rows.append(row)
    return completed, rows


def run_eval(
    examples: Sequence[Example],
    config: RunConfig,
    *,
    run_seed: int | None = None,
    run_dir: str | Path | None = None,
    resume: bool = False,
    gateway: ModelGateway | None = None,
    registry: ToolRegistry | None = None,
    prompts: PromptLibrary | None = None,
) -> EvalReport:
    """Evaluate a dataset through the debate pipeline.

    Artifacts land under ``run_dir``: per-question transcripts, incremental
    report rows, and a checkpoint of completed question ids.  With
    ``resume=True`` completed examples are skipped and their stored rows are
    reused, so a finished row is never overwritten.  An endpoint failure
    aborts the run (raising :class:`AbortedRun`) with partial artifacts
    preserved.
    """
    if run_seed is not None and run_seed != config.run_seed:
        from dataclasses import replace

        config = replace(config, run_seed=run_seed)
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "transcripts").mkdir(parents=True, exist_ok=True)
        (run_dir / "reports").mkdir(parents=True, exist_ok=True)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    completed: set[str] = set()
    previous_rows: list[EvalRow] = []
    if resume:
        if run_dir is None:
            raise ValueError("resume requires a run_dir")
        completed, previous_rows = _read_completed(run_dir)

    gateway = gateway if gateway is not None else config.build_gateway()
    registry = registry if registry is not None else config.build_registry()
    prompts = prompts if prompts is not None else config.build_prompts()

    pending = [example for example in examples if example.question_id not in completed]
    new_rows: list[EvalRow] = []
    write_lock = threading.Lock()

    def finish(example: Example, result: PipelineResult) -> EvalRow:
        score, flags = score_example(result.final_answer, example)
        row = EvalRow(
            question_id=example.question_id,
            prediction=result.final_answer,
            score=score,
            confidence=result.final_confidence,
            category=example.category,
            flags=flags,
            prompt_tokens=result.token_totals["prompt_tokens"],
            completion_tokens=result.token_totals["completion_tokens"],
        )
        with write_lock:
            new_rows.append(row)
            if run_dir is not None:
                save_transcript(run_dir / "transcripts" / f"{example.question_id}.jsonl", result.transcript)
                with (run_dir / "reports" / "results.jsonl").open("a", encoding="utf-8") as handle:
                    handle.write(json.dumps(row.to_json(), sort_keys=True) + "\n")
                with (run_dir / "checkpoints" / "completed.jsonl").open("a", encoding="utf-8") as handle:
                    handle.write(json.dumps({"question_id": example.question_id}) + "\n")
        return row

    def run_one(example: Example) -> EvalRow:
        result = run_pipeline(
            example.question,
            load_image(example.image_path),
            config,
            question_id=example.question_id,
            gateway=gateway,
            registry=registry,
            prompts=prompts,
        )
        return finish(example, result)

    if config.workers > 1 and len(pending) > 1:
        from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait

        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(run_one, example) for example in pending]
            done, not_done = wait(futures, return_when=FIRST_EXCEPTION)
            for future in not_done:
                future.cancel()
            for future in done:
                future.result()
    else:
        for example in pending:
            run_one(example)

    all_rows = sorted(previous_rows + new_rows, key=lambda row: row.question_id)
    aggregate, per_category = _aggregate(all_rows)
    token_totals = {
        "prompt_tokens": sum(row.prompt_tokens for row in all_rows),
        "completion_tokens": sum(row.completion_tokens for row in all_rows),
    }
    report = EvalReport(
        rows=all_rows,
        aggregate=aggregate,
        per_category=per_category,
        token_totals=token_totals,
    )
    if run_dir is not None:
        summary = {
            "examples": len(all_rows),
            "aggregate": report.aggregate,
            "per_category": report.per_category,
            "token_totals": report.token_totals,
            "run_seed": config.run_seed,
        }
        (run_dir / "reports" / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return report
