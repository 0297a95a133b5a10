"""Command-line entry points.

Four subcommands: ``ask`` runs one question through the debate pipeline,
``eval`` scores a JSONL dataset with checkpointing, ``analyze`` computes
summary statistics over a finished run directory, and ``validate-config``
checks a config file without contacting any endpoint.

Exit codes: 0 success, 1 aborted run (endpoint failure), 2 configuration or
dataset validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from datetime import datetime
from pathlib import Path

from .analysis import (
    calibration_records_from_rows,
    summarize_run,
    transcript_round_overlap,
)
from .config import ConfigError, RunConfig, load_config
from .debate import AbortedRun, run_pipeline
from .evaluation import EvalRow, RecordValidationError, load_dataset, load_image, run_eval
from .transcript import load_transcript, save_transcript

EXIT_OK = 0
EXIT_ABORTED = 1
EXIT_CONFIG = 2


def _fail_config(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_CONFIG


def _load(config_path: str) -> RunConfig:
    return load_config(config_path)


def _make_run_dir(args: argparse.Namespace, config: RunConfig) -> Path:
    if args.run_dir:
        run_dir = Path(args.run_dir)
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        run_dir = Path("runs") / f"{stamp}_{config.run_seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _snapshot_config(config_path: str, run_dir: Path) -> None:
    target = run_dir / "config.json"
    if not target.exists():
        target.write_text(Path(config_path).read_text(encoding="utf-8"), encoding="utf-8")


def _apply_seed(config: RunConfig, seed: int | None) -> RunConfig:
    if seed is None or seed == config.run_seed:
        return config
    from dataclasses import replace

    return replace(config, run_seed=seed)


def cmd_ask(args: argparse.Namespace) -> int:
    try:
        config = _apply_seed(_load(args.config), args.seed)
    except ConfigError as exc:
        return _fail_config(str(exc))
    image = load_image(Path(args.image)) if args.image else None
    try:
        result = run_pipeline(args.question, image, config, question_id=args.question_id)
    except AbortedRun as exc:
        print(f"aborted at stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_ABORTED
    if args.run_dir:
        run_dir = _make_run_dir(args, config)
        _snapshot_config(args.config, run_dir)
        transcripts = run_dir / "transcripts"
        transcripts.mkdir(exist_ok=True)
        save_transcript(transcripts / f"{args.question_id}.jsonl", result.transcript)
    print(f"answer: {result.final_answer}")
    print(f"confidence: {result.final_confidence:.4f}")
    print(f"method: {result.final.method}")
    for event in result.transcript:
        if event.get("kind") == "final":
            for warning in event.get("warnings", []):
                print(f"warning: {warning}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        config = _apply_seed(_load(args.config), args.seed)
        examples = load_dataset(args.dataset)
    except (ConfigError, RecordValidationError) as exc:
        return _fail_config(str(exc))
    except OSError as exc:
        return _fail_config(str(exc))
    run_dir = _make_run_dir(args, config)
    _snapshot_config(args.config, run_dir)
    try:
        report = run_eval(
            examples,
            config,
            run_dir=run_dir,
            resume=args.resume,
        )
    except AbortedRun as exc:
        print(
            f"aborted on question {exc.question_id} at stage {exc.stage}: {exc.cause}",
            file=sys.stderr,
        )
        print(f"partial results preserved under {run_dir}", file=sys.stderr)
        return EXIT_ABORTED
    aggregate = "n/a" if report.aggregate is None else f"{report.aggregate:.4f}"
    print(f"examples: {len(report.rows)}")
    print(f"aggregate: {aggregate}")
    for category, score in report.per_category.items():
        print(f"  {category}: {score:.4f}")
    print(f"run dir: {run_dir}")
    return EXIT_OK


def _read_rows(run_dir: Path) -> list[EvalRow]:
    results = run_dir / "reports" / "results.jsonl"
    if not results.exists():
        return []
    rows = []
    for line in results.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(EvalRow.from_json(json.loads(line)))
    return rows


def _read_transcripts(run_dir: Path) -> dict[str, list[dict]]:
    transcripts = {}
    directory = run_dir / "transcripts"
    if directory.is_dir():
        for path in sorted(directory.glob("*.jsonl")):
            transcripts[path.stem] = load_transcript(path)
    return transcripts


def cmd_analyze(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        return _fail_config(f"run dir not found: {run_dir}")
    rows = _read_rows(run_dir)
    transcripts = _read_transcripts(run_dir)
    if not rows and not transcripts:
        return _fail_config(f"no results or transcripts under {run_dir}")

    out_dir = run_dir / "reports" / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)

    summary = summarize_run(rows, list(transcripts.values()))
    if rows:
        summary["aggregate"] = sum(row.score for row in rows) / len(rows)
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    with (out_dir / "calibration.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["question_id", "confidence", "correct"])
        records = calibration_records_from_rows(rows)
        for row, record in zip(rows, records):
            writer.writerow([row.question_id, record.confidence, int(record.correct)])

    with (out_dir / "tools.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["tool", "fraction_of_tool_using_questions"])
        for name, fraction in summary["tool_distribution"]["per_tool"].items():
            writer.writerow([name, fraction])

    with (out_dir / "overlap.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["question_id", "actor", "rouge1", "rouge2", "rouge_l", "jaccard", "empty_input"]
        )
        for question_id, transcript in transcripts.items():
            for actor, metrics in transcript_round_overlap(transcript).items():
                writer.writerow(
                    [
                        question_id,
                        actor,
                        metrics.rouge1,
                        metrics.rouge2,
                        metrics.rouge_l,
                        metrics.jaccard,
                        int(metrics.empty_input),
                    ]
                )

    print(f"analysis written to {out_dir}")
    if summary.get("ece") is not None:
        print(f"ece: {summary['ece']:.4f}")
    print(f"disagreement rate: {summary['disagreement_rate']:.4f}")
    return EXIT_OK


def cmd_validate_config(args: argparse.Namespace) -> int:
    try:
        config = _load(args.config)
    except ConfigError as exc:
        return _fail_config(str(exc))
    except OSError as exc:
        return _fail_config(str(exc))
    print("config ok")
    print(f"endpoints: {len(config.endpoints)}")
    print(f"answerers: {len(config.answerer_ids)}")
    print(f"tools: {len(config.tools) if config.tools else 'builtin'}")
    print(f"rounds: {config.rounds}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tooldebate",
        description="Multi-agent debate over visual questions with expert tools.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    ask = subparsers.add_parser("ask", help="run one question through the pipeline")
    ask.add_argument("--config", required=True, help="path to a run config JSON file")
    ask.add_argument("--question", required=True, help="question text")
    ask.add_argument("--image", help="path to the image file")
    ask.add_argument("--question-id", default="cli", help="identifier used in artifacts")
    ask.add_argument("--seed", type=int, help="override the run seed")
    ask.add_argument("--run-dir", help="directory to write the transcript into")
    ask.set_defaults(handler=cmd_ask)

    evaluate = subparsers.add_parser("eval", help="evaluate a JSONL dataset")
    evaluate.add_argument("--config", required=True, help="path to a run config JSON file")
    evaluate.add_argument("--dataset", required=True, help="path to a JSONL dataset")
    evaluate.add_argument("--seed", type=int, help="override the run seed")
    evaluate.add_argument("--run-dir", help="run directory (default runs/<timestamp>_<seed>)")
    evaluate.add_argument(
        "--resume", action="store_true", help="skip questions already checkpointed in run-dir"
    )
    evaluate.set_defaults(handler=cmd_eval)

    analyze = subparsers.add_parser("analyze", help="summarize a finished run directory")
    analyze.add_argument("--run-dir", required=True, help="run directory produced by eval")
    analyze.set_defaults(handler=cmd_analyze)

    validate = subparsers.add_parser(
        "validate-config", help="check a config file without network access"
    )
    validate.add_argument("--config", required=True, help="path to a run config JSON file")
    validate.set_defaults(handler=cmd_validate_config)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
