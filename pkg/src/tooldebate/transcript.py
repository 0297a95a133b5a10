"""Transcript event log: canonical serialization, file IO, replay extraction.

A pipeline run is persisted as JSONL, one event per prompt/response/tool
call plus derived summary events, each tagged with its stage.  Events hold
no wall-clock data and images are reduced to digests, so two identical runs
serialize to identical bytes.  ``replay_scripts`` inverts a transcript into
per-endpoint mock scripts, which is what makes any recorded run
re-executable offline.
"""

from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .gateway import ChatRequest, ChatResponse

STAGE_INITIAL = "initial"
STAGE_RECRUIT = "recruit"
STAGE_TOOL = "tool"
STAGE_SCORE = "score"
STAGE_DISCUSS = "discuss"
STAGE_AGGREGATE = "aggregate"

STAGES = (STAGE_INITIAL, STAGE_RECRUIT, STAGE_TOOL, STAGE_SCORE, STAGE_DISCUSS, STAGE_AGGREGATE)


def serialize_request(request: ChatRequest) -> dict:
    messages = []
    for message in request.messages:
        entry: dict = {"role": message.role, "text": message.text}
        if message.images:
            entry["images"] = [
                {"media_type": image.media_type, "sha256": image.digest()}
                for image in message.images
            ]
        messages.append(entry)
    return {"messages": messages}


def serialize_response(response: ChatResponse) -> dict:
    # Latency is deliberately absent: transcripts must be byte-stable.
    return {
        "text": response.text,
        "prompt_tokens": response.prompt_tokens,
        "completion_tokens": response.completion_tokens,
        "approximate_usage": response.approximate_usage,
    }


def chat_event(
    stage: str,
    round_index: int,
    endpoint_id: str,
    model: str,
    actor: str,
    request: ChatRequest,
    response: ChatResponse,
) -> dict:
    return {
        "kind": "chat",
        "stage": stage,
        "round": round_index,
        "endpoint_id": endpoint_id,
        "model": model,
        "actor": actor,
        "request": serialize_request(request),
        "response": serialize_response(response),
    }


def fraction_str(value: Fraction) -> str:
    return f"{value.numerator}/{value.denominator}"


def dumps_event(event: dict) -> str:
    return json.dumps(event, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def transcript_text(events: Iterable[dict]) -> str:
    return "".join(dumps_event(event) + "\n" for event in events)


def save_transcript(path: str | Path, events: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(transcript_text(events), encoding="utf-8")
    return path


def load_transcript(path: str | Path) -> list[dict]:
    events = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            events.append(json.loads(line))
    return events


def replay_scripts(events: Iterable[dict]) -> dict[str, list[str]]:
    """Per-endpoint canned replies, in call order, recovered from a transcript."""
    scripts: dict[str, list[str]] = {}
    for event in events:
        if event.get("kind") != "chat":
            continue
        scripts.setdefault(event["endpoint_id"], []).append(event["response"]["text"])
    return scripts
