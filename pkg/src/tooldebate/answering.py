"""Initial answer generation, reply parsing, and solution grouping.

Agents answer in a fixed ``Answer: / Reasoning: / Confidence:`` format.  The
parser tolerates reordered blocks and arbitrary casing; replies that still
fail after a reprompt budget fall back to a documented degradation rule
instead of crashing the run.  Answers are then grouped by a normalized form
so downstream stages argue about distinct solutions, not formatting noise.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .gateway import (
    ChatMessage,
    ChatRequest,
    ChatResponse,
    EndpointProfile,
    ImageAttachment,
    ModelGateway,
)
from .prompts import PromptLibrary

REPROMPT_BUDGET = 2
FALLBACK_CONFIDENCE = 0.5
FALLBACK_ANSWER = "unknown"

_TERMINAL_PUNCTUATION = ".,!?;:"
_LABEL_RE = re.compile(r"^[ \t]*(answer|reasoning|confidence)[ \t]*:[ \t]*", re.IGNORECASE | re.MULTILINE)
_NUMBER_RE = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)")

# Exchange recorder signature: (agent_id, request, response) -> None
Recorder = Callable[[str, ChatRequest, ChatResponse], None]


class ParseFailure(ValueError):
    """The reply has no usable ``Answer:`` field."""


@dataclass(frozen=True)
class AgentAnswer:
    agent_id: str
    answer: str
    reasoning: str
    confidence: float
    raw_text: str
    parse_fallback_used: bool = False

    def __post_init__(self) -> None:
        if not self.answer:
            raise ValueError("answer must be non-empty after fallback resolution")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class SolutionGroup:
    canonical_answer: str
    supporters: tuple[str, ...]
    reasonings: tuple[str, ...]
    confidences: tuple[float, ...]

    @property
    def supporter_count(self) -> int:
        return len(self.supporters)


@dataclass(frozen=True)
class GroupedSolutions:
    groups: tuple[SolutionGroup, ...]
    stage: str = "initial"

    @property
    def total_agents(self) -> int:
        return sum(group.supporter_count for group in self.groups)

    @property
    def unanimous(self) -> bool:
        return len(self.groups) == 1

    def canonical_answers(self) -> list[str]:
        return [group.canonical_answer for group in self.groups]


def normalize_answer(text: str) -> str:
    """Lowercase, collapse whitespace, strip terminal punctuation."""
    collapsed = " ".join(text.lower().split())
    return collapsed.rstrip(_TERMINAL_PUNCTUATION).strip()


def parse_agent_output(text: str) -> tuple[str, str, float]:
    """Extract (answer, reasoning, confidence) from a formatted reply.

    Labels are matched case-insensitively at line starts and may appear in
    any order; each field runs until the next label.  A missing or empty
    ``Answer:`` field raises :class:`ParseFailure`.  Confidence is parsed as
    a decimal and clamped into [0, 1]; a missing or unparseable confidence
    defaults to 0.5.
    """
    matches = list(_LABEL_RE.finditer(text))
    fields: dict[str, str] = {}
    for index, match in enumerate(matches):
        label = match.group(1).lower()
        end = matches[index + 1].start() if index + 1 < len(matches) else len(text)
        if label not in fields:
            fields[label] = text[match.end():end].strip()
    answer = fields.get("answer", "")
    if not answer:
        raise ParseFailure("no Answer field found")
    reasoning = fields.get("reasoning", "")
    confidence = FALLBACK_CONFIDENCE
    if "confidence" in fields:
        number = _NUMBER_RE.search(fields["confidence"])
        if number is not None:
            confidence = min(1.0, max(0.0, float(number.group())))
    return answer, reasoning, confidence


def render_agent_reply(answer: str, reasoning: str, confidence: float) -> str:
    """Inverse of :func:`parse_agent_output` for well-behaved field values."""
    return f"Answer: {answer}\nReasoning: {reasoning}\nConfidence: {confidence}"


def fallback_answer(raw_text: str) -> tuple[str, str, float]:
    """Degradation rule for replies that never parsed: first non-empty line
    becomes the answer, the whole text the reasoning, confidence 0.5."""
    answer = next((line.strip() for line in raw_text.splitlines() if line.strip()), "")
    return answer or FALLBACK_ANSWER, raw_text, FALLBACK_CONFIDENCE


def format_score(value) -> str:
    """Compact decimal rendering for confidences and agreement means."""
    return str(round(float(value), 4))


def group_solutions(answers: Sequence[AgentAnswer], stage: str = "initial") -> GroupedSolutions:
    """Bucket answers by their normalized form, in first-appearance order.

    Supporter counts sum to ``len(answers)`` and canonical answers are
    pairwise distinct; the grouping is invariant under agent permutation up
    to group order.
    """
    order: list[str] = []
    buckets: dict[str, list[AgentAnswer]] = {}
    for answer in answers:
        key = normalize_answer(answer.answer)
        if key not in buckets:
            buckets[key] = []
            order.append(key)
        buckets[key].append(answer)
    groups = tuple(
        SolutionGroup(
            canonical_answer=key,
            supporters=tuple(a.agent_id for a in buckets[key]),
            reasonings=tuple(a.reasoning for a in buckets[key]),
            confidences=tuple(a.confidence for a in buckets[key]),
        )
        for key in order
    )
    return GroupedSolutions(groups=groups, stage=stage)


def render_grouped(
    grouped: GroupedSolutions,
    agreement_means: Mapping[str, object] | None = None,
) -> str:
    """One block per group for downstream prompts.

    Without agreement scores the block carries the agents' self-reported
    confidence under a plain ``Confidence`` label; with scores present the
    labels switch to ``Self-confidence`` and ``Expert-agreement`` so the
    two signals cannot be confused.
    """
    blocks = []
    for group in grouped.groups:
        noun = "agent" if group.supporter_count == 1 else "agents"
        reasoning = " | ".join(group.reasonings)
        confidences = ", ".join(format_score(c) for c in group.confidences)
        head = f"Answer: {group.canonical_answer} ({group.supporter_count} {noun}) — Reasoning: {reasoning}"
        if agreement_means is None:
            blocks.append(f"{head}; Confidence: {confidences}")
        else:
            agreement = ", ".join(format_score(agreement_means[a]) for a in group.supporters)
            blocks.append(f"{head}; Self-confidence: {confidences}; Expert-agreement: {agreement}")
    return "\n\n".join(blocks)


def render_initial_prompt(question: str, prompts: PromptLibrary) -> str:
    return prompts.render("initial_answer", question=question)


def initial_request(question: str, image: ImageAttachment | None, prompts: PromptLibrary) -> ChatRequest:
    images = (image,) if image is not None else ()
    return ChatRequest(messages=(ChatMessage("user", render_initial_prompt(question, prompts), images),))


def query_agent(
    profile: EndpointProfile,
    request: ChatRequest,
    agent_id: str,
    *,
    gateway: ModelGateway,
    reprompt_budget: int = REPROMPT_BUDGET,
    recorder: Recorder | None = None,
    tag: str = "",
) -> AgentAnswer:
    """Send a request and parse the reply, reprompting on format violations.

    The same request is re-sent up to ``reprompt_budget`` extra times; after
    that the last reply is salvaged through :func:`fallback_answer` and the
    result is flagged ``parse_fallback_used``.
    """
    last_text = ""
    for _ in range(reprompt_budget + 1):
        response = gateway.send_chat(profile, request, tag=tag)
        if recorder is not None:
            recorder(agent_id, request, response)
        last_text = response.text
        try:
            answer, reasoning, confidence = parse_agent_output(response.text)
        except ParseFailure:
            continue
        return AgentAnswer(
            agent_id=agent_id,
            answer=answer,
            reasoning=reasoning,
            confidence=confidence,
            raw_text=response.text,
        )
    answer, reasoning, confidence = fallback_answer(last_text)
    return AgentAnswer(
        agent_id=agent_id,
        answer=answer,
        reasoning=reasoning,
        confidence=confidence,
        raw_text=last_text,
        parse_fallback_used=True,
    )


def substitute_empty_answer(agent_id: str) -> AgentAnswer:
    """Stand-in for an agent whose endpoint failed, under the substitute policy."""
    return AgentAnswer(
        agent_id=agent_id,
        answer=FALLBACK_ANSWER,
        reasoning="",
        confidence=0.0,
        raw_text="",
        parse_fallback_used=True,
    )


def generate_initial_answers(
    question: str,
    image: ImageAttachment | None,
    agents: Sequence[EndpointProfile],
    *,
    gateway: ModelGateway,
    prompts: PromptLibrary,
    reprompt_budget: int = REPROMPT_BUDGET,
    failure_policy: str = "abort",
    recorder: Recorder | None = None,
    tag: str = "",
    parallel: bool = False,
) -> list[AgentAnswer]:
    """Query every agent with the verbatim initial prompt.

    Output order follows agent index regardless of completion order, so
    results are deterministic given deterministic backends.  On a gateway
    failure the run-level policy decides: ``abort`` re-raises, while
    ``substitute_empty`` swaps in a flagged placeholder answer.
    """
    request = initial_request(question, image, prompts)

    def one(index: int, profile: EndpointProfile, record: Recorder | None) -> AgentAnswer:
        agent_id = f"agent-{index + 1}"
        try:
            return query_agent(
                profile,
                request,
                agent_id,
                gateway=gateway,
                reprompt_budget=reprompt_budget,
                recorder=record,
                tag=tag,
            )
        except Exception:
            if failure_policy == "substitute_empty":
                return substitute_empty_answer(agent_id)
            raise

    return run_agent_stage(agents, one, recorder=recorder, parallel=parallel)


def run_agent_stage(
    agents: Sequence[EndpointProfile],
    call_one: Callable[[int, EndpointProfile, Recorder | None], AgentAnswer],
    *,
    recorder: Recorder | None = None,
    parallel: bool = False,
) -> list[AgentAnswer]:
    """Run one per-agent phase, sequentially or with a worker per agent.

    Under the parallel path each agent's exchanges are buffered and flushed
    to the shared recorder in agent-index order after the barrier, keeping
    transcripts byte-stable either way.
    """
    if not parallel or len(agents) <= 1:
        return [call_one(index, profile, recorder) for index, profile in enumerate(agents)]

    from concurrent.futures import ThreadPoolExecutor

    buffers: list[list[tuple[str, ChatRequest, ChatResponse]]] = [[] for _ in agents]

    def buffered(index: int):
        def record(agent_id: str, request: ChatRequest, response: ChatResponse) -> None:
            buffers[index].append((agent_id, request, response))
        return record

    with ThreadPoolExecutor(max_workers=len(agents)) as pool:
        futures = [
            pool.submit(call_one, index, profile, buffered(index))
            for index, profile in enumerate(agents)
        ]
        answers = [future.result() for future in futures]
    if recorder is not None:
        for buffer in buffers:
            for exchange in buffer:
                recorder(*exchange)
    return answers
