"""Tool-grounded agreement scoring.

A scorer model judges each (agent answer, expert output) pair as aligned
(1) or misaligned (0).  Per-agent means over the successful expert outputs
are kept as exact rationals: with at most a handful of agents and tools
there is no reason to let floating point near a quantity that downstream
prompts and tests compare exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

from .answering import AgentAnswer
from .gateway import ChatRequest, ChatResponse, EndpointProfile, ModelGateway
from .prompts import PromptLibrary
from .recruitment import extract_json_object, NotAStructuredDocument
from .tools import ExpertOutput

REPROMPT_BUDGET = 1
SCORER_TEMPERATURE = 0.1

Recorder = Callable[[str, ChatRequest, ChatResponse], None]


class ScorerParseFailure(ValueError):
    """The scorer reply had no usable binary ``alignment`` field."""


class EmptyExpertSet(ValueError):
    """No successful expert outputs: agreement means are undefined."""


@dataclass(frozen=True)
class AgreementScores:
    """Binary alignment matrix (agents x expert outputs) and exact row means."""

    matrix: tuple[tuple[int, ...], ...]
    per_agent_mean: tuple[Fraction, ...]
    denominator: int


def render_agent_output(agent: AgentAnswer) -> str:
    return f"Answer: {agent.answer}\nReasoning: {agent.reasoning}"


def parse_alignment(text: str) -> int:
    """Read the ``alignment`` field of a structured scorer reply as 0 or 1."""
    try:
        document = json.loads(extract_json_object(text))
    except (NotAStructuredDocument, json.JSONDecodeError) as exc:
        raise ScorerParseFailure(f"no structured reply: {exc}") from exc
    value = document.get("alignment")
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, (int, float)) and value in (0, 1):
        return int(value)
    if isinstance(value, str) and value.strip() in ("0", "1"):
        return int(value.strip())
    raise ScorerParseFailure(f"alignment field is {value!r}, not binary")


def score_pair(
    agent: AgentAnswer,
    expert: ExpertOutput,
    scorer: EndpointProfile,
    *,
    gateway: ModelGateway,
    prompts: PromptLibrary,
    reprompt_budget: int = REPROMPT_BUDGET,
    recorder: Recorder | None = None,
    tag: str = "",
    warnings: list[str] | None = None,
) -> int:
    """One alignment judgment; reprompts once, then defaults to 0.

    The default-to-misaligned fallback is recorded in ``warnings`` when a
    list is supplied, so the pipeline can log the degradation.
    """
    if not expert.succeeded:
        raise ValueError(f"cannot score against failed tool output {expert.tool_name!r}")
    prompt = prompts.render(
        "agreement",
        disagreement=expert.disagreement_addressed,
        expert_output=expert.evidence_text,
        agent_output=render_agent_output(agent),
    )
    request = ChatRequest.user(prompt)
    last_error: Exception | None = None
    for _ in range(reprompt_budget + 1):
        response = gateway.send_chat(scorer, request, tag=tag)
        if recorder is not None:
            recorder(agent.agent_id, request, response)
        try:
            return parse_alignment(response.text)
        except ScorerParseFailure as exc:
            last_error = exc
    if warnings is not None:
        warnings.append(
            f"scorer default 0 for ({agent.agent_id}, {expert.tool_name}): {last_error}"
        )
    return 0


def aggregate_scores(matrix: Sequence[Sequence[int]]) -> AgreementScores:
    """Exact per-agent means of a rectangular binary matrix.

    The denominator is the expert-output count (matrix width).  Raises
    :class:`EmptyExpertSet` when the width is zero, because the means are
    undefined and must flow downstream as the no-score sentinel instead.
    """
    rows = [tuple(row) for row in matrix]
    if not rows:
        raise ValueError("matrix needs at least one agent row")
    width = len(rows[0])
    if any(len(row) != width for row in rows):
        raise ValueError("matrix rows must all have the same length")
    if width == 0:
        raise EmptyExpertSet("no expert outputs to agree with")
    for row in rows:
        for bit in row:
            if bit not in (0, 1) or isinstance(bit, bool):
                raise ValueError(f"matrix entries must be 0 or 1, got {bit!r}")
    means = tuple(Fraction(sum(row), width) for row in rows)
    return AgreementScores(matrix=tuple(rows), per_agent_mean=means, denominator=width)


def score_against_outputs(
    answers: Sequence[AgentAnswer],
    outputs: Sequence[ExpertOutput],
    scorer: EndpointProfile,
    *,
    gateway: ModelGateway,
    prompts: PromptLibrary,
    reprompt_budget: int = REPROMPT_BUDGET,
    recorder: Recorder | None = None,
    tag: str = "",
    warnings: list[str] | None = None,
) -> AgreementScores:
    """Score every agent against every successful expert output, row-major.

    Failed tool outputs are excluded from the matrix and therefore from the
    denominator.  Raises :class:`EmptyExpertSet` when nothing succeeded.
    """
    successful = [output for output in outputs if output.succeeded]
    if not successful:
        raise EmptyExpertSet("no successful expert outputs to score against")
    matrix = [
        [
            score_pair(
                agent,
                expert,
                scorer,
                gateway=gateway,
                prompts=prompts,
                reprompt_budget=reprompt_budget,
                recorder=recorder,
                tag=tag,
                warnings=warnings,
            )
            for expert in successful
        ]
        for agent in answers
    ]
    return aggregate_scores(matrix)


def scores_by_agent(
    scores: AgreementScores, answers: Sequence[AgentAnswer]
) -> dict[str, Fraction]:
    """Map agent ids to their mean, for prompt rendering."""
    if len(answers) != len(scores.per_agent_mean):
        raise ValueError("scores and answers disagree on agent count")
    return {a.agent_id: m for a, m in zip(answers, scores.per_agent_mean)}
