"""Final answer selection.

By default a dedicated aggregator model reads the post-discussion groups,
the expert evidence, and the agreement scores, and picks one answer in the
usual Reasoning/Answer/Confidence format.  When the aggregator cannot be
parsed (or the ablation asks for it) the decision degrades to a majority
vote with a seeded uniform tie-break, making every run reproducible from
(run seed, question id).
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .agreement import AgreementScores, scores_by_agent
from .answering import (
    AgentAnswer,
    GroupedSolutions,
    ParseFailure,
    normalize_answer,
    parse_agent_output,
    render_grouped,
)
from .gateway import ChatMessage, ChatRequest, ChatResponse, EndpointProfile, ImageAttachment, ModelGateway
from .prompts import PromptLibrary
from .tools import ExpertOutput, render_expert_outputs

REPROMPT_BUDGET = 1

Recorder = Callable[[str, ChatRequest, ChatResponse], None]

METHOD_AGGREGATOR = "aggregator"
METHOD_MAJORITY = "majority_vote"


@dataclass(frozen=True)
class FinalAnswer:
    answer: str
    reasoning: str
    confidence: float
    method: str
    off_menu: bool = False

    def __post_init__(self) -> None:
        if self.method not in (METHOD_AGGREGATOR, METHOD_MAJORITY):
            raise ValueError(f"unknown method {self.method!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def tiebreak_rng(run_seed: int, question_id: str) -> random.Random:
    """Deterministic tie-break source derived from (run seed, question id)."""
    digest = hashlib.sha256(f"{run_seed}:{question_id}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def majority_vote(grouped: GroupedSolutions, rng: random.Random | None = None) -> FinalAnswer:
    """Pick the largest group; ties break uniformly via the supplied rng.

    Tied groups are considered in first-appearance order and the pick is
    ``tied[rng.randrange(len(tied))]``.  Confidence is the supporter share,
    so any strict majority yields confidence above 0.5.
    """
    if not grouped.groups:
        raise ValueError("cannot vote over zero groups")
    top = max(group.supporter_count for group in grouped.groups)
    tied = [group for group in grouped.groups if group.supporter_count == top]
    if len(tied) == 1:
        winner = tied[0]
    else:
        rng = rng or random.Random(0)
        winner = tied[rng.randrange(len(tied))]
    total = grouped.total_agents
    noun = "agent" if winner.supporter_count == 1 else "agents"
    return FinalAnswer(
        answer=winner.canonical_answer,
        reasoning=f"Majority vote: {winner.supporter_count} of {total} {noun} answered '{winner.canonical_answer}'.",
        confidence=winner.supporter_count / total,
        method=METHOD_MAJORITY,
    )


def render_aggregator_prompt(
    grouped_final: GroupedSolutions,
    expert_outputs: Sequence[ExpertOutput],
    scores: AgreementScores | None,
    question: str,
    prompts: PromptLibrary,
    *,
    final_answers: Sequence[AgentAnswer] | None = None,
    initial_grouped: GroupedSolutions | None = None,
) -> str:
    means: Mapping[str, object] | None = None
    if scores is not None and final_answers is not None:
        means = scores_by_agent(scores, final_answers)
    grouped_output = render_grouped(grouped_final, means)
    if initial_grouped is not None:
        grouped_output += "\n\nInitial answers (before discussion):\n\n" + render_grouped(initial_grouped)
    return prompts.render(
        "aggregator",
        question=question,
        grouped_output=grouped_output,
        tool_outputs=render_expert_outputs(expert_outputs),
    )


def aggregate(
    grouped_final: GroupedSolutions,
    expert_outputs: Sequence[ExpertOutput],
    scores: AgreementScores | None,
    aggregator: EndpointProfile,
    question: str,
    *,
    gateway: ModelGateway,
    prompts: PromptLibrary,
    image: ImageAttachment | None = None,
    final_answers: Sequence[AgentAnswer] | None = None,
    initial_grouped: GroupedSolutions | None = None,
    reprompt_budget: int = REPROMPT_BUDGET,
    recorder: Recorder | None = None,
    majority_rng: random.Random | None = None,
    tag: str = "",
    warnings: list[str] | None = None,
) -> FinalAnswer:
    """Ask the aggregator for the final answer, degrading to majority vote.

    One reprompt is allowed on a format violation; after that the majority
    vote takes over and the degradation is noted in ``warnings``.  An answer
    that matches no group under normalization is kept but flagged
    ``off_menu``.
    """
    prompt = render_aggregator_prompt(
        grouped_final,
        expert_outputs,
        scores,
        question,
        prompts,
        final_answers=final_answers,
        initial_grouped=initial_grouped,
    )
    images = (image,) if image is not None else ()
    request = ChatRequest(messages=(ChatMessage("user", prompt, images),))
    for _ in range(reprompt_budget + 1):
        response = gateway.send_chat(aggregator, request, tag=tag)
        if recorder is not None:
            recorder("aggregator", request, response)
        try:
            answer, reasoning, confidence = parse_agent_output(response.text)
        except ParseFailure:
            continue
        menu = set(grouped_final.canonical_answers())
        return FinalAnswer(
            answer=answer,
            reasoning=reasoning,
            confidence=confidence,
            method=METHOD_AGGREGATOR,
            off_menu=normalize_answer(answer) not in menu,
        )
    if warnings is not None:
        warnings.append("aggregator parse failure; fell back to majority vote")
    return majority_vote(grouped_final, majority_rng)
