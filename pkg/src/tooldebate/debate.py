"""The five-stage debate pipeline.

One run takes a question (and optionally an image) through: initial answers
from every agent, disagreement-driven expert recruitment, tool-grounded
agreement scoring, a discussion round where agents may change their minds,
and final aggregation.  Multi-round configs repeat recruitment, scoring,
and discussion per round; unanimity short-circuits the remaining rounds
straight to aggregation unless disabled.  Every prompt, reply, and tool
call lands in an ordered transcript that is byte-replayable against
scripted mock endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace
from typing import Callable, Sequence

from .aggregation import FinalAnswer, aggregate, majority_vote, tiebreak_rng
from .agreement import (
    AgreementScores,
    EmptyExpertSet,
    score_against_outputs,
    scores_by_agent,
)
from .answering import (
    AgentAnswer,
    GroupedSolutions,
    generate_initial_answers,
    group_solutions,
    query_agent,
    render_grouped,
    render_initial_prompt,
    run_agent_stage,
    substitute_empty_answer,
)
from .config import RunConfig
from .gateway import (
    ChatMessage,
    ChatRequest,
    EndpointProfile,
    GatewayError,
    ImageAttachment,
    ModelGateway,
    TokenRecord,
)
from .prompts import PromptLibrary
from .recruitment import ToolPlan, recruit_tools
from .tools import ExpertOutput, ToolRegistry, execute_plan, render_expert_outputs
from .transcript import (
    STAGE_AGGREGATE,
    STAGE_DISCUSS,
    STAGE_INITIAL,
    STAGE_RECRUIT,
    STAGE_SCORE,
    STAGE_TOOL,
    chat_event,
    fraction_str,
)


class AbortedRun(RuntimeError):
    """A run died on an endpoint failure under the abort policy."""

    def __init__(self, question_id: str, stage: str, cause: Exception):
        super().__init__(f"{question_id}: aborted during {stage}: {cause}")
        self.question_id = question_id
        self.stage = stage
        self.cause = cause


@dataclass
class RoundState:
    """Snapshot after one round.

    Round 0 is the initial-generation state: no expert outputs, no scores.
    For discussion rounds, ``scores`` holds the agreement means rendered
    into that round's discussion prompt, except the last executed round,
    where it is replaced by the post-discussion recalculation used for
    aggregation.  Carried-forward rounds created by the unanimity
    short-circuit are flagged ``skipped``.
    """

    round_index: int
    per_agent: list[AgentAnswer]
    grouped: GroupedSolutions
    expert_outputs: list[ExpertOutput]
    scores: AgreementScores | None
    skipped: bool = False


@dataclass
class PipelineResult:
    question_id: str
    rounds: list[RoundState]
    final: FinalAnswer
    final_answer: str
    final_confidence: float
    token_ledger: list[TokenRecord]
    token_totals: dict[str, int]
    tool_calls: list[ToolPlan]
    transcript: list[dict]


def discussion_request(
    question: str,
    image: ImageAttachment | None,
    prior_raw: str,
    discussion_prompt: str,
    prompts: PromptLibrary,
) -> ChatRequest:
    """Discussion is a continuation: the agent sees its original prompt and
    its own previous reply before the discussion instructions."""
    images = (image,) if image is not None else ()
    return ChatRequest(
        messages=(
            ChatMessage("user", render_initial_prompt(question, prompts), images),
            ChatMessage("assistant", prior_raw),
            ChatMessage("user", discussion_prompt),
        )
    )


def run_discussion_round(
    state: RoundState,
    agents: Sequence[EndpointProfile],
    question: str,
    image: ImageAttachment | None,
    *,
    round_index: int,
    evidence: Sequence[ExpertOutput],
    scores: AgreementScores | None,
    gateway: ModelGateway,
    prompts: PromptLibrary,
    recorder=None,
    tag: str = "",
    parallel: bool = False,
    failure_policy: str = "abort",
) -> list[AgentAnswer]:
    """One discussion pass: every agent reconsiders given groups, evidence,
    and (when present) agreement scores; replies parsed like initial answers."""
    means = scores_by_agent(scores, state.per_agent) if scores is not None else None
    prompt = prompts.render(
        "discussion",
        grouped_solutions=render_grouped(state.grouped, means),
        tool_outputs=render_expert_outputs(evidence),
    )

    def one(index: int, profile: EndpointProfile, record) -> AgentAnswer:
        agent_id = f"agent-{index + 1}"
        request = discussion_request(
            question, image, state.per_agent[index].raw_text, prompt, prompts
        )
        try:
            return query_agent(
                profile, request, agent_id, gateway=gateway, recorder=record, tag=tag
            )
        except Exception:
            if failure_policy == "substitute_empty":
                return substitute_empty_answer(agent_id)
            raise

    return run_agent_stage(agents, one, recorder=recorder, parallel=parallel)


def _invocation_key(invocation) -> tuple:
    return (invocation.tool_name, tuple(invocation.arguments))


def run_pipeline(
    question: str,
    image: ImageAttachment | None,
    config: RunConfig,
    *,
    question_id: str = "q0",
    gateway: ModelGateway | None = None,
    registry: ToolRegistry | None = None,
    prompts: PromptLibrary | None = None,
) -> PipelineResult:
    """Run the full debate for one question.

    With every endpoint mocked, the result is a pure function of
    (question, image, config, scripts): transcripts carry no wall-clock
    data and stages execute in a fixed order.  Raises :class:`AbortedRun`
    on endpoint failure under the abort policy.
    """
    gateway = gateway if gateway is not None else config.build_gateway()
    registry = registry if registry is not None else config.build_registry()
    prompts = prompts if prompts is not None else config.build_prompts()
    tag = question_id
    events: list[dict] = []

    answerers = config.answerer_profiles()
    recruiter = config.profile(config.recruiter_id)
    scorer = config.profile(config.scorer_id)
    aggregator = config.profile(config.aggregator_id)

    def recorder_for(stage: str, round_index: int, resolve: Callable[[str], EndpointProfile]):
        def record(actor: str, request, response) -> None:
            profile = resolve(actor)
            events.append(
                chat_event(stage, round_index, profile.endpoint_id, profile.model_name, actor, request, response)
            )
        return record

    def agent_profile(actor: str) -> EndpointProfile:
        return answerers[int(actor.rsplit("-", 1)[1]) - 1]

    def tool_profile(actor: str) -> EndpointProfile:
        backend = registry.get(actor).backend
        return gateway.profile(backend.endpoint_id)

    ledger_before = len(gateway.ledger.records(tag))
    current_stage = STAGE_INITIAL

    try:
        # Stage 1: independent initial answers.
        answers = generate_initial_answers(
            question,
            image,
            answerers,
            gateway=gateway,
            prompts=prompts,
            failure_policy=config.on_agent_failure,
            recorder=recorder_for(STAGE_INITIAL, 0, agent_profile),
            tag=tag,
            parallel=config.parallel_agents,
        )
        grouped = group_solutions(answers, stage="initial")
        rounds = [RoundState(0, answers, grouped, [], None)]

        evidence: list[ExpertOutput] = []
        seen_invocations: set[tuple] = set()
        tool_calls: list[ToolPlan] = []
        short_circuited = False

        for round_index in range(1, config.rounds + 1):
            if grouped.unanimous and not config.disable_unanimity_short_circuit:
                events.append(
                    {"kind": "short_circuit", "stage": STAGE_DISCUSS, "round": round_index}
                )
                short_circuited = True
                break

            # Stage 2: recruit experts and collect evidence.
            if not config.no_tools:
                current_stage = STAGE_RECRUIT
                report = recruit_tools(
                    grouped,
                    question,
                    recruiter,
                    gateway=gateway,
                    tool_descriptions=registry.render_capabilities(),
                    arities=registry.arity_table(),
                    prompts=prompts,
                    recorder=recorder_for(STAGE_RECRUIT, round_index, lambda _: recruiter),
                    tag=tag,
                )
                plan = report.plan
                if plan is not None:
                    tool_calls.append(plan)
                    fresh = [
                        invocation
                        for invocation in plan.invocations
                        if _invocation_key(invocation) not in seen_invocations
                    ]
                    duplicates = [
                        invocation.tool_name
                        for invocation in plan.invocations
                        if _invocation_key(invocation) in seen_invocations
                    ]
                    events.append(
                        {
                            "kind": "plan",
                            "stage": STAGE_RECRUIT,
                            "round": round_index,
                            "unanimous": report.unanimous,
                            "group_count": report.group_count,
                            "parse_failed": report.parse_failed,
                            "invocations": [
                                {
                                    "tool_name": invocation.tool_name,
                                    "disagreement": invocation.disagreement,
                                    "justification": invocation.justification,
                                    "arguments": list(invocation.arguments),
                                }
                                for invocation in plan.invocations
                            ],
                            "warnings": list(plan.warnings),
                            "duplicates_skipped": duplicates,
                        }
                    )
                    if fresh:
                        current_stage = STAGE_TOOL
                        outputs = execute_plan(
                            ToolPlan(invocations=fresh),
                            image,
                            question,
                            registry=registry,
                            gateway=gateway,
                            recorder=recorder_for(STAGE_TOOL, round_index, tool_profile),
                            tag=tag,
                        )
                        for invocation, output in zip(fresh, outputs):
                            seen_invocations.add(_invocation_key(invocation))
                            events.append(
                                {
                                    "kind": "tool",
                                    "stage": STAGE_TOOL,
                                    "round": round_index,
                                    "tool_name": output.tool_name,
                                    "arguments": list(invocation.arguments),
                                    "disagreement": output.disagreement_addressed,
                                    "succeeded": output.succeeded,
                                    "evidence_text": output.evidence_text,
                                    "error": output.error,
                                }
                            )
                        evidence.extend(outputs)

            # Stage 3: score current answers against all evidence so far.
            round_scores: AgreementScores | None = None
            if not config.no_tools and not config.no_scores:
                current_stage = STAGE_SCORE
                round_scores = _score_stage(
                    answers, evidence, scorer, round_index, "discussion",
                    gateway=gateway, prompts=prompts, events=events, tag=tag,
                    recorder=recorder_for(STAGE_SCORE, round_index, lambda _: scorer),
                )

            # Stage 4: discussion; agents may change their answers.
            current_stage = STAGE_DISCUSS
            answers = run_discussion_round(
                rounds[-1],
                answerers,
                question,
                image,
                round_index=round_index,
                evidence=evidence,
                scores=round_scores,
                gateway=gateway,
                prompts=prompts,
                recorder=recorder_for(STAGE_DISCUSS, round_index, agent_profile),
                tag=tag,
                parallel=config.parallel_agents,
                failure_policy=config.on_agent_failure,
            )
            grouped = group_solutions(answers, stage="initial")
            rounds.append(RoundState(round_index, answers, grouped, list(evidence), round_scores))

        # Pad skipped rounds so the round count always equals config.rounds.
        while len(rounds) - 1 < config.rounds:
            rounds.append(
                RoundState(
                    round_index=len(rounds),
                    per_agent=rounds[-1].per_agent,
                    grouped=rounds[-1].grouped,
                    expert_outputs=rounds[-1].expert_outputs,
                    scores=rounds[-1].scores,
                    skipped=True,
                )
            )

        last_live = next(state for state in reversed(rounds) if not state.skipped)
        final_grouped = dc_replace(last_live.grouped, stage="final")
        last_live.grouped = final_grouped
        final_answers = last_live.per_agent

        # Recalculate agreement for the final answers against existing
        # evidence only; no new tool calls happen past the last discussion.
        final_scores: AgreementScores | None = None
        if (
            last_live.round_index > 0
            and not config.no_tools
            and not config.no_scores
            and any(output.succeeded for output in evidence)
        ):
            current_stage = STAGE_SCORE
            final_scores = _score_stage(
                final_answers, evidence, scorer, last_live.round_index, "final",
                gateway=gateway, prompts=prompts, events=events, tag=tag,
                recorder=recorder_for(STAGE_SCORE, last_live.round_index, lambda _: scorer),
            )
            last_live.scores = final_scores

        # Stage 5: aggregation.
        current_stage = STAGE_AGGREGATE
        rng = tiebreak_rng(config.run_seed, question_id)
        warnings: list[str] = []
        if config.majority_vote:
            final = majority_vote(final_grouped, rng)
        else:
            final = aggregate(
                final_grouped,
                [output for output in evidence if output.succeeded],
                final_scores,
                aggregator,
                question,
                gateway=gateway,
                prompts=prompts,
                image=image,
                final_answers=final_answers,
                initial_grouped=rounds[0].grouped
                if config.show_initial_answers_to_aggregator
                else None,
                recorder=recorder_for(STAGE_AGGREGATE, last_live.round_index, lambda _: aggregator),
                majority_rng=rng,
                tag=tag,
                warnings=warnings,
            )
        events.append(
            {
                "kind": "final",
                "stage": STAGE_AGGREGATE,
                "round": last_live.round_index,
                "answer": final.answer,
                "reasoning": final.reasoning,
                "confidence": final.confidence,
                "method": final.method,
                "off_menu": final.off_menu,
                "short_circuited": short_circuited,
                "warnings": warnings,
            }
        )
    except GatewayError as exc:
        raise AbortedRun(question_id, current_stage, exc) from exc

    records = gateway.ledger.records(tag)[ledger_before:]
    totals = {
        "prompt_tokens": sum(r.prompt_tokens for r in records),
        "completion_tokens": sum(r.completion_tokens for r in records),
        "calls": len(records),
    }
    return PipelineResult(
        question_id=question_id,
        rounds=rounds,
        final=final,
        final_answer=final.answer,
        final_confidence=final.confidence,
        token_ledger=records,
        token_totals=totals,
        tool_calls=tool_calls,
        transcript=events,
    )


def _score_stage(
    answers: Sequence[AgentAnswer],
    evidence: Sequence[ExpertOutput],
    scorer: EndpointProfile,
    round_index: int,
    phase: str,
    *,
    gateway: ModelGateway,
    prompts: PromptLibrary,
    events: list[dict],
    tag: str,
    recorder,
) -> AgreementScores | None:
    warnings: list[str] = []
    try:
        scores = score_against_outputs(
            answers,
            evidence,
            scorer,
            gateway=gateway,
            prompts=prompts,
            recorder=recorder,
            tag=tag,
            warnings=warnings,
        )
    except EmptyExpertSet:
        return None
    events.append(
        {
            "kind": "scores",
            "stage": STAGE_SCORE,
            "round": round_index,
            "phase": phase,
            "matrix": [list(row) for row in scores.matrix],
            "per_agent_mean": [fraction_str(mean) for mean in scores.per_agent_mean],
            "denominator": scores.denominator,
            "warnings": warnings,
        }
    )
    return scores


