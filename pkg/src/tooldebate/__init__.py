"""Disagreement-aware multi-agent debate for visual question answering.

Agents answer independently, a recruiter turns their disagreement into a
plan of expert-tool invocations, an agreement scorer rates each answer
against the collected evidence, the agents discuss, and an aggregator (or
majority vote) produces the final answer.  Everything runs over pluggable
chat-model endpoints, including fully scripted mock endpoints for offline
deterministic tests.
"""

from .agreement import (
    AgreementScores,
    EmptyExpertSet,
    aggregate_scores,
    parse_alignment,
    score_against_outputs,
    scores_by_agent,
)
from .aggregation import (
    METHOD_AGGREGATOR,
    METHOD_MAJORITY,
    FinalAnswer,
    aggregate,
    majority_vote,
    tiebreak_rng,
)
from .analysis import (
    CalibrationRecord,
    OverlapMetrics,
    ToolDistribution,
    compute_ece,
    compute_overlap,
    disagreement_rate,
    lcs_length,
    tool_distribution,
    transcript_round_overlap,
)
from .answering import (
    AgentAnswer,
    GroupedSolutions,
    ParseFailure,
    SolutionGroup,
    generate_initial_answers,
    group_solutions,
    normalize_answer,
    parse_agent_output,
    render_agent_reply,
    render_grouped,
)
from .config import ConfigError, RunConfig, ToolWiring, config_from_dict, load_config
from .debate import AbortedRun, PipelineResult, RoundState, run_pipeline
from .evaluation import (
    EvalReport,
    EvalRow,
    Example,
    RecordValidationError,
    load_dataset,
    match_choice,
    run_eval,
    score_direct_answer,
    score_multiple_choice,
)
from .gateway import (
    ChatRequest,
    ChatResponse,
    EndpointProfile,
    ExhaustedRetries,
    GatewayError,
    ImageAttachment,
    MalformedWireResponse,
    MockFailure,
    ModelGateway,
    NotAMockEndpoint,
    RequestRejected,
    ScriptExhausted,
    Timeout,
    TokenLedger,
    TransientBackendError,
)
from .prompts import PromptLibrary
from .recruitment import (
    DisagreementReport,
    MissingExpertsKey,
    NotAStructuredDocument,
    RecruiterParseFailure,
    ToolInvocation,
    ToolPlan,
    extract_json_object,
    recruit_tools,
    validate_tool_plan,
)
from .tools import (
    BUILTIN_TOOL_NAMES,
    ExpertOutput,
    ModelToolBackend,
    PayloadSchemaMismatch,
    StructuredToolBackend,
    ToolRegistry,
    execute_plan,
    render_expert_outputs,
)
from .transcript import load_transcript, replay_scripts, save_transcript, transcript_text

__version__ = "0.1.0"

__all__ = [
    "AbortedRun",
    "AgentAnswer",
    "AgreementScores",
    "BUILTIN_TOOL_NAMES",
    "CalibrationRecord",
    "ChatRequest",
    "ChatResponse",
    "ConfigError",
    "DisagreementReport",
    "EmptyExpertSet",
    "EndpointProfile",
    "EvalReport",
    "EvalRow",
    "Example",
    "ExhaustedRetries",
    "ExpertOutput",
    "FinalAnswer",
    "GatewayError",
    "GroupedSolutions",
    "ImageAttachment",
    "MalformedWireResponse",
    "METHOD_AGGREGATOR",
    "METHOD_MAJORITY",
    "MissingExpertsKey",
    "MockFailure",
    "ModelGateway",
    "ModelToolBackend",
    "NotAMockEndpoint",
    "NotAStructuredDocument",
    "OverlapMetrics",
    "ParseFailure",
    "PayloadSchemaMismatch",
    "PipelineResult",
    "PromptLibrary",
    "RecordValidationError",
    "RecruiterParseFailure",
    "RequestRejected",
    "RoundState",
    "RunConfig",
    "ScriptExhausted",
    "SolutionGroup",
    "StructuredToolBackend",
    "Timeout",
    "TokenLedger",
    "ToolDistribution",
    "ToolInvocation",
    "ToolPlan",
    "ToolRegistry",
    "ToolWiring",
    "TransientBackendError",
    "aggregate",
    "aggregate_scores",
    "compute_ece",
    "compute_overlap",
    "config_from_dict",
    "disagreement_rate",
    "execute_plan",
    "extract_json_object",
    "generate_initial_answers",
    "group_solutions",
    "lcs_length",
    "load_config",
    "load_dataset",
    "load_transcript",
    "majority_vote",
    "match_choice",
    "normalize_answer",
    "parse_agent_output",
    "parse_alignment",
    "recruit_tools",
    "render_agent_reply",
    "render_expert_outputs",
    "render_grouped",
    "replay_scripts",
    "run_eval",
    "run_pipeline",
    "save_transcript",
    "score_against_outputs",
    "score_direct_answer",
    "score_multiple_choice",
    "scores_by_agent",
    "tiebreak_rng",
    "tool_distribution",
    "transcript_round_overlap",
    "transcript_text",
    "validate_tool_plan",
]
