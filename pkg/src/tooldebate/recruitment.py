"""Disagreement analysis and expert recruitment.

When initial answers split into more than one group, a recruiter model reads
the grouped solutions and names the experts that could settle the dispute,
as a JSON plan.  Model-produced JSON is hostile input: the validator here
accepts any string, extracts the first balanced object, and repairs what it
can (unknown tools dropped, arities enforced, duplicates merged) rather
than crashing the pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .answering import GroupedSolutions, render_grouped, render_initial_prompt
from .gateway import ChatRequest, ChatResponse, EndpointProfile, ModelGateway
from .prompts import PromptLibrary

INPUT_NONE = "none"
INPUT_QUERY_LIST = "query_list"

# Arity table for the seven built-in experts; the registry mirrors this.
DEFAULT_TOOL_ARITIES: dict[str, str] = {
    "spatial": INPUT_QUERY_LIST,
    "ocr": INPUT_NONE,
    "grounder": INPUT_QUERY_LIST,
    "detector": INPUT_NONE,
    "captioning": INPUT_QUERY_LIST,
    "attribute": INPUT_QUERY_LIST,
    "reasoning": INPUT_QUERY_LIST,
}

REPROMPT_BUDGET = 1

Recorder = Callable[[str, ChatRequest, ChatResponse], None]


class NotAStructuredDocument(ValueError):
    """No balanced JSON object could be pulled out of the reply."""


class MissingExpertsKey(ValueError):
    """The document parsed but has no usable ``experts`` list."""


class RecruiterParseFailure(RuntimeError):
    """The recruiter never produced a valid plan within the reprompt budget."""


@dataclass(frozen=True)
class ToolInvocation:
    tool_name: str
    disagreement: str
    justification: str
    arguments: tuple[str, ...]


@dataclass
class ToolPlan:
    invocations: list[ToolInvocation] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.invocations)

    def tool_names(self) -> list[str]:
        return [invocation.tool_name for invocation in self.invocations]


@dataclass
class DisagreementReport:
    unanimous: bool
    group_count: int
    plan: ToolPlan | None
    parse_failed: bool = False


def extract_json_object(text: str) -> str:
    """Return the first balanced top-level ``{...}`` in ``text``.

    Tolerates surrounding prose and code fences by construction: everything
    outside the braces is ignored.  String literals and escapes inside the
    object are honored when counting braces.
    """
    start = text.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for position in range(start, len(text)):
            char = text[position]
            if in_string:
                if escaped:
                    escaped = False
                elif char == "\\":
                    escaped = True
                elif char == '"':
                    in_string = False
            elif char == '"':
                in_string = True
            elif char == "{":
                depth += 1
            elif char == "}":
                depth -= 1
                if depth == 0:
                    return text[start : position + 1]
        start = text.find("{", start + 1)
    raise NotAStructuredDocument("no balanced JSON object in reply")


def _coerce_text(value: object) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return str(value)
    return ""


def validate_tool_plan(
    raw_document: str,
    arities: Mapping[str, str] | None = None,
) -> ToolPlan:
    """Parse and repair a recruiter reply into an executable plan.

    Never raises on arbitrary input beyond the two declared errors:
    :class:`NotAStructuredDocument` when no JSON object can be extracted or
    parsed, and :class:`MissingExpertsKey` when the object lacks an
    ``experts`` list.  Unknown tools are dropped with a warning, duplicate
    experts merge by concatenating arguments, and arity violations are
    repaired in place (arity-none tools lose stray arguments, arity-list
    tools get a possibly-empty string list).
    """
    if arities is None:
        arities = DEFAULT_TOOL_ARITIES
    fragment = extract_json_object(raw_document)
    try:
        document = json.loads(fragment)
    except json.JSONDecodeError as exc:
        raise NotAStructuredDocument(f"extracted object is not valid JSON: {exc}") from exc
    experts = document.get("experts")
    if not isinstance(experts, list):
        raise MissingExpertsKey("document has no experts list")
    inputs = document.get("inputs")
    if not isinstance(inputs, dict):
        inputs = {}

    warnings: list[str] = []
    order: list[str] = []
    merged: dict[str, dict] = {}
    for raw_name in experts:
        if not isinstance(raw_name, str):
            warnings.append(f"dropped non-string expert entry {raw_name!r}")
            continue
        name = raw_name.strip().lower()
        if name not in arities:
            warnings.append(f"dropped unknown tool {raw_name!r}")
            continue
        entry = inputs.get(raw_name)
        if not isinstance(entry, dict):
            entry = inputs.get(name)
        if not isinstance(entry, dict):
            entry = {}
        arguments = _repair_arguments(name, entry.get("arguments"), arities[name], warnings)
        if name in merged:
            warnings.append(f"merged duplicate expert {name!r}")
            merged[name]["arguments"] += arguments
            continue
        order.append(name)
        merged[name] = {
            "disagreement": _coerce_text(entry.get("disagreement")),
            "justification": _coerce_text(entry.get("justification")),
            "arguments": arguments,
        }
    invocations = [
        ToolInvocation(
            tool_name=name,
            disagreement=merged[name]["disagreement"],
            justification=merged[name]["justification"],
            arguments=tuple(merged[name]["arguments"]),
        )
        for name in order
    ]
    return ToolPlan(invocations=invocations, warnings=warnings)


def _repair_arguments(
    name: str,
    raw: object,
    arity: str,
    warnings: list[str],
) -> list[str]:
    if arity == INPUT_NONE:
        if isinstance(raw, list) and raw:
            warnings.append(f"discarded arguments for arity-none tool {name!r}")
        return []
    if raw is None:
        return []
    if isinstance(raw, str):
        warnings.append(f"wrapped bare string argument for {name!r}")
        return [raw]
    if not isinstance(raw, list):
        warnings.append(f"discarded non-list arguments for {name!r}")
        return []
    arguments: list[str] = []
    for item in raw:
        if isinstance(item, str):
            arguments.append(item)
        elif isinstance(item, (int, float)) and not isinstance(item, bool):
            arguments.append(str(item))
        else:
            warnings.append(f"dropped non-string argument {item!r} for {name!r}")
    return arguments


def render_recruitment_prompt(
    grouped: GroupedSolutions,
    question: str,
    tool_descriptions: str,
    prompts: PromptLibrary,
) -> str:
    return prompts.render(
        "recruitment",
        initial_prompt=render_initial_prompt(question, prompts),
        grouped_solutions=render_grouped(grouped),
        tool_descriptions=tool_descriptions,
        question=question,
    )


def recruit_tools(
    grouped: GroupedSolutions,
    question: str,
    recruiter: EndpointProfile,
    *,
    gateway: ModelGateway,
    tool_descriptions: str,
    arities: Mapping[str, str],
    prompts: PromptLibrary,
    reprompt_budget: int = REPROMPT_BUDGET,
    recorder: Recorder | None = None,
    tag: str = "",
    on_parse_failure: str = "empty_plan",
) -> DisagreementReport:
    """Ask the recruiter for a tool plan; fast-path past it when unanimous.

    A unanimous grouping issues zero recruiter calls and carries no plan.
    After ``reprompt_budget`` extra attempts at valid JSON the report comes
    back with an empty plan flagged ``parse_failed`` (or raises
    :class:`RecruiterParseFailure` when ``on_parse_failure="raise"``).
    The recruiter sees text only; no image payload is attached.
    """
    if grouped.unanimous:
        return DisagreementReport(unanimous=True, group_count=1, plan=None)
    prompt = render_recruitment_prompt(grouped, question, tool_descriptions, prompts)
    request = ChatRequest.user(prompt)
    group_count = len(grouped.groups)
    last_error: Exception | None = None
    for _ in range(reprompt_budget + 1):
        response = gateway.send_chat(recruiter, request, tag=tag)
        if recorder is not None:
            recorder("recruiter", request, response)
        try:
            plan = validate_tool_plan(response.text, arities)
        except (NotAStructuredDocument, MissingExpertsKey) as exc:
            last_error = exc
            continue
        return DisagreementReport(unanimous=False, group_count=group_count, plan=plan)
    if on_parse_failure == "raise":
        raise RecruiterParseFailure(str(last_error))
    empty = ToolPlan(warnings=[f"recruiter parse failure after {reprompt_budget + 1} attempts: {last_error}"])
    return DisagreementReport(unanimous=False, group_count=group_count, plan=empty, parse_failed=True)
