"""Expert tool registry and plan execution.

Tools come in two flavors.  Model-backed tools are chat endpoints given a
role-focusing prompt and the image; their reply text is the evidence.
Structured tools (grounder, detector) return a detection payload of labeled
scored boxes which a deterministic post-processor renders into natural
language with coarse locations, so the text-only downstream stages can use
it.  Failed tools are recorded, never raised: a debate continues with the
evidence it managed to collect.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .gateway import ChatMessage, ChatRequest, ChatResponse, GatewayError, ImageAttachment, ModelGateway
from .prompts import render as render_template
from .recruitment import DEFAULT_TOOL_ARITIES, INPUT_NONE, INPUT_QUERY_LIST, ToolInvocation, ToolPlan

DEFAULT_TOOL_TIMEOUT_MS = 30_000.0

Recorder = Callable[[str, ChatRequest, ChatResponse], None]


class DuplicateToolName(ValueError):
    """Registering an already-registered tool without ``override=True``."""


class PayloadSchemaMismatch(ValueError):
    """A structured executor returned something other than labeled scored boxes."""


class UnknownTool(KeyError):
    pass


@dataclass(frozen=True)
class BoxDetection:
    """One detection: label, score in [0, 1], normalized (x0, y0, x1, y1) box."""

    label: str
    score: float
    box: tuple[float, float, float, float]


@dataclass(frozen=True)
class ModelToolBackend:
    """Chat endpoint plus a role-focusing prompt template.

    The template may use ``<question>``, ``<disagreement>`` and
    ``<arguments>`` tokens; the image rides along on the user message.
    """

    endpoint_id: str
    prompt_template: str


@dataclass(frozen=True)
class StructuredToolBackend:
    """Endpoint expected to reply with a JSON detection payload."""

    endpoint_id: str


@dataclass(frozen=True)
class ToolDescriptor:
    tool_name: str
    input_kind: str
    capability_sentence: str
    input_hint: str
    backend: ModelToolBackend | StructuredToolBackend | None = None

    def __post_init__(self) -> None:
        if self.input_kind not in (INPUT_NONE, INPUT_QUERY_LIST):
            raise ValueError(f"{self.tool_name}: unknown input_kind {self.input_kind!r}")


@dataclass(frozen=True)
class ExpertOutput:
    tool_name: str
    disagreement_addressed: str
    evidence_text: str
    succeeded: bool
    structured_payload: tuple[BoxDetection, ...] | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        if self.succeeded and not self.evidence_text:
            raise ValueError(f"{self.tool_name}: successful output needs evidence text")


# The built-in expert roster: (name, input hint, capability sentence).
# Arity comes from DEFAULT_TOOL_ARITIES so the validator and registry agree.
_BUILTIN_ROWS: tuple[tuple[str, str, str], ...] = (
    (
        "spatial",
        "list. objects that have confused spatial relations",
        "Has perfect understanding of spatial relations between objects. Use this when agents are unsure about the placement of items in a scene.",
    ),
    (
        "ocr",
        "none",
        "Can correctly read all text in an image. Use this when agents have differing views on what the text is in an image.",
    ),
    (
        "grounder",
        "list. objects you are trying to find",
        "Will find any object if it is an image, otherwise it will return nothing. Use this when agents are not agreeing on what's present in an image.",
    ),
    (
        "detector",
        "none",
        "Will provide a list of objects in the image, their counts, and their bounding boxes. Only use this when agents are differing in their counts of objects in an image.",
    ),
    (
        "captioning",
        "list. objects you want captions for",
        "Can give a detailed description of what's going in the image relevant to the question. Use this when agents might need a better idea of the general scene or descriptions of specific objects.",
    ),
    (
        "attribute",
        "list. objects you want attributes for",
        "Will give information on different features of objects in the image, including color, properties, catgories, and more. Use this when agents are confused about the features of relevant objects and need many surface level features.",
    ),
    (
        "reasoning",
        "list. objects you want reasoning for",
        "Has better world knowledge and advanced reasoning capabilities about what might be going on in an image. Use this when agents are confused or conflicting in their inferences about the scene. This is essentially a meta-reasoning agent that intervenes when models have different conclusions based on the same assumptions.",
    ),
)

BUILTIN_TOOL_NAMES = tuple(name for name, _, _ in _BUILTIN_ROWS)

# Role-focusing prompts for model-backed built-ins.
DEFAULT_MODEL_TOOL_TEMPLATES: dict[str, str] = {
    "spatial": (
        "You are a spatial reasoning expert with perfect understanding of where objects sit relative"
        " to each other. Describe the spatial relations between the requested objects in the image.\n\n"
        "Question under discussion: <question>\nDisagreement to resolve: <disagreement>\nObjects: <arguments>"
    ),
    "ocr": (
        "You are an OCR expert. Read and transcribe all text visible in the image, exactly as written.\n\n"
        "Question under discussion: <question>\nDisagreement to resolve: <disagreement>"
    ),
    "captioning": (
        "You are a captioning expert. Give a detailed description of the scene, focusing on the"
        " requested objects and anything relevant to the question.\n\n"
        "Question under discussion: <question>\nDisagreement to resolve: <disagreement>\nObjects: <arguments>"
    ),
    "attribute": (
        "You are an attribute expert. Report the visual attributes (color, size, material, state,"
        " category) of the requested objects in the image.\n\n"
        "Question under discussion: <question>\nDisagreement to resolve: <disagreement>\nObjects: <arguments>"
    ),
    "reasoning": (
        "You are a reasoning expert with strong world knowledge. Reason carefully about what is going"
        " on in the image with respect to the requested points of confusion, and state your conclusion.\n\n"
        "Question under discussion: <question>\nDisagreement to resolve: <disagreement>\nFocus: <arguments>"
    ),
}

_GENERIC_MODEL_TEMPLATE = (
    "You are the <tool_name> expert. Use your specialty to resolve the stated disagreement.\n\n"
    "Question under discussion: <question>\nDisagreement to resolve: <disagreement>\nFocus: <arguments>"
)


class ToolRegistry:
    """Ordered collection of tool descriptors, keyed by name."""

    def __init__(self, descriptors: Iterable[ToolDescriptor] = ()) -> None:
        self._tools: dict[str, ToolDescriptor] = {}
        for descriptor in descriptors:
            self.register(descriptor)

    def register(self, descriptor: ToolDescriptor, override: bool = False) -> None:
        if descriptor.tool_name in self._tools and not override:
            raise DuplicateToolName(f"tool {descriptor.tool_name!r} already registered")
        self._tools[descriptor.tool_name] = descriptor

    def names(self) -> list[str]:
        return list(self._tools)

    def get(self, tool_name: str) -> ToolDescriptor:
        try:
            return self._tools[tool_name]
        except KeyError:
            raise UnknownTool(tool_name) from None

    def __contains__(self, tool_name: str) -> bool:
        return tool_name in self._tools

    def __len__(self) -> int:
        return len(self._tools)

    def arity_table(self) -> dict[str, str]:
        return {name: descriptor.input_kind for name, descriptor in self._tools.items()}

    def without(self, withheld: Sequence[str]) -> "ToolRegistry":
        """A copy with the withheld tools absent (prompt and validation alike)."""
        dropped = set(withheld)
        return ToolRegistry(
            descriptor for name, descriptor in self._tools.items() if name not in dropped
        )

    def render_capabilities(self) -> str:
        """The expert roster block for the recruitment prompt, one line per tool."""
        return "\n".join(
            f'"{d.tool_name}" (input: {d.input_hint}) - {d.capability_sentence}'
            for d in self._tools.values()
        )

    @classmethod
    def builtin(
        cls,
        backends: Mapping[str, ModelToolBackend | StructuredToolBackend] | None = None,
    ) -> "ToolRegistry":
        """The seven-expert roster, optionally wired to backends by name."""
        backends = dict(backends or {})
        registry = cls()
        for name, hint, sentence in _BUILTIN_ROWS:
            registry.register(
                ToolDescriptor(
                    tool_name=name,
                    input_kind=DEFAULT_TOOL_ARITIES[name],
                    capability_sentence=sentence,
                    input_hint=hint,
                    backend=backends.get(name),
                )
            )
        return registry


def default_model_template(tool_name: str) -> str:
    template = DEFAULT_MODEL_TOOL_TEMPLATES.get(tool_name, _GENERIC_MODEL_TEMPLATE)
    return template.replace("<tool_name>", tool_name)


def parse_structured_payload(text: str) -> tuple[BoxDetection, ...]:
    """Validate a structured executor reply into detections.

    The wire format is a JSON list of ``{label, score, box}`` objects with
    score in [0, 1] and a normalized (x0, y0, x1, y1) box; anything else
    raises :class:`PayloadSchemaMismatch`.
    """
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PayloadSchemaMismatch(f"payload is not JSON: {exc}") from exc
    return validate_structured_payload(payload)


def validate_structured_payload(payload: object) -> tuple[BoxDetection, ...]:
    if not isinstance(payload, list):
        raise PayloadSchemaMismatch(f"payload is {type(payload).__name__}, not a list")
    detections = []
    for index, item in enumerate(payload):
        if not isinstance(item, dict):
            raise PayloadSchemaMismatch(f"entry {index} is not an object")
        label = item.get("label")
        score = item.get("score")
        box = item.get("box")
        if not isinstance(label, str) or not label:
            raise PayloadSchemaMismatch(f"entry {index}: label must be a non-empty string")
        if not isinstance(score, (int, float)) or isinstance(score, bool) or not 0.0 <= score <= 1.0:
            raise PayloadSchemaMismatch(f"entry {index}: score must be a number in [0, 1]")
        if (
            not isinstance(box, (list, tuple))
            or len(box) != 4
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in box)
            or not all(0.0 <= v <= 1.0 for v in box)
        ):
            raise PayloadSchemaMismatch(f"entry {index}: box must be four normalized coordinates")
        detections.append(BoxDetection(label=label, score=float(score), box=tuple(float(v) for v in box)))
    return tuple(detections)


def coarse_location(box: tuple[float, float, float, float]) -> str:
    """Thirds rule over the box center: (top|middle|bottom) (left|center|right)."""
    x0, y0, x1, y1 = box
    cx = (x0 + x1) / 2.0
    cy = (y0 + y1) / 2.0
    vertical = "top" if cy < 1 / 3 else ("middle" if cy < 2 / 3 else "bottom")
    horizontal = "left" if cx < 1 / 3 else ("center" if cx < 2 / 3 else "right")
    return f"{vertical} {horizontal}"


def _describe(count: int, name: str, matches: Sequence[BoxDetection], quote: bool) -> str:
    shown = f"'{name}'" if quote else f"{name}{'' if count == 1 else 's'}"
    confidences = ", ".join(f"{d.score:.2f}" for d in matches)
    locations = ", ".join(coarse_location(d.box) for d in matches)
    prefix = f"Found {count} " if quote else f"{count} "
    return f"{prefix}{shown} (confidence {confidences}) in the {locations}"


def postprocess_structured(
    tool_name: str,
    payload: Sequence[BoxDetection],
    queried: Sequence[str] | None = None,
) -> str:
    """Render a detection payload into deterministic evidence text.

    With ``queried`` labels (grounder style) each query gets a clause, with
    an explicit absence statement when nothing matched.  Without queries
    (detector style) every detected label is counted.  Pure function of its
    inputs; no model calls.
    """
    clauses: list[str] = []
    if queried is not None:
        for query in queried:
            wanted = " ".join(query.lower().split())
            matches = [d for d in payload if " ".join(d.label.lower().split()) == wanted]
            if not matches:
                clauses.append(f"no '{query}' found")
            else:
                clauses.append(_describe(len(matches), query, matches, quote=True))
        if not clauses:
            return "No objects were queried and none were reported."
    else:
        if not payload:
            return "No objects detected."
        order: list[str] = []
        by_label: dict[str, list[BoxDetection]] = {}
        for detection in payload:
            if detection.label not in by_label:
                by_label[detection.label] = []
                order.append(detection.label)
            by_label[detection.label].append(detection)
        clauses = [
            _describe(len(by_label[label]), label, by_label[label], quote=False)
            for label in order
        ]
        clauses[0] = "Detected " + clauses[0]
    text = "; ".join(clauses)
    return text[0].upper() + text[1:] + "."


def structured_request_text(invocation: ToolInvocation, question: str) -> str:
    """Task body sent to a structured executor endpoint."""
    return json.dumps(
        {"tool": invocation.tool_name, "queries": list(invocation.arguments), "question": question},
        sort_keys=True,
    )


def execute_plan(
    plan: ToolPlan,
    image: ImageAttachment | None,
    question: str,
    *,
    registry: ToolRegistry,
    gateway: ModelGateway,
    recorder: Recorder | None = None,
    tag: str = "",
) -> list[ExpertOutput]:
    """Run every invocation in plan order, one output per invocation.

    Failures (timeout, exhausted retries, schema mismatch, missing backend)
    become ``succeeded=False`` outputs rather than exceptions, so they can
    be excluded from the agreement denominator downstream.
    """
    outputs: list[ExpertOutput] = []
    for invocation in plan.invocations:
        outputs.append(
            _execute_one(invocation, image, question, registry=registry, gateway=gateway, recorder=recorder, tag=tag)
        )
    return outputs


def _execute_one(
    invocation: ToolInvocation,
    image: ImageAttachment | None,
    question: str,
    *,
    registry: ToolRegistry,
    gateway: ModelGateway,
    recorder: Recorder | None,
    tag: str,
) -> ExpertOutput:
    def failed(error: str) -> ExpertOutput:
        return ExpertOutput(
            tool_name=invocation.tool_name,
            disagreement_addressed=invocation.disagreement,
            evidence_text="",
            succeeded=False,
            error=error,
        )

    try:
        descriptor = registry.get(invocation.tool_name)
    except UnknownTool:
        return failed("tool not registered")
    backend = descriptor.backend
    if backend is None:
        return failed("no backend configured")
    images = (image,) if image is not None else ()
    try:
        if isinstance(backend, ModelToolBackend):
            prompt = render_template(
                backend.prompt_template,
                {
                    "question": question,
                    "disagreement": invocation.disagreement,
                    "arguments": ", ".join(invocation.arguments),
                },
            )
            request = ChatRequest(messages=(ChatMessage("user", prompt, images),))
            response = gateway.send_chat(backend.endpoint_id, request, tag=tag)
            if recorder is not None:
                recorder(invocation.tool_name, request, response)
            evidence = response.text.strip()
            if not evidence:
                return failed("empty evidence text")
            return ExpertOutput(
                tool_name=invocation.tool_name,
                disagreement_addressed=invocation.disagreement,
                evidence_text=evidence,
                succeeded=True,
            )
        request = ChatRequest(
            messages=(ChatMessage("user", structured_request_text(invocation, question), images),)
        )
        response = gateway.send_chat(backend.endpoint_id, request, tag=tag)
        if recorder is not None:
            recorder(invocation.tool_name, request, response)
        payload = parse_structured_payload(response.text)
        queried = list(invocation.arguments) if descriptor.input_kind == INPUT_QUERY_LIST else None
        evidence = postprocess_structured(invocation.tool_name, payload, queried)
        return ExpertOutput(
            tool_name=invocation.tool_name,
            disagreement_addressed=invocation.disagreement,
            evidence_text=evidence,
            succeeded=True,
            structured_payload=payload,
        )
    except (GatewayError, PayloadSchemaMismatch) as exc:
        return failed(str(exc))


def render_expert_outputs(outputs: Sequence[ExpertOutput]) -> str:
    """Evidence block for discussion and aggregator prompts (successes only)."""
    lines = [
        f"Expert ({output.tool_name}): {output.evidence_text}"
        for output in outputs
        if output.succeeded
    ]
    if not lines:
        return "No expert outputs were provided for this question."
    return "\n\n".join(lines)
