"""Shared builders for the test suite: mock endpoints, configs, canned replies."""

from __future__ import annotations

import json

from tooldebate.config import RunConfig, ToolWiring
from tooldebate.gateway import EndpointProfile, ModelGateway


def mock_profile(endpoint_id: str, role: str = "answerer", **kwargs) -> EndpointProfile:
    defaults = dict(
        endpoint_id=endpoint_id,
        base_url="mock://test",
        model_name=f"{endpoint_id}-model",
        role_hint=role,
        max_retries=2,
    )
    defaults.update(kwargs)
    return EndpointProfile(**defaults)


def make_gateway(*profiles: EndpointProfile, **kwargs) -> ModelGateway:
    kwargs.setdefault("sleep", lambda seconds: None)
    import random

    kwargs.setdefault("jitter_rng", random.Random(0))
    return ModelGateway(profiles, **kwargs)


STANDARD_ENDPOINTS = (
    mock_profile("a1"),
    mock_profile("a2"),
    mock_profile("a3"),
    mock_profile("recruiter", role="recruiter"),
    mock_profile("scorer", role="scorer", temperature=0.1),
    mock_profile("aggregator", role="aggregator"),
    mock_profile("tool-ocr", role="tool"),
    mock_profile("tool-grounder", role="tool"),
    mock_profile("tool-spatial", role="tool"),
    mock_profile("tool-detector", role="tool"),
)

STANDARD_TOOLS = (
    ToolWiring(name="ocr", kind="model", endpoint_id="tool-ocr"),
    ToolWiring(name="grounder", kind="structured", endpoint_id="tool-grounder"),
    ToolWiring(name="spatial", kind="model", endpoint_id="tool-spatial"),
    ToolWiring(name="detector", kind="structured", endpoint_id="tool-detector"),
)


def standard_config(**overrides) -> RunConfig:
    """Three answerers, dedicated role endpoints, four wired tools, all mock."""
    fields = dict(
        endpoints=STANDARD_ENDPOINTS,
        answerer_ids=("a1", "a2", "a3"),
        recruiter_id="recruiter",
        scorer_id="scorer",
        aggregator_id="aggregator",
        tools=STANDARD_TOOLS,
        rounds=1,
        run_seed=7,
    )
    fields.update(overrides)
    config = RunConfig(**fields)
    config.validate()
    return config


def build_env(config: RunConfig):
    """(gateway, registry, prompts) with a silent no-sleep gateway."""
    import random

    gateway = config.build_gateway(sleep=lambda seconds: None, jitter_rng=random.Random(0))
    return gateway, config.build_registry(), config.build_prompts()


def reply(answer: str, reasoning: str = "because", confidence: float = 0.7) -> str:
    return f"Answer: {answer}\nReasoning: {reasoning}\nConfidence: {confidence}"


def scorer_json(alignment: int, reasoning: str = "compared the texts") -> str:
    return json.dumps({"reasoning": reasoning, "alignment": str(alignment)})


def plan_json(experts: dict[str, dict]) -> str:
    return json.dumps({"experts": list(experts), "inputs": experts})


def grounder_payload(*detections) -> str:
    return json.dumps(
        [
            {"label": label, "score": score, "box": list(box)}
            for label, score, box in detections
        ]
    )
