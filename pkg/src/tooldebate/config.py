"""Run configuration: endpoints, role wiring, tools, ablations, mocks.

Configs are JSON documents with ``${VAR}`` environment interpolation in
string values.  A loaded :class:`RunConfig` can build everything a run
needs: the gateway (with mock scripts registered), the tool registry (with
withheld tools removed), and the prompt library (with per-run overrides).
Validation failures always name the offending field.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

from .gateway import EndpointProfile, MockFailure, ModelGateway
from .prompts import TEMPLATE_NAMES, PromptLibrary
from .recruitment import INPUT_QUERY_LIST
from .tools import (
    BUILTIN_TOOL_NAMES,
    ModelToolBackend,
    StructuredToolBackend,
    ToolDescriptor,
    ToolRegistry,
    default_model_template,
)

SCORER_DEFAULT_TEMPERATURE = 0.1
SINGLE_MODEL_TEMPERATURE = 0.9

# Built-ins that return detection payloads rather than prose.
STRUCTURED_BUILTINS = ("grounder", "detector")

_ENV_TOKEN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ConfigError(ValueError):
    """A configuration problem; ``field`` names what is wrong."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ToolWiring:
    """How one tool connects to an endpoint (or stays descriptor-only)."""

    name: str
    kind: str = "model"
    endpoint_id: str | None = None
    input_kind: str | None = None
    capability_sentence: str | None = None
    input_hint: str | None = None
    prompt_template: str | None = None


@dataclass(frozen=True)
class RunConfig:
    endpoints: tuple[EndpointProfile, ...]
    answerer_ids: tuple[str, ...]
    recruiter_id: str
    scorer_id: str
    aggregator_id: str
    tools: tuple[ToolWiring, ...] = ()
    rounds: int = 1
    run_seed: int = 0
    workers: int = 1
    parallel_agents: bool = False
    no_tools: bool = False
    no_scores: bool = False
    majority_vote: bool = False
    single_model: bool = False
    show_initial_answers_to_aggregator: bool = False
    withheld_tools: tuple[str, ...] = ()
    mock_scripts: Mapping[str, tuple] = field(default_factory=dict)
    prompt_overrides: Mapping[str, str] = field(default_factory=dict)
    on_agent_failure: str = "abort"
    disable_unanimity_short_circuit: bool = False
    single_model_temperature: float = SINGLE_MODEL_TEMPERATURE

    # -- lookups ----------------------------------------------------------

    def profile(self, endpoint_id: str) -> EndpointProfile:
        for profile in self.endpoints:
            if profile.endpoint_id == endpoint_id:
                return profile
        raise ConfigError("endpoints", f"unknown endpoint {endpoint_id!r}")

    def answerer_profiles(self) -> list[EndpointProfile]:
        """Effective agent endpoints; the single-model ablation swaps every
        slot for the first answerer at raised temperature."""
        profiles = [self.profile(endpoint_id) for endpoint_id in self.answerer_ids]
        if self.single_model:
            hot = replace(profiles[0], temperature=self.single_model_temperature)
            return [hot] * len(profiles)
        return profiles

    def registered_tool_names(self) -> list[str]:
        names = list(BUILTIN_TOOL_NAMES)
        for wiring in self.tools:
            if wiring.name not in names:
                names.append(wiring.name)
        return names

    # -- validation -------------------------------------------------------

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError("rounds", f"must be >= 1, got {self.rounds}")
        if self.workers < 1:
            raise ConfigError("workers", f"must be >= 1, got {self.workers}")
        if not self.answerer_ids:
            raise ConfigError("answerer_ids", "at least one answerer is required")
        seen_ids = [p.endpoint_id for p in self.endpoints]
        if len(set(seen_ids)) != len(seen_ids):
            raise ConfigError("endpoints", "endpoint ids must be unique")
        for role_field, endpoint_id in (
            ("recruiter_id", self.recruiter_id),
            ("scorer_id", self.scorer_id),
            ("aggregator_id", self.aggregator_id),
        ):
            if endpoint_id not in seen_ids:
                raise ConfigError(role_field, f"unknown endpoint {endpoint_id!r}")
        for endpoint_id in self.answerer_ids:
            if endpoint_id not in seen_ids:
                raise ConfigError("answerer_ids", f"unknown endpoint {endpoint_id!r}")
        tool_names = []
        for wiring in self.tools:
            if not wiring.name:
                raise ConfigError("tools", "tool name must be non-empty")
            if wiring.name in tool_names:
                raise ConfigError("tools", f"duplicate tool {wiring.name!r}")
            tool_names.append(wiring.name)
            if wiring.kind not in ("model", "structured"):
                raise ConfigError("tools", f"{wiring.name}: unknown kind {wiring.kind!r}")
            if wiring.endpoint_id is not None and wiring.endpoint_id not in seen_ids:
                raise ConfigError("tools", f"{wiring.name}: unknown endpoint {wiring.endpoint_id!r}")
            if wiring.name not in BUILTIN_TOOL_NAMES and not wiring.capability_sentence:
                raise ConfigError(
                    "tools", f"{wiring.name}: added tools need a capability_sentence"
                )
        registered = self.registered_tool_names()
        for name in self.withheld_tools:
            if name not in registered:
                raise ConfigError("withheld_tools", f"{name!r} is not a registered tool")
        mock_ids = {p.endpoint_id for p in self.endpoints if p.is_mock}
        for endpoint_id, script in self.mock_scripts.items():
            if endpoint_id not in seen_ids:
                raise ConfigError("mock_scripts", f"unknown endpoint {endpoint_id!r}")
            if endpoint_id not in mock_ids:
                raise ConfigError("mock_scripts", f"{endpoint_id!r} is not a mock endpoint")
            for entry in script:
                if not isinstance(entry, (str, MockFailure)):
                    raise ConfigError(
                        "mock_scripts", f"{endpoint_id}: invalid script entry {entry!r}"
                    )
        if self.on_agent_failure not in ("abort", "substitute_empty"):
            raise ConfigError("on_agent_failure", f"unknown policy {self.on_agent_failure!r}")
        for name in self.prompt_overrides:
            if name not in TEMPLATE_NAMES:
                raise ConfigError("prompt_overrides", f"unknown template {name!r}")
        if not isinstance(self.run_seed, int) or isinstance(self.run_seed, bool):
            raise ConfigError("run_seed", "must be an integer")

    # -- builders ---------------------------------------------------------

    def build_gateway(self, **gateway_kwargs) -> ModelGateway:
        gateway = ModelGateway(self.endpoints, **gateway_kwargs)
        for endpoint_id, script in self.mock_scripts.items():
            gateway.register_mock_script(endpoint_id, list(script))
        return gateway

    def build_registry(self) -> ToolRegistry:
        registry = ToolRegistry.builtin()
        for wiring in self.tools:
            backend = None
            if wiring.endpoint_id is not None:
                if wiring.kind == "structured":
                    backend = StructuredToolBackend(endpoint_id=wiring.endpoint_id)
                else:
                    backend = ModelToolBackend(
                        endpoint_id=wiring.endpoint_id,
                        prompt_template=wiring.prompt_template or default_model_template(wiring.name),
                    )
            if wiring.name in BUILTIN_TOOL_NAMES:
                base = registry.get(wiring.name)
                registry.register(
                    ToolDescriptor(
                        tool_name=wiring.name,
                        input_kind=wiring.input_kind or base.input_kind,
                        capability_sentence=wiring.capability_sentence or base.capability_sentence,
                        input_hint=wiring.input_hint or base.input_hint,
                        backend=backend,
                    ),
                    override=True,
                )
            else:
                registry.register(
                    ToolDescriptor(
                        tool_name=wiring.name,
                        input_kind=wiring.input_kind or INPUT_QUERY_LIST,
                        capability_sentence=wiring.capability_sentence or "",
                        input_hint=wiring.input_hint
                        or ("none" if wiring.input_kind == "none" else "list. objects of interest"),
                        backend=backend,
                    )
                )
        return registry.without(self.withheld_tools)

    def build_prompts(self) -> PromptLibrary:
        return PromptLibrary(self.prompt_overrides)


def interpolate_env(value: object, env: Mapping[str, str]) -> object:
    """Substitute ``${VAR}`` tokens in every string, recursively."""
    if isinstance(value, str):
        def swap(match: re.Match) -> str:
            name = match.group(1)
            if name not in env:
                raise ConfigError("env", f"environment variable {name!r} is not set")
            return env[name]
        return _ENV_TOKEN.sub(swap, value)
    if isinstance(value, list):
        return [interpolate_env(item, env) for item in value]
    if isinstance(value, dict):
        return {key: interpolate_env(item, env) for key, item in value.items()}
    return value


def _parse_endpoint(raw: dict, role_default: str, temperature_default: float | None) -> EndpointProfile:
    if not isinstance(raw, dict):
        raise ConfigError("endpoints", f"endpoint entry must be an object, got {raw!r}")
    for key in ("endpoint_id", "base_url", "model_name"):
        if not isinstance(raw.get(key), str) or not raw[key]:
            raise ConfigError("endpoints", f"endpoint needs a non-empty {key}")
    kwargs = {
        "endpoint_id": raw["endpoint_id"],
        "base_url": raw["base_url"],
        "model_name": raw["model_name"],
        "role_hint": raw.get("role_hint", role_default),
    }
    if "temperature" in raw:
        kwargs["temperature"] = raw["temperature"]
    elif temperature_default is not None:
        kwargs["temperature"] = temperature_default
    for key in ("max_retries", "timeout_ms", "api_key_env", "max_in_flight"):
        if key in raw:
            kwargs[key] = raw[key]
    try:
        return EndpointProfile(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError("endpoints", str(exc)) from exc


def _parse_scripts(raw: object) -> dict[str, tuple]:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("mock_scripts", "must be an object of endpoint -> entries")
    scripts: dict[str, tuple] = {}
    for endpoint_id, entries in raw.items():
        if not isinstance(entries, list):
            raise ConfigError("mock_scripts", f"{endpoint_id}: script must be a list")
        normalized: list[object] = []
        for entry in entries:
            if isinstance(entry, str):
                normalized.append(entry)
            elif isinstance(entry, dict) and "fail" in entry:
                message = entry["fail"]
                normalized.append(
                    MockFailure(message if isinstance(message, str) else "scripted failure")
                )
            else:
                raise ConfigError("mock_scripts", f"{endpoint_id}: invalid entry {entry!r}")
        scripts[endpoint_id] = tuple(normalized)
    return scripts


def config_from_dict(data: Mapping, base_dir: Path | None = None) -> RunConfig:
    """Build and validate a :class:`RunConfig` from parsed JSON."""
    if not isinstance(data, Mapping):
        raise ConfigError("config", "top level must be an object")
    raw_endpoints = data.get("endpoints")
    if not isinstance(raw_endpoints, list) or not raw_endpoints:
        raise ConfigError("endpoints", "config needs a non-empty endpoints list")
    recruiter_id = data.get("recruiter_id", "")
    scorer_id = data.get("scorer_id", "")
    aggregator_id = data.get("aggregator_id", "")
    answerer_ids = data.get("answerer_ids")
    if not isinstance(answerer_ids, list) or not answerer_ids:
        raise ConfigError("answerer_ids", "config needs a non-empty answerer_ids list")

    endpoints = []
    for raw in raw_endpoints:
        endpoint_id = raw.get("endpoint_id") if isinstance(raw, dict) else None
        if endpoint_id == recruiter_id:
            role, temperature = "recruiter", None
        elif endpoint_id == scorer_id:
            # The scoring role runs cold unless the config says otherwise.
            role, temperature = "scorer", SCORER_DEFAULT_TEMPERATURE
        elif endpoint_id == aggregator_id:
            role, temperature = "aggregator", None
        elif isinstance(endpoint_id, str) and endpoint_id in answerer_ids:
            role, temperature = "answerer", None
        else:
            role, temperature = "tool", None
        endpoints.append(_parse_endpoint(raw, role, temperature))

    tools = []
    raw_tools = data.get("tools", [])
    if not isinstance(raw_tools, list):
        raise ConfigError("tools", "must be a list")
    for raw in raw_tools:
        if not isinstance(raw, dict) or not isinstance(raw.get("name"), str):
            raise ConfigError("tools", f"tool entry must be an object with a name, got {raw!r}")
        name = raw["name"]
        kind = raw.get("kind", "structured" if name in STRUCTURED_BUILTINS else "model")
        tools.append(
            ToolWiring(
                name=name,
                kind=kind,
                endpoint_id=raw.get("endpoint_id"),
                input_kind=raw.get("input"),
                capability_sentence=raw.get("capability_sentence"),
                input_hint=raw.get("input_hint"),
                prompt_template=raw.get("prompt_template"),
            )
        )

    ablations = data.get("ablations", {})
    if not isinstance(ablations, Mapping):
        raise ConfigError("ablations", "must be an object")

    overrides: dict[str, str] = {}
    raw_overrides = data.get("prompt_overrides", {})
    if not isinstance(raw_overrides, Mapping):
        raise ConfigError("prompt_overrides", "must be an object of template -> file path")
    for name, path_value in raw_overrides.items():
        if not isinstance(path_value, str):
            raise ConfigError("prompt_overrides", f"{name}: expected a file path string")
        path = Path(path_value)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError("prompt_overrides", f"{name}: no such file {path}")
        overrides[name] = path.read_text(encoding="utf-8")

    config = RunConfig(
        endpoints=tuple(endpoints),
        answerer_ids=tuple(answerer_ids),
        recruiter_id=recruiter_id,
        scorer_id=scorer_id,
        aggregator_id=aggregator_id,
        tools=tuple(tools),
        rounds=data.get("rounds", 1),
        run_seed=data.get("run_seed", 0),
        workers=data.get("workers", 1),
        parallel_agents=bool(data.get("parallel_agents", False)),
        no_tools=bool(ablations.get("no_tools", False)),
        no_scores=bool(ablations.get("no_scores", False)),
        majority_vote=bool(ablations.get("majority_vote", False)),
        single_model=bool(ablations.get("single_model", False)),
        show_initial_answers_to_aggregator=bool(
            ablations.get("show_initial_answers_to_aggregator", False)
        ),
        withheld_tools=tuple(ablations.get("withheld_tools", ())),
        mock_scripts=_parse_scripts(data.get("mock_scripts")),
        prompt_overrides=overrides,
        on_agent_failure=data.get("on_agent_failure", "abort"),
        disable_unanimity_short_circuit=bool(data.get("disable_unanimity_short_circuit", False)),
        single_model_temperature=data.get("single_model_temperature", SINGLE_MODEL_TEMPERATURE),
    )
    if not isinstance(config.rounds, int) or isinstance(config.rounds, bool):
        raise ConfigError("rounds", "must be an integer")
    if not isinstance(config.workers, int) or isinstance(config.workers, bool):
        raise ConfigError("workers", "must be an integer")
    config.validate()
    return config


def load_config(path: str | Path, env: Mapping[str, str] | None = None) -> RunConfig:
    """Read, interpolate, and validate a JSON config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"no such file: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from exc
    data = interpolate_env(data, os.environ if env is None else env)
    return config_from_dict(data, base_dir=path.parent)
