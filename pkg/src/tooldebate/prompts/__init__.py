"""Stage prompt templates, shipped as data files and overridable per run.

Templates use ``<name>`` placeholder tokens.  Rendering is plain token
substitution, so literal braces (the JSON example in the recruitment
template) need no escaping.
"""

from __future__ import annotations

from importlib import resources
from typing import Mapping

TEMPLATE_NAMES = (
    "initial_answer",
    "recruitment",
    "agreement",
    "discussion",
    "aggregator",
)


def load_template(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise KeyError(f"unknown prompt template {name!r}")
    text = resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return text.rstrip("\n")


def render(template: str, values: Mapping[str, str]) -> str:
    """Substitute every ``<key>`` token; unknown tokens are left untouched."""
    rendered = template
    for key, value in values.items():
        rendered = rendered.replace(f"<{key}>", value)
    return rendered


class PromptLibrary:
    """Lookup plus per-run overrides for the five stage templates."""

    def __init__(self, overrides: Mapping[str, str] | None = None) -> None:
        overrides = dict(overrides or {})
        unknown = set(overrides) - set(TEMPLATE_NAMES)
        if unknown:
            raise KeyError(f"unknown prompt template override(s): {sorted(unknown)}")
        self._overrides = {name: text.rstrip("\n") for name, text in overrides.items()}
        self._cache: dict[str, str] = {}

    def get(self, name: str) -> str:
        if name in self._overrides:
            return self._overrides[name]
        if name not in self._cache:
            self._cache[name] = load_template(name)
        return self._cache[name]

    def render(self, name: str, **values: str) -> str:
        return render(self.get(name), values)
