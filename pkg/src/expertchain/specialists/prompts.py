"""Prompt templates for the rationale, review, regeneration and caption stages."""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from string import Template

from expertchain.autograd import ContractError

STAGES = ("initial", "followup", "regenerate", "caption")

# substrings every rendered prompt of the stage must contain
REQUIRED_FRAGMENTS = {
    "initial": "Please proceed with a step-by-step analysis and provide a rationale",
    "followup": "judge whether this rationale is effectively valid",
    "regenerate": "judge whether this rationale is effectively valid",
}


class TemplateError(ValueError):
    pass


def load_templates(directory: str | Path | None = None) -> dict[str, Template]:
    """Read ``<stage>.txt`` for every stage, from ``directory`` or the bundled set."""
    out = {}
    for stage in STAGES:
        if directory is None:
            text = resources.files("expertchain.specialists").joinpath("templates", f"{stage}.txt").read_text("utf-8")
        else:
            text = (Path(directory) / f"{stage}.txt").read_text("utf-8")
        fragment = REQUIRED_FRAGMENTS.get(stage)
        if fragment and fragment not in text:
            raise TemplateError(f"{stage} template lacks the required instruction {fragment!r}")
        out[stage] = Template(text)
    return out


def build_prompt(stage: str, item, prior: str | None = None, templates: dict[str, Template] | None = None) -> str:
    """Render the prompt for ``stage``; review stages embed ``prior`` verbatim."""
    if stage not in STAGES:
        raise ContractError(f"unknown stage {stage!r}")
    if not item.question.strip():
        raise ContractError(f"item {item.id} has an empty question")
    if stage in ("followup", "regenerate") and not prior:
        raise ContractError(f"{stage} prompt for item {item.id} needs the prior rationale")
    templates = templates or load_templates()
    options = ", ".join(item.options) if item.options else "(open-ended question)"
    return templates[stage].substitute(question=item.question, options=options, rationale=prior or "")
