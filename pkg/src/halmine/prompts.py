"""Versioned prompt assets: the yes/no question bank and query-writer protocols.

The question bank is a tab-separated text file of templates containing an
``OBJ`` placeholder. ``main`` is the question used for mining and filtering,
``suffix`` the reply-format instruction appended to every question, and
``t01`` .. ``t11`` the transfer-suite variants.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Optional

OBJ_PLACEHOLDER = "OBJ"
MAIN_TEMPLATE_ID = "main"
SUITE_TEMPLATE_IDS = tuple(f"t{i:02d}" for i in range(1, 12))


class PromptBankError(KeyError):
    """Unknown template id or malformed bank file."""


def _read_asset(name: str) -> str:
    return resources.files("halmine.data.prompts").joinpath(name).read_text(encoding="utf-8")


@dataclass(frozen=True)
class QuestionBank:
    version: str
    templates: dict

    def template(self, template_id: str) -> str:
        try:
            return self.templates[template_id]
        except KeyError:
            raise PromptBankError(f"unknown question template {template_id!r}") from None

    @property
    def suffix(self) -> str:
        return self.templates["suffix"]

    def render(self, template_id: str, object_name: str, *, with_suffix: bool = True) -> str:
        """Fill the OBJ placeholder; append the answer-format suffix by default."""
        text = self.template(template_id).replace(OBJ_PLACEHOLDER, object_name)
        if with_suffix and template_id != "suffix":
            text = f"{text} {self.suffix}"
        return text

    def suite_templates(self) -> list:
        return [(tid, self.templates[tid]) for tid in SUITE_TEMPLATE_IDS if tid in self.templates]


def load_question_bank() -> QuestionBank:
    version = "unversioned"
    templates: dict = {}
    for raw in _read_asset("question_bank.txt").splitlines():
        line = raw.rstrip()
        if not line:
            continue
        if line.startswith("#"):
            if "question-bank" in line:
                version = line.lstrip("# ").strip()
            continue
        if "\t" not in line:
            raise PromptBankError(f"malformed bank line (no tab): {line!r}")
        tid, template = line.split("\t", 1)
        templates[tid.strip()] = template.strip()
    if MAIN_TEMPLATE_ID not in templates or "suffix" not in templates:
        raise PromptBankError("question bank must define 'main' and 'suffix'")
    return QuestionBank(version=version, templates=templates)


@dataclass(frozen=True)
class PromptProtocol:
    """Protocol for driving the query-writing LLM.

    ``followup_prompt`` is the correction turn sent after the initial list;
    protocols without one (reverse task) run a single turn.
    """

    name: str
    system_prompt: str
    user_template: str
    expected_count: int
    followup_prompt: Optional[str] = None

    def user_turn(self, object_name: str) -> str:
        return self.user_template.format(name=object_name)


def hallucination_protocol(expected_count: int = 50) -> PromptProtocol:
    return PromptProtocol(
        name="hallucination",
        system_prompt=_read_asset("system_prompt.txt"),
        user_template="object: {name}",
        expected_count=expected_count,
        followup_prompt=_read_asset("followup_prompt.txt"),
    )


def reverse_protocol(expected_count: int = 20) -> PromptProtocol:
    return PromptProtocol(
        name="reverse",
        system_prompt=_read_asset("reverse_prompt.txt"),
        user_template="object: {name}",
        expected_count=expected_count,
        followup_prompt=None,
    )
