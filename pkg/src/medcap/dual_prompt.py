"""Modality-aware and clinical-focus prompts, fused into one guidance string."""

import string
from dataclasses import dataclass
from typing import Any, Optional

from medcap.config import PromptConfig
from medcap.data_io import Modality
from medcap.lexicon import ConceptCategory
from medcap.modality_classifier import ModalityPrediction
from medcap.question_analyzer import QuestionAnalysis, QuestionType

CANONICAL_NAMES: dict[Modality, str] = {
    Modality.CT: "CT scan",
    Modality.MRI: "MRI",
    Modality.XRAY: "X-ray",
}

CLAUSE_SEPARATOR = "; "


@dataclass(frozen=True)
class DualPrompt:
    modality_text: str
    focus_text: str
    fused_text: str
    modality: Modality
    confidence: float
    analysis: QuestionAnalysis

    def to_dict(self) -> dict[str, Any]:
        return {
            "modality_text": self.modality_text,
            "focus_text": self.focus_text,
            "fused_text": self.fused_text,
            "modality": self.modality.value,
            "confidence": self.confidence,
            "analysis": self.analysis.to_dict(),
        }


def canonical_name(modality: Modality) -> str:
    return CANONICAL_NAMES[Modality(modality)]


def render_modality_prompt(
    pred: ModalityPrediction,
    anatomy: Optional[str] = None,
    config: Optional[PromptConfig] = None,
) -> str:
    """Fill the modality template, e.g. "This is a CT scan image."

    When an anatomy term is given, the body-part clause is filled in as well
    ("This is a CT scan image of the lung.").
    """
    config = config or PromptConfig()
    body_part = config.body_part_template.format(anatomy=anatomy) if anatomy else ""
    return config.modality_template.format(
        modality=canonical_name(pred.modality), body_part=body_part
    )


def _placeholders(template: str) -> list[str]:
    return [name for _, name, _, _ in string.Formatter().parse(template) if name]


def render_focus_prompt(analysis: QuestionAnalysis, config: Optional[PromptConfig] = None) -> str:
    """Render the clinical-focus clause list, dropping clauses whose slot is empty.

    Falls back to the generic instruction when nothing remains.
    """
    config = config or PromptConfig()
    values = {
        category.value: ", ".join(analysis.top_terms(category, config.max_terms))
        for category in ConceptCategory
    }
    has_type = analysis.question_type != QuestionType.OTHER
    values["question_type"] = analysis.question_type.value if has_type else ""

    template = config.focus_template.strip()
    terminal = template[-1] if template and template[-1] in ".!" else ""
    body = template[: len(template) - len(terminal)] if terminal else template

    clauses = []
    for clause in body.split(CLAUSE_SEPARATOR):
        names = _placeholders(clause)
        if not clause.strip() or any(not values.get(name) for name in names):
            continue
        clauses.append(clause.format(**values))
    if not clauses:
        return config.fallback_focus

    text = CLAUSE_SEPARATOR.join(clauses)
    return text[0].upper() + text[1:] + (terminal or ".")


def fuse(
    modality_text: str,
    focus_text: str,
    preamble: Optional[str] = None,
    separator: Optional[str] = None,
) -> str:
    """preamble + modality_text + separator + focus_text.

    Raises:
        ValueError: If either prompt is empty or contains the separator
    """
    defaults = PromptConfig()
    preamble = defaults.preamble if preamble is None else preamble
    separator = defaults.separator if separator is None else separator
    if not modality_text or not focus_text:
        raise ValueError("Both prompts must be non-empty")
    if not separator:
        raise ValueError("Separator must be non-empty")
    for part in (modality_text, focus_text):
        if separator in part:
            raise ValueError(f"Prompt {part!r} contains the separator {separator!r}")
    return preamble + modality_text + separator + focus_text


def build_dual_prompt(
    pred: ModalityPrediction, analysis: QuestionAnalysis, config: Optional[PromptConfig] = None
) -> DualPrompt:
    """Render both prompts and fuse them; a pure function of its inputs."""
    config = config or PromptConfig()
    anatomy = analysis.top_terms(ConceptCategory.ANATOMY, 1)
    modality_text = render_modality_prompt(pred, anatomy[0] if anatomy else None, config)
    focus_text = render_focus_prompt(analysis, config)
    return DualPrompt(
        modality_text=modality_text,
        focus_text=focus_text,
        fused_text=fuse(modality_text, focus_text, config.preamble, config.separator),
        modality=pred.modality,
        confidence=pred.confidence,
        analysis=analysis,
    )
