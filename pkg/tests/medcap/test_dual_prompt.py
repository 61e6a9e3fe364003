"""Tests for prompt rendering and fusion."""

import itertools

import pytest

from medcap.config import PromptConfig
from medcap.data_io import Modality
from medcap.dual_prompt import build_dual_prompt, fuse, render_focus_prompt, render_modality_prompt
from medcap.lexicon import ConceptCategory
from medcap.modality_classifier import ModalityPrediction
from medcap.question_analyzer import FocusTerm, QuestionAnalysis, QuestionType


def _prediction(modality: Modality, confidence: float = 0.9) -> ModalityPrediction:
    return ModalityPrediction(modality=modality, confidence=confidence, logits=[0.0, 0.0, 0.0])


def _analysis(
    question_type: QuestionType = QuestionType.OTHER,
    anatomy: tuple[str, ...] = (),
    pathology: tuple[str, ...] = (),
) -> QuestionAnalysis:
    return QuestionAnalysis(
        question_type=question_type,
        focus_terms={
            ConceptCategory.ANATOMY: [FocusTerm(t, 1.0 - i / 10) for i, t in enumerate(anatomy)],
            ConceptCategory.PATHOLOGY: [
                FocusTerm(t, 1.0 - i / 10) for i, t in enumerate(pathology)
            ],
        },
        raw_question="?",
    )


@pytest.mark.parametrize(
    "modality, expected",
    [
        (Modality.CT, "This is a CT scan image."),
        (Modality.MRI, "This is a MRI image."),
        (Modality.XRAY, "This is a X-ray image."),
    ],
)
def test_render_modality_prompt(modality: Modality, expected: str) -> None:
    assert render_modality_prompt(_prediction(modality)) == expected


def test_render_modality_prompt_with_body_part() -> None:
    text = render_modality_prompt(_prediction(Modality.CT), anatomy="chest")

    assert text == "This is a CT scan image of the chest."


def test_render_focus_prompt_full() -> None:
    analysis = _analysis(QuestionType.LOCATION, ("lung",), ("abnormal",))

    text = render_focus_prompt(analysis)

    assert text == "Focus on lung; assess abnormal; question type: LOCATION."


def test_render_focus_prompt_keeps_similarity_order() -> None:
    analysis = _analysis(QuestionType.ANATOMY, ("left lung", "lung"))

    text = render_focus_prompt(analysis)

    assert text == "Focus on left lung, lung; question type: ANATOMY."


def test_render_focus_prompt_drops_empty_clauses() -> None:
    """Test missing anatomy drops the focus clause and recapitalizes."""
    analysis = _analysis(QuestionType.PATHOLOGY, pathology=("effusion",))

    assert render_focus_prompt(analysis) == "Assess effusion; question type: PATHOLOGY."


def test_render_focus_prompt_fallback() -> None:
    assert render_focus_prompt(_analysis()) == "Describe clinically relevant findings."


def test_render_focus_prompt_max_terms() -> None:
    analysis = _analysis(QuestionType.ANATOMY, ("a1", "a2", "a3", "a4"))

    text = render_focus_prompt(analysis, PromptConfig(max_terms=2))

    assert "a1, a2;" in text
    assert "a3" not in text


def test_fuse_concatenates_with_separator() -> None:
    """Test the fused length is preamble + modality + separator + focus."""
    config = PromptConfig()
    a, b = "This is a CT scan image.", "Focus on lung; assess abnormal."

    fused = fuse(a, b)

    assert a in fused and b in fused
    assert fused == fuse(a, b)
    assert len(fused) == len(config.preamble) + len(a) + len(config.separator) + len(b)
    assert fuse(a, b, preamble="", separator=" | ") == a + " | " + b


def test_fuse_is_injective_on_pairs() -> None:
    texts = ["This is a CT scan image.", "This is a MRI image.", "Focus on lung.", "A", "A B"]
    pairs = list(itertools.product(texts, texts))

    fused = {fuse(a, b) for a, b in pairs}

    assert len(fused) == len(pairs)


@pytest.mark.parametrize(
    "a, b", [("", "Focus on lung."), ("This is a CT scan image.", ""), ("one\ntwo", "x")]
)
def test_fuse_rejects_bad_parts(a: str, b: str) -> None:
    with pytest.raises(ValueError):
        fuse(a, b)


def test_build_dual_prompt() -> None:
    """Test the top anatomy term parameterizes the modality prompt."""
    prediction = _prediction(Modality.XRAY, 0.8)
    analysis = _analysis(QuestionType.LOCATION, ("lung", "chest"), ("abnormal",))

    prompt = build_dual_prompt(prediction, analysis)

    assert prompt.modality_text == "This is a X-ray image of the lung."
    assert prompt.modality_text in prompt.fused_text
    assert prompt.focus_text in prompt.fused_text
    assert prompt.modality == Modality.XRAY
    assert prompt.to_dict()["confidence"] == 0.8
    assert build_dual_prompt(prediction, analysis) == prompt
