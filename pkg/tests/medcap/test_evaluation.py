"""Tests for reference-free caption scoring."""

import csv
import dataclasses
import json
import random
from pathlib import Path
from typing import Optional

import numpy as np
import pytest

from medcap.config import EvalWeights, EvaluationConfig
from medcap.data_io import ImageSample
from medcap.embeddings import HashingMultimodalEmbedder, HashingTextEmbedder
from medcap.errors import ConfigError, DataError, ParseError
from medcap.evaluation import (
    SCORE_FIELDS,
    TABLE_COLUMNS,
    BatchReport,
    EvaluationReport,
    Evaluator,
    aggregate_reports,
    clinical_details,
    clinical_score,
    combine_quality,
    combine_relevance,
    evaluate,
    evaluate_batch,
    read_batch_jsonl,
    relevance,
    structure_score,
    terminology_details,
    terminology_score,
    write_report,
)
from medcap.lexicon import (
    DEFAULT_LEXICON_PATH,
    ConceptCategory,
    ConceptLinker,
    Lexicon,
    LexiconEntry,
    PhraseMatch,
)
from medcap.question_analyzer import QuestionAnalyzer, QuestionType, build_dictionary

LUNG_QUESTION = "Which side of the lung is abnormal?"
GOOD_REPORT = (
    "Chest X-ray image shows increased density in the lower left lung. "
    "Findings are consistent with pneumonia."
)


@pytest.fixture(scope="module")
def lexicon() -> Lexicon:
    return Lexicon.load()


@pytest.fixture(scope="module")
def analyzer() -> QuestionAnalyzer:
    provider = HashingTextEmbedder()
    return QuestionAnalyzer(build_dictionary(DEFAULT_LEXICON_PATH, provider), provider)


@pytest.fixture(scope="module")
def multimodal() -> HashingMultimodalEmbedder:
    return HashingMultimodalEmbedder()


@pytest.fixture(scope="module")
def evaluator(multimodal, analyzer, lexicon) -> Evaluator:
    return Evaluator(multimodal, analyzer, lexicon)


@pytest.fixture
def image() -> ImageSample:
    rng = np.random.default_rng(0)
    return ImageSample(pixels=rng.random((16, 16, 1)).astype(np.float32), record_id="img")


def test_relevance_combination_oracle() -> None:
    assert combine_relevance(0.3841, 0.5694, EvalWeights()) == pytest.approx(0.238375, abs=1e-12)
    assert combine_relevance(0.3841, 0.5694, EvalWeights(alpha1=0, alpha2=0)) == 0.0


def test_quality_combination_oracle() -> None:
    assert combine_quality(0.3514, 0.5833, 0.8737, EvalWeights()) == pytest.approx(
        0.602800, abs=1e-9
    )


def test_report_weight_algebra_holds_exactly() -> None:
    """Test the three combination equations hold by recomputation for random sub-scores."""
    rng = random.Random(0)
    for _ in range(200):
        weights = EvalWeights(*(rng.uniform(0, 2) for _ in range(7)))
        s = [rng.uniform(-1, 1), rng.uniform(-1, 1), rng.random(), rng.random(), rng.random()]

        report = EvaluationReport.from_scores(*s, weights=weights)

        assert report.s_relevance == weights.alpha1 * s[0] + weights.alpha2 * s[1]
        assert report.s_quality == (
            weights.beta1 * s[2] + weights.beta2 * s[3] + weights.beta3 * s[4]
        )
        assert report.s_final == (
            weights.gamma1 * report.s_relevance + weights.gamma2 * report.s_quality
        )


def test_zero_subscores_and_gamma_degeneracy() -> None:
    assert EvaluationReport.from_scores(0.0, 0.0, 0.0, 0.0, 0.0).s_final == 0.0

    report = EvaluationReport.from_scores(
        0.31, 0.47, 0.5, 0.25, 0.75, weights=EvalWeights(gamma1=1.0, gamma2=0.0)
    )
    assert report.s_final == report.s_relevance


def test_relevance_question_identity(image: ImageSample, multimodal) -> None:
    """Test a caption identical to the question scores question similarity 1."""
    s_i, s_q, s_rel = relevance(image, LUNG_QUESTION, LUNG_QUESTION, multimodal)

    assert s_q == pytest.approx(1.0, abs=1e-12)
    assert -1.0 <= s_i <= 1.0
    assert s_rel == pytest.approx(0.25 * s_i + 0.25 * s_q)


def test_relevance_rejects_empty_caption(image: ImageSample, multimodal) -> None:
    with pytest.raises(DataError):
        relevance(image, LUNG_QUESTION, "  ", multimodal)


def test_appending_focus_term_never_lowers_question_similarity(
    image: ImageSample, multimodal, analyzer
) -> None:
    captions = ["Normal study.", "The heart is enlarged.", "X-ray image shows a nodule."]
    analysis = analyzer.analyze(LUNG_QUESTION)
    lexical = [
        f.term for terms in analysis.focus_terms.values() for f in terms if f.lexical
    ]
    assert lexical

    for caption in captions:
        _, before, _ = relevance(image, LUNG_QUESTION, caption, multimodal)
        for term in lexical:
            _, after, _ = relevance(image, LUNG_QUESTION, f"{caption} {term}", multimodal)
            assert after >= before - 1e-12


def test_terminology_score(lexicon: Lexicon) -> None:
    assert terminology_score("pneumothorax", lexicon) == 1.0
    assert terminology_score("Hello there.", lexicon) == 0.0
    assert terminology_score("", lexicon) == 0.0

    single = terminology_score("The image shows a pneumothorax.", lexicon)
    repeated = terminology_score("The image shows a " + "pneumothorax " * 10, lexicon)
    assert repeated >= single


def test_terminology_diversity_counts_concepts(lexicon: Lexicon) -> None:
    """Test synonyms of one concept lower diversity below one."""
    assert terminology_score("lung lungs", lexicon) == pytest.approx(0.5 + 0.5 * 0.5)


def test_clinical_score_full_marks(analyzer, lexicon: Lexicon) -> None:
    """Test anatomy with laterality and a finding earns full marks on a location question."""
    analysis = analyzer.analyze(LUNG_QUESTION)

    details = clinical_details("Increased density in the lower left lung.", analysis, lexicon)

    assert details["localization"] == 1.0
    assert details["finding"] == 1.0
    assert details["measurement"] is None
    assert details["score"] == 1.0


def test_clinical_score_without_finding(analyzer, lexicon: Lexicon) -> None:
    analysis = analyzer.analyze(LUNG_QUESTION)

    assert clinical_score("The left lung is seen.", analysis, lexicon) == 0.5
    assert clinical_score("", analysis, lexicon) == 0.0


def test_clinical_score_localization_needs_side(analyzer, lexicon: Lexicon) -> None:
    analysis = analyzer.analyze(LUNG_QUESTION)

    details = clinical_details("Increased density in the lung.", analysis, lexicon)

    assert details["localization"] == 0.0
    assert details["score"] == 0.5


def test_clinical_score_measurement_credit(analyzer, lexicon: Lexicon) -> None:
    """Test numeric sizes earn full credit and size words half on pathology questions."""
    analysis = analyzer.analyze("Is there a nodule in the liver?")
    assert analysis.question_type == QuestionType.PATHOLOGY

    numeric = clinical_details("A 12 mm nodule in the liver.", analysis, lexicon)
    qualitative = clinical_details("A small nodule in the liver.", analysis, lexicon)
    absent = clinical_details("A nodule in the liver.", analysis, lexicon)

    assert (numeric["measurement"], qualitative["measurement"], absent["measurement"]) == (
        1.0,
        0.5,
        0.0,
    )
    assert numeric["score"] == 1.0
    assert absent["score"] == pytest.approx(2 / 3)


def test_clinical_score_accepts_normality_statement(analyzer, lexicon: Lexicon) -> None:
    analysis = analyzer.analyze("Is the heart normal?")

    details = clinical_details("The heart is within normal limits.", analysis, lexicon)

    assert details["finding"] == 1.0


def test_structure_score() -> None:
    assert structure_score(GOOD_REPORT) == 1.0
    assert structure_score("is it a lung?") <= 0.5
    assert structure_score("") == 0.0
    conclusion_first = "Likely pneumonia on this radiograph. Findings show a left lung density."
    assert structure_score(conclusion_first) == 0.75


def test_evaluate_records_per_check_details(
    image: ImageSample, multimodal, analyzer, lexicon
) -> None:
    report = evaluate(image, LUNG_QUESTION, GOOD_REPORT, multimodal, analyzer, lexicon)

    assert report.per_check["question_type"] == "LOCATION"
    assert set(report.per_check) == {"question_type", "terminology", "clinical", "structure"}
    assert report.s_structure == 1.0
    for name in ("s_medical", "s_clinical", "s_structure"):
        assert 0.0 <= getattr(report, name) <= 1.0
    assert report.s_quality == combine_quality(
        report.s_medical, report.s_clinical, report.s_structure, EvalWeights()
    )
    again = evaluate(image, LUNG_QUESTION, GOOD_REPORT, multimodal, analyzer, lexicon)
    assert again.to_dict() == report.to_dict()


def _report(s_final: float, record_id: str = "") -> EvaluationReport:
    values = dict.fromkeys(SCORE_FIELDS, 0.0)
    values["s_final"] = s_final
    return EvaluationReport(**values, record_id=record_id)


def test_aggregate_reports() -> None:
    assert aggregate_reports([_report(0.4), _report(0.6)])["s_final"] == pytest.approx(0.5)
    single = EvaluationReport.from_scores(0.2, 0.3, 0.4, 0.5, 0.6)
    assert aggregate_reports([single]) == single.scores()
    with pytest.raises(DataError):
        aggregate_reports([])


def test_evaluate_batch_is_permutation_invariant(evaluator: Evaluator, image: ImageSample) -> None:
    items = [
        ("a", image, LUNG_QUESTION, GOOD_REPORT),
        ("b", image, "Is the heart enlarged?", "The heart is mildly enlarged."),
        ("c", image, "Is there a nodule?", "A 5 mm nodule in the right upper lobe."),
        ("d", image, "What modality is this?", "This is a CT scan of the abdomen."),
    ]

    forward = evaluate_batch(items, evaluator)
    backward = evaluate_batch(list(reversed(items)), evaluator)
    single_worker = Evaluator(
        evaluator.multimodal, evaluator.analyzer, evaluator.lexicon, EvaluationConfig(max_workers=1)
    )
    sequential = evaluate_batch(items, single_worker)

    assert forward.aggregate == backward.aggregate
    assert [r.record_id for r in forward.records] == ["a", "b", "c", "d"]
    assert [r.to_dict() for r in sequential.records] == [r.to_dict() for r in forward.records]
    with pytest.raises(DataError):
        evaluate_batch([], evaluator)


def test_write_report(tmp_path: Path) -> None:
    records = [_report(0.4, "a"), _report(0.6, "b")]
    batch = BatchReport(records=records, aggregate=aggregate_reports(records), dataset="slake")

    json_path, csv_path = write_report(batch, tmp_path / "out")

    data = json.loads(json_path.read_text())
    assert data["dataset"] == "slake"
    assert data["count"] == 2
    assert [r["record_id"] for r in data["records"]] == ["a", "b"]
    with open(csv_path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["dataset", "records", *TABLE_COLUMNS.values()]
    assert rows[1][:3] == ["slake", "2", "0.500000"]


def test_read_batch_jsonl(tmp_path: Path) -> None:
    path = tmp_path / "batch.jsonl"
    rows = [
        {"record_id": "a", "image_path": "a.png", "question": "q", "caption": "c"},
        {"image_path": "b.png", "question": "q", "caption": "c"},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows))

    items = read_batch_jsonl(path)

    assert [i.record_id for i in items] == ["a", "2"]
    assert items[0].image_path == str(tmp_path / "a.png")


@pytest.mark.parametrize(
    "content, line",
    [
        ('{"image_path": "a.png", "question": "q", "caption": "c"}\n[1]\n', 2),
        ('{"image_path": "a.png", "question": "q"}\n', 1),
        ('{"record_id": "x", "image_path": "a", "question": "q", "caption": "c"}\n' * 2, 2),
    ],
)
def test_read_batch_jsonl_errors(tmp_path: Path, content: str, line: int) -> None:
    path = tmp_path / "batch.jsonl"
    path.write_text(content)

    with pytest.raises(ParseError) as exc_info:
        read_batch_jsonl(path)

    assert exc_info.value.line == line


def test_weights_reject_negative_values() -> None:
    with pytest.raises(ConfigError) as exc_info:
        dataclasses.replace(EvalWeights(), beta2=-0.1)
    assert exc_info.value.key == "evaluation.weights.beta2"


class _OpacityLinker:
    """Linker that only knows one pathology concept."""

    entry = LexiconEntry(term="opacity", category=ConceptCategory.PATHOLOGY, concept_id="C0029053")

    def link(self, tokens: list[str]) -> list[PhraseMatch]:
        hits = [i for i, token in enumerate(tokens) if token == "opacity"]
        return [PhraseMatch(i, i + 1, (self.entry,)) for i in hits]

    def terms(self, category: Optional[ConceptCategory] = None) -> list[LexiconEntry]:
        return [self.entry] if category in (None, ConceptCategory.PATHOLOGY) else []


def test_terminology_accepts_any_concept_linker() -> None:
    """Test the scorer only needs link/terms, not the bundled lexicon."""
    linker = _OpacityLinker()

    assert isinstance(linker, ConceptLinker)
    assert terminology_score("opacity opacity", linker) == 1.0
    assert terminology_score("pneumothorax", linker) == 0.0
    assert terminology_details("opacity opacity", linker)["concepts"] == ["C0029053"]
