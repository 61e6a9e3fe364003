"""Reference-free caption scoring.

    s_relevance = alpha1 * s_image_text + alpha2 * s_question_text
    s_quality   = beta1 * s_medical + beta2 * s_clinical + beta3 * s_structure
    s_final     = gamma1 * s_relevance + gamma2 * s_quality

Similarities are raw cosines in the multimodal embedding space. The three
quality sub-scores are rubric checks in [0, 1], each recorded in the
report's ``per_check`` details.
"""

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import pandas as pd

from medcap.config import EvalWeights, EvaluationConfig
from medcap.data_io import ImageSample, match_modality_families
from medcap.embeddings import MultimodalEmbeddingProvider, as_vector
from medcap.errors import DataError, IoError, ParseError
from medcap.lexicon import ConceptCategory, ConceptLinker, tokenize
from medcap.question_analyzer import (
    QuestionAnalysis,
    QuestionAnalyzer,
    QuestionType,
    cosine_similarity,
)

logger = logging.getLogger(__name__)

DEFAULT_DENSITY_CAP = 0.3

SCORE_FIELDS = (
    "s_image_text",
    "s_question_text",
    "s_relevance",
    "s_medical",
    "s_clinical",
    "s_structure",
    "s_quality",
    "s_final",
)

# Report column names, in the published results-table order, then the two
# intermediate combinations.
TABLE_COLUMNS: dict[str, str] = {
    "s_final": "final_score",
    "s_image_text": "image_similarity",
    "s_question_text": "question_similarity",
    "s_medical": "medical_quality",
    "s_clinical": "clinical_accuracy",
    "s_structure": "structure",
    "s_relevance": "relevance",
    "s_quality": "quality",
}

MEASUREMENT_INAPPLICABLE = frozenset(
    {QuestionType.LOCATION, QuestionType.ANATOMY, QuestionType.MODALITY}
)

_NUMERIC_MEASUREMENT = re.compile(
    r"\b\d+(?:\.\d+)?\s*(?:mm|cm|m|ml|cc|hu|degrees?|%)(?=\W|$)", re.IGNORECASE
)
_SIZE_WORDS = frozenset(
    {
        "small", "large", "tiny", "big", "enlarged", "mild", "mildly", "moderate",
        "severe", "massive", "marked", "minimal", "extensive", "larger", "smaller",
    }
)
_NORMALITY = re.compile(
    r"\b(?:normal|unremarkable|within normal limits|no acute|no evidence|"
    r"no significant|no abnormalit(?:y|ies)|clear)\b",
    re.IGNORECASE,
)
_FIRST_PERSON = frozenset({"i", "me", "my", "mine", "we", "our", "ours"})
_TECHNIQUE_WORDS = frozenset(
    {
        "scan", "imaging", "image", "radiograph", "ultrasound", "sonography", "contrast",
        "axial", "coronal", "sagittal", "view", "projection", "weighted", "film",
    }
)
_FINDINGS_CUE = re.compile(
    r"\b(?:findings?|shows?|demonstrates?|reveals?|seen|there is|there are|noted|observed)\b",
    re.IGNORECASE,
)
_IMPRESSION_CUE = re.compile(
    r"\b(?:impression|conclusion|consistent with|suggestive of|suggests?|likely|"
    r"in summary|diagnosis)\b",
    re.IGNORECASE,
)


# --------------------------------------------------------------------- combination


def combine_relevance(s_image_text: float, s_question_text: float, weights: EvalWeights) -> float:
    return weights.alpha1 * s_image_text + weights.alpha2 * s_question_text


def combine_quality(
    s_medical: float, s_clinical: float, s_structure: float, weights: EvalWeights
) -> float:
    return weights.beta1 * s_medical + weights.beta2 * s_clinical + weights.beta3 * s_structure


def combine_final(s_relevance: float, s_quality: float, weights: EvalWeights) -> float:
    return weights.gamma1 * s_relevance + weights.gamma2 * s_quality


@dataclass
class EvaluationReport:
    s_image_text: float
    s_question_text: float
    s_relevance: float
    s_medical: float
    s_clinical: float
    s_structure: float
    s_quality: float
    s_final: float
    per_check: dict[str, Any] = field(default_factory=dict)
    record_id: str = ""

    @classmethod
    def from_scores(
        cls,
        s_image_text: float,
        s_question_text: float,
        s_medical: float,
        s_clinical: float,
        s_structure: float,
        weights: Optional[EvalWeights] = None,
        per_check: Optional[dict[str, Any]] = None,
        record_id: str = "",
    ) -> "EvaluationReport":
        """Combine sub-scores into relevance, quality and final score."""
        weights = weights or EvalWeights()
        s_relevance = combine_relevance(s_image_text, s_question_text, weights)
        s_quality = combine_quality(s_medical, s_clinical, s_structure, weights)
        return cls(
            s_image_text=s_image_text,
            s_question_text=s_question_text,
            s_relevance=s_relevance,
            s_medical=s_medical,
            s_clinical=s_clinical,
            s_structure=s_structure,
            s_quality=s_quality,
            s_final=combine_final(s_relevance, s_quality, weights),
            per_check=per_check or {},
            record_id=record_id,
        )

    def scores(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in SCORE_FIELDS}

    def to_dict(self) -> dict[str, Any]:
        return {"record_id": self.record_id, **self.scores(), "per_check": self.per_check}


# ---------------------------------------------------------------------- relevance


def relevance(
    image: ImageSample,
    question: str,
    caption: str,
    provider: MultimodalEmbeddingProvider,
    weights: Optional[EvalWeights] = None,
) -> tuple[float, float, float]:
    """Return (s_image_text, s_question_text, s_relevance).

    Raises:
        DataError: If the caption is empty
        ZeroVectorError: If an embedding has zero norm
    """
    if not caption or not caption.strip():
        raise DataError("Caption must be non-empty")
    weights = weights or EvalWeights()
    caption_vec = as_vector(provider.embed_text(caption))
    s_image_text = cosine_similarity(as_vector(provider.embed_image(image)), caption_vec)
    s_question_text = cosine_similarity(as_vector(provider.embed_text(question)), caption_vec)
    return s_image_text, s_question_text, combine_relevance(s_image_text, s_question_text, weights)


# -------------------------------------------------------------------- terminology


def terminology_details(
    caption: str, lexicon: ConceptLinker, density_cap: float = DEFAULT_DENSITY_CAP
) -> dict[str, Any]:
    tokens = tokenize(caption)
    if not tokens:
        return {"score": 0.0, "tokens": 0, "matched_tokens": 0, "density": 0.0, "diversity": 0.0}
    matches = lexicon.link(tokens)
    matched_tokens = sum(m.length for m in matches)
    phrases = {tuple(tokens[m.start : m.end]) for m in matches}
    concepts = sorted({m.concept_id for m in matches})
    density = matched_tokens / len(tokens)
    diversity = len(concepts) / max(len(phrases), 1) if matches else 0.0
    score = 0.5 * min(density / density_cap, 1.0) + 0.5 * diversity
    return {
        "score": score,
        "tokens": len(tokens),
        "matched_tokens": matched_tokens,
        "density": density,
        "diversity": diversity,
        "concepts": concepts,
    }


def terminology_score(
    caption: str, lexicon: ConceptLinker, density_cap: float = DEFAULT_DENSITY_CAP
) -> float:
    """Capped term density blended with concept diversity, in [0, 1].

    Example:
        >>> terminology_score("pneumothorax", lexicon)
        1.0
    """
    return float(terminology_details(caption, lexicon, density_cap)["score"])


# ----------------------------------------------------------------------- clinical


def _contains(tokens: list[str], phrase: Sequence[str]) -> bool:
    n = len(phrase)
    return n > 0 and any(tokens[i : i + n] == list(phrase) for i in range(len(tokens) - n + 1))


def _mentioned(tokens: list[str], lexicon: ConceptLinker, category: ConceptCategory) -> list[str]:
    return [e.term for e in lexicon.terms(category) if _contains(tokens, e.tokens)]


def _measurement_credit(caption: str, tokens: list[str]) -> float:
    if _NUMERIC_MEASUREMENT.search(caption):
        return 1.0
    if any(t in _SIZE_WORDS for t in tokens):
        return 0.5
    return 0.0


def clinical_details(
    caption: str, analysis: QuestionAnalysis, lexicon: ConceptLinker
) -> dict[str, Any]:
    tokens = tokenize(caption)
    if not tokens:
        return {"score": 0.0, "localization": 0.0, "finding": 0.0, "measurement": None}

    anatomy = _mentioned(tokens, lexicon, ConceptCategory.ANATOMY)
    focus = analysis.top_terms(ConceptCategory.ANATOMY)
    if focus:
        anatomy_ok = any(_contains(tokens, tokenize(term)) for term in focus)
    else:
        anatomy_ok = bool(anatomy)
    laterality = _mentioned(tokens, lexicon, ConceptCategory.LOCATION)
    needs_side = analysis.question_type == QuestionType.LOCATION
    localization = float(anatomy_ok and (bool(laterality) or not needs_side))

    pathology = _mentioned(tokens, lexicon, ConceptCategory.PATHOLOGY)
    normality = bool(_NORMALITY.search(caption))
    finding = float(bool(pathology) or normality)

    checks = [localization, finding]
    measurement: Optional[float] = None
    if analysis.question_type not in MEASUREMENT_INAPPLICABLE:
        measurement = _measurement_credit(caption, tokens)
        checks.append(measurement)

    return {
        "score": sum(checks) / len(checks),
        "localization": localization,
        "finding": finding,
        "measurement": measurement,
        "anatomy_terms": anatomy,
        "laterality_terms": laterality,
        "pathology_terms": pathology,
        "normality_statement": normality,
    }


def clinical_score(caption: str, analysis: QuestionAnalysis, lexicon: ConceptLinker) -> float:
    """Mean of the localization, finding and (when applicable) measurement checks."""
    return float(clinical_details(caption, analysis, lexicon)["score"])


# ---------------------------------------------------------------------- structure


def structure_details(caption: str) -> dict[str, Any]:
    text = (caption or "").strip()
    tokens = tokenize(text)
    if not tokens:
        return {
            "score": 0.0,
            "complete": False,
            "declarative": False,
            "technique": False,
            "ordered": False,
        }

    complete = text[-1] in ".!" and len(tokens) >= 5
    declarative = "?" not in text and not any(t in _FIRST_PERSON for t in tokens)
    technique = bool(match_modality_families(text)) or any(t in _TECHNIQUE_WORDS for t in tokens)
    findings = _FINDINGS_CUE.search(text)
    impression = _IMPRESSION_CUE.search(text)
    ordered = findings.start() < impression.start() if findings and impression else True

    checks = [complete, declarative, technique, ordered]
    return {
        "score": sum(checks) / len(checks),
        "complete": complete,
        "declarative": declarative,
        "technique": technique,
        "ordered": ordered,
    }


def structure_score(caption: str) -> float:
    """Fraction of four reporting-convention checks the caption passes."""
    return float(structure_details(caption)["score"])


# ----------------------------------------------------------------------- evaluate


class Evaluator:
    """Scores captions with fixed providers, lexicon and weights."""

    def __init__(
        self,
        multimodal: MultimodalEmbeddingProvider,
        analyzer: QuestionAnalyzer,
        lexicon: ConceptLinker,
        config: Optional[EvaluationConfig] = None,
    ) -> None:
        self.multimodal = multimodal
        self.analyzer = analyzer
        self.lexicon = lexicon
        self.config = config or EvaluationConfig()

    @property
    def weights(self) -> EvalWeights:
        return self.config.weights

    def evaluate(
        self, image: ImageSample, question: str, caption: str, record_id: str = ""
    ) -> EvaluationReport:
        s_image_text, s_question_text, _ = relevance(
            image, question, caption, self.multimodal, self.weights
        )
        analysis = self.analyzer.analyze(question)
        terminology = terminology_details(caption, self.lexicon, self.config.density_cap)
        clinical = clinical_details(caption, analysis, self.lexicon)
        structure = structure_details(caption)
        return EvaluationReport.from_scores(
            s_image_text,
            s_question_text,
            float(terminology["score"]),
            float(clinical["score"]),
            float(structure["score"]),
            weights=self.weights,
            per_check={
                "question_type": analysis.question_type.value,
                "terminology": terminology,
                "clinical": clinical,
                "structure": structure,
            },
            record_id=record_id or image.record_id,
        )


def evaluate(
    image: ImageSample,
    question: str,
    caption: str,
    multimodal: MultimodalEmbeddingProvider,
    analyzer: QuestionAnalyzer,
    lexicon: ConceptLinker,
    weights: Optional[EvalWeights] = None,
    density_cap: float = DEFAULT_DENSITY_CAP,
) -> EvaluationReport:
    config = EvaluationConfig(weights=weights or EvalWeights(), density_cap=density_cap)
    return Evaluator(multimodal, analyzer, lexicon, config).evaluate(image, question, caption)


# -------------------------------------------------------------------------- batch


@dataclass(frozen=True)
class BatchItem:
    record_id: str
    image_path: str
    question: str
    caption: str


@dataclass
class BatchReport:
    records: list[EvaluationReport]
    aggregate: dict[str, float]
    dataset: str = "default"

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset,
            "count": len(self.records),
            "records": [r.to_dict() for r in self.records],
            "aggregate": self.aggregate,
        }


def aggregate_reports(reports: Sequence[EvaluationReport]) -> dict[str, float]:
    """Unweighted mean of every score column; exact summation keeps it order-free."""
    if not reports:
        raise DataError("Cannot aggregate an empty batch")
    return {
        name: math.fsum(getattr(r, name) for r in reports) / len(reports) for name in SCORE_FIELDS
    }


def evaluate_batch(
    items: Sequence[tuple[str, ImageSample, str, str]],
    evaluator: Evaluator,
    dataset: str = "default",
) -> BatchReport:
    """Evaluate (record_id, image, question, caption) tuples and aggregate.

    Records are scored concurrently (``evaluation.max_workers``) and returned
    in input order.
    """
    if not items:
        raise DataError("Batch is empty")

    def run(item: tuple[str, ImageSample, str, str]) -> EvaluationReport:
        record_id, image, question, caption = item
        return evaluator.evaluate(image, question, caption, record_id=record_id)

    workers = max(1, evaluator.config.max_workers)
    if workers == 1 or len(items) == 1:
        reports = [run(item) for item in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run, items))
    return BatchReport(records=reports, aggregate=aggregate_reports(reports), dataset=dataset)


def read_batch_jsonl(path: Path) -> list[BatchItem]:
    """Read {record_id, image_path, question, caption} lines.

    Relative image paths resolve against the file's directory.

    Raises:
        IoError: If the file cannot be read
        ParseError: On malformed JSON, a missing field or a repeated record id
    """
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IoError(f"Cannot read {path}: {e}") from None

    items: list[BatchItem] = []
    seen: set[str] = set()
    for line_no, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", line=line_no) from None
        if not isinstance(obj, dict):
            raise ParseError("expected a JSON object", line=line_no)
        missing = [k for k in ("image_path", "question", "caption") if not obj.get(k)]
        if missing:
            raise ParseError(f"missing field(s): {', '.join(missing)}", line=line_no)
        record_id = str(obj.get("record_id", line_no))
        if record_id in seen:
            raise ParseError(f"duplicate record_id '{record_id}'", line=line_no)
        seen.add(record_id)
        image_path = Path(str(obj["image_path"]))
        if not image_path.is_absolute():
            image_path = path.parent / image_path
        items.append(
            BatchItem(
                record_id=record_id,
                image_path=str(image_path),
                question=str(obj["question"]),
                caption=str(obj["caption"]),
            )
        )
    if not items:
        raise ParseError(f"{path} holds no records")
    return items


def report_frame(batch: BatchReport) -> pd.DataFrame:
    """One aggregate row per dataset, columns in results-table order."""
    row: dict[str, Any] = {"dataset": batch.dataset, "records": len(batch.records)}
    for name, column in TABLE_COLUMNS.items():
        row[column] = batch.aggregate[name]
    return pd.DataFrame([row], columns=["dataset", "records", *TABLE_COLUMNS.values()])


def write_report(batch: BatchReport, out_dir: Path) -> tuple[Path, Path]:
    """Write report.json (per-record + aggregate) and report.csv (aggregate row)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    csv_path = out_dir / "report.csv"
    try:
        json_path.write_text(
            json.dumps(batch.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        report_frame(batch).to_csv(csv_path, index=False, float_format="%.6f")
    except OSError as e:
        raise IoError(f"Cannot write report to {out_dir}: {e}") from None
    logger.info(f"Wrote {json_path} and {csv_path}")
    return json_path, csv_path
