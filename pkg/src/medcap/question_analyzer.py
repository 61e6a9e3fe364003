"""Clinical focus extraction from free-text questions.

A question is embedded and compared against cached concept embeddings per
category; dictionary terms that occur verbatim in the question are pinned to
similarity 1.0. The question type comes from interrogative patterns first,
then from the category of the strongest focus term.
"""

import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from medcap.data_io import match_modality_families
from medcap.embeddings import TextEmbeddingProvider, as_vector
from medcap.errors import DataError, DimensionError, ZeroVectorError
from medcap.lexicon import ConceptCategory, LexiconEntry, read_lexicon, tokenize

logger = logging.getLogger(__name__)

DEFAULT_SIM_THRESHOLD = 0.35
DEFAULT_TOP_K = 5


class QuestionType(str, Enum):
    MODALITY = "MODALITY"
    ANATOMY = "ANATOMY"
    PATHOLOGY = "PATHOLOGY"
    LOCATION = "LOCATION"
    COMPARISON = "COMPARISON"
    OTHER = "OTHER"


# Highest priority first; used when several rules or categories compete.
TYPE_PRIORITY: tuple[QuestionType, ...] = (
    QuestionType.LOCATION,
    QuestionType.COMPARISON,
    QuestionType.PATHOLOGY,
    QuestionType.ANATOMY,
    QuestionType.MODALITY,
)

CATEGORY_TYPES: dict[ConceptCategory, QuestionType] = {
    ConceptCategory.ANATOMY: QuestionType.ANATOMY,
    ConceptCategory.PATHOLOGY: QuestionType.PATHOLOGY,
    ConceptCategory.LOCATION: QuestionType.LOCATION,
    ConceptCategory.COMPARISON: QuestionType.COMPARISON,
}

TYPE_PATTERNS: dict[QuestionType, re.Pattern[str]] = {
    QuestionType.LOCATION: re.compile(
        r"\b(?:which\s+side|what\s+side|which\s+lobe|where|located)\b", re.IGNORECASE
    ),
    QuestionType.COMPARISON: re.compile(
        r"\b(?:compare[ds]?|comparing|than|versus|vs|difference\s+between)\b", re.IGNORECASE
    ),
    QuestionType.MODALITY: re.compile(
        r"\b(?:modality|what\s+type\s+of\s+imaging|which\s+imaging)\b", re.IGNORECASE
    ),
}


def cosine_similarity(q: Sequence[float], c: Sequence[float]) -> float:
    """Cosine of the angle between two vectors, in [-1, 1].

    Raises:
        DimensionError: If the vectors differ in length or are not 1-D
        ZeroVectorError: If either vector has zero norm

    Example:
        >>> round(cosine_similarity([1.0, 0.0], [1.0, 1.0]), 4)
        0.7071
    """
    a = np.asarray(q, dtype=np.float64)
    b = np.asarray(c, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"Cannot compare vectors of shape {a.shape} and {b.shape}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVectorError("Cosine similarity is undefined for a zero-norm vector")
    value = float(np.dot(a, b)) / (norm_a * norm_b)
    return min(1.0, max(-1.0, value))


@dataclass(frozen=True)
class ConceptTerm:
    term: str
    concept_id: str
    embedding: np.ndarray = field(repr=False, compare=False)

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(tokenize(self.term))


@dataclass(frozen=True)
class FocusTerm:
    term: str
    similarity: float
    lexical: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"term": self.term, "similarity": self.similarity, "lexical": self.lexical}


class ConceptDictionary:
    """Per-category concept terms with cached embeddings. Immutable once built."""

    def __init__(self, categories: dict[ConceptCategory, list[ConceptTerm]]) -> None:
        self._categories: dict[ConceptCategory, tuple[ConceptTerm, ...]] = {
            category: tuple(categories.get(category, ())) for category in ConceptCategory
        }
        for category, terms in self._categories.items():
            names = [t.term.lower() for t in terms]
            if len(names) != len(set(names)):
                raise DataError(f"Duplicate terms in category {category.value}")

    @classmethod
    def empty(cls) -> "ConceptDictionary":
        return cls({})

    @classmethod
    def from_entries(
        cls, entries: Sequence[LexiconEntry], provider: TextEmbeddingProvider
    ) -> "ConceptDictionary":
        categories: dict[ConceptCategory, list[ConceptTerm]] = {c: [] for c in ConceptCategory}
        for entry in entries:
            if entry.category is None:
                continue
            embedding = as_vector(provider.embed(entry.term))
            categories[entry.category].append(
                ConceptTerm(term=entry.term, concept_id=entry.concept_id, embedding=embedding)
            )
        return cls(categories)

    def terms(self, category: ConceptCategory) -> tuple[ConceptTerm, ...]:
        return self._categories[category]

    def __len__(self) -> int:
        return sum(len(terms) for terms in self._categories.values())


def build_dictionary(lexicon_file: Path, provider: TextEmbeddingProvider) -> ConceptDictionary:
    """Load a category/term TSV and cache one embedding per term.

    Raises:
        ParseError: On a malformed line or a duplicate term within a category
    """
    entries = read_lexicon(Path(lexicon_file))
    dictionary = ConceptDictionary.from_entries(entries, provider)
    logger.info(f"Built concept dictionary with {len(dictionary)} terms from {lexicon_file}")
    return dictionary


@dataclass
class QuestionAnalysis:
    question_type: QuestionType
    focus_terms: dict[ConceptCategory, list[FocusTerm]]
    raw_question: str

    def top_terms(self, category: ConceptCategory, limit: Optional[int] = None) -> list[str]:
        terms = [f.term for f in self.focus_terms.get(category, [])]
        return terms if limit is None else terms[:limit]

    @property
    def has_focus(self) -> bool:
        return any(self.focus_terms.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "question": self.raw_question,
            "question_type": self.question_type.value,
            "focus_terms": {
                category.value: [f.to_dict() for f in self.focus_terms.get(category, [])]
                for category in ConceptCategory
            },
        }


def _contains_phrase(tokens: list[str], phrase: tuple[str, ...]) -> bool:
    n = len(phrase)
    return n > 0 and any(tuple(tokens[i : i + n]) == phrase for i in range(len(tokens) - n + 1))


def classify_question(
    question: str, focus_terms: dict[ConceptCategory, list[FocusTerm]]
) -> QuestionType:
    """Pick the question type: pattern rules by priority, else the strongest focus category."""
    fired = {qtype for qtype, pattern in TYPE_PATTERNS.items() if pattern.search(question)}
    if match_modality_families(question):
        fired.add(QuestionType.MODALITY)
    for qtype in TYPE_PRIORITY:
        if qtype in fired:
            return qtype

    best: Optional[tuple[float, int, QuestionType]] = None
    for category, terms in focus_terms.items():
        if not terms:
            continue
        qtype = CATEGORY_TYPES[category]
        key = (terms[0].similarity, -TYPE_PRIORITY.index(qtype), qtype)
        if best is None or key[:2] > best[:2]:
            best = key
    return best[2] if best is not None else QuestionType.OTHER


class QuestionAnalyzer:
    """Stateless analyzer bound to one dictionary and one text provider."""

    def __init__(
        self,
        dictionary: ConceptDictionary,
        provider: TextEmbeddingProvider,
        sim_threshold: float = DEFAULT_SIM_THRESHOLD,
        top_k: int = DEFAULT_TOP_K,
    ) -> None:
        self.dictionary = dictionary
        self.provider = provider
        self.sim_threshold = sim_threshold
        self.top_k = top_k

    def analyze(self, question: str) -> QuestionAnalysis:
        if not question or not question.strip():
            raise DataError("Question must be non-empty")

        tokens = tokenize(question)
        q_vec = as_vector(self.provider.embed(question))
        if not np.all(np.isfinite(q_vec)):
            raise DataError("Text provider returned a non-finite embedding")
        has_signal = float(np.linalg.norm(q_vec)) > 0.0
        if not has_signal:
            logger.debug(f"Question has no embeddable content: {question!r}")

        focus: dict[ConceptCategory, list[FocusTerm]] = {}
        for category in ConceptCategory:
            found: list[FocusTerm] = []
            for concept in self.dictionary.terms(category):
                if _contains_phrase(tokens, concept.tokens):
                    found.append(FocusTerm(concept.term, 1.0, lexical=True))
                    continue
                if not has_signal or not np.any(concept.embedding):
                    continue
                similarity = cosine_similarity(q_vec, concept.embedding)
                if similarity > self.sim_threshold and math.isfinite(similarity):
                    found.append(FocusTerm(concept.term, similarity))
            # Lexical hits first among equal scores, then longer terms, then name.
            found.sort(key=lambda f: (-f.similarity, not f.lexical, -len(f.term), f.term))
            focus[category] = found[: self.top_k]

        return QuestionAnalysis(
            question_type=classify_question(question, focus),
            focus_terms=focus,
            raw_question=question,
        )


def analyze(
    question: str,
    dictionary: ConceptDictionary,
    provider: TextEmbeddingProvider,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
    top_k: int = DEFAULT_TOP_K,
) -> QuestionAnalysis:
    """Extract question type and per-category focus terms.

    Example:
        >>> analysis = analyze("Which side of the lung is abnormal?", dictionary, provider)
        >>> analysis.question_type
        <QuestionType.LOCATION: 'LOCATION'>
    """
    return QuestionAnalyzer(dictionary, provider, sim_threshold, top_k).analyze(question)
