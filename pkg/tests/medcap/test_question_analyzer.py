"""Tests for question analysis and the concept dictionary."""

import logging
from pathlib import Path

import numpy as np
import pytest

from medcap.embeddings import HashingTextEmbedder
from medcap.errors import DataError, DimensionError, ParseError, ZeroVectorError
from medcap.lexicon import DEFAULT_LEXICON_PATH, ConceptCategory, LexiconEntry
from medcap.question_analyzer import (
    ConceptDictionary,
    FocusTerm,
    QuestionAnalyzer,
    QuestionType,
    analyze,
    build_dictionary,
    classify_question,
    cosine_similarity,
)


class TableProvider:
    """Text provider returning fixed vectors per text, zeros otherwise."""

    def __init__(self, table: dict[str, list[float]], dimension: int = 3) -> None:
        self.table = table
        self.dimension = dimension

    def embed(self, text: str) -> np.ndarray:
        return np.asarray(self.table.get(text, [0.0] * self.dimension), dtype=np.float64)


def _entry(category: str, term: str) -> LexiconEntry:
    return LexiconEntry(term=term, category=ConceptCategory(category), concept_id=term)


@pytest.fixture(scope="module")
def provider() -> HashingTextEmbedder:
    return HashingTextEmbedder()


@pytest.fixture(scope="module")
def dictionary(provider: HashingTextEmbedder) -> ConceptDictionary:
    return build_dictionary(DEFAULT_LEXICON_PATH, provider)


def test_cosine_similarity_basics() -> None:
    """Test identity, orthogonality and antiparallel vectors."""
    assert cosine_similarity([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_similarity([1.0, 1.0], [-2.0, -2.0]) == pytest.approx(-1.0, abs=1e-12)


def test_cosine_similarity_random_pairs() -> None:
    """Test identity, range and positive-scale invariance over 1000 random pairs."""
    rng = np.random.default_rng(0)
    for _ in range(1000):
        dim = int(rng.integers(2, 32))
        q = rng.normal(size=dim)
        c = rng.normal(size=dim)
        alpha = float(rng.uniform(1e-3, 1e3))
        value = cosine_similarity(q, c)

        assert -1.0 <= value <= 1.0
        assert cosine_similarity(q, q) == pytest.approx(1.0, abs=1e-12)
        assert cosine_similarity(q, alpha * c) == pytest.approx(value, abs=1e-12)


def test_cosine_similarity_errors() -> None:
    """Test dimension mismatch and zero vectors raise."""
    with pytest.raises(DimensionError):
        cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])
    with pytest.raises(ZeroVectorError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        cosine_similarity([1.0], [0.0])


def test_analyze_location_question(dictionary: ConceptDictionary, provider) -> None:
    """Test the worked example: laterality question about the lung."""
    analysis = analyze("Which side of the lung is abnormal?", dictionary, provider)

    assert analysis.question_type == QuestionType.LOCATION
    assert analysis.top_terms(ConceptCategory.ANATOMY, 1) == ["lung"]
    assert analysis.top_terms(ConceptCategory.PATHOLOGY, 1) == ["abnormal"]
    assert "side" in analysis.top_terms(ConceptCategory.LOCATION)
    top = analysis.focus_terms[ConceptCategory.ANATOMY][0]
    assert top == FocusTerm("lung", 1.0, lexical=True)


def test_analyze_limits_and_orders_terms(dictionary: ConceptDictionary, provider) -> None:
    """Test at most top_k terms per category, sorted by descending similarity."""
    analysis = QuestionAnalyzer(dictionary, provider, sim_threshold=0.0, top_k=3).analyze(
        "Is the left lung larger than the right lung?"
    )

    for terms in analysis.focus_terms.values():
        assert len(terms) <= 3
        sims = [t.similarity for t in terms]
        assert sims == sorted(sims, reverse=True)
    assert analysis.question_type == QuestionType.COMPARISON


def test_analyze_threshold_is_strict() -> None:
    """Test a similarity equal to the threshold is excluded."""
    provider = TableProvider({"q": [1.0, 0.0, 0.0], "edema": [1.0, 1.0, 0.0]})
    dictionary = ConceptDictionary.from_entries([_entry("pathology", "edema")], provider)
    threshold = cosine_similarity([1.0, 0.0, 0.0], [1.0, 1.0, 0.0])

    at = QuestionAnalyzer(dictionary, provider, sim_threshold=threshold).analyze("q")
    below = QuestionAnalyzer(dictionary, provider, sim_threshold=threshold - 1e-9).analyze("q")

    assert at.focus_terms[ConceptCategory.PATHOLOGY] == []
    assert below.top_terms(ConceptCategory.PATHOLOGY) == ["edema"]
    assert below.question_type == QuestionType.PATHOLOGY


def test_lexical_hit_without_embedding_signal() -> None:
    """Test a whole-word dictionary hit counts even when the embedding is zero."""
    provider = TableProvider({})
    dictionary = ConceptDictionary.from_entries([_entry("anatomy", "liver")], provider)

    analysis = QuestionAnalyzer(dictionary, provider).analyze("Is the liver enlarged?")

    assert analysis.focus_terms[ConceptCategory.ANATOMY] == [FocusTerm("liver", 1.0, True)]
    assert analysis.question_type == QuestionType.ANATOMY


def test_lexical_match_needs_whole_words() -> None:
    """Test a term inside a longer word is not a lexical hit."""
    provider = TableProvider({})
    dictionary = ConceptDictionary.from_entries([_entry("anatomy", "lung")], provider)

    analysis = QuestionAnalyzer(dictionary, provider).analyze("Any lungworm here?")

    assert not analysis.has_focus


def test_empty_dictionary_gives_other(provider) -> None:
    """Test no dictionary terms means no focus and type OTHER."""
    analysis = analyze("Is anything unusual here?", ConceptDictionary.empty(), provider)

    assert not analysis.has_focus
    assert all(terms == [] for terms in analysis.focus_terms.values())
    assert analysis.question_type == QuestionType.OTHER


def test_analyze_rejects_empty_question(dictionary: ConceptDictionary, provider) -> None:
    with pytest.raises(DataError):
        analyze("   ", dictionary, provider)


def test_classify_question_rules() -> None:
    """Test pattern priority and the fallback to the strongest focus category."""
    assert classify_question("Where is the mass?", {}) == QuestionType.LOCATION
    assert classify_question("Which side is larger than the other?", {}) == QuestionType.LOCATION
    assert classify_question("Is the heart bigger than normal?", {}) == QuestionType.COMPARISON
    assert classify_question("Is this an MRI?", {}) == QuestionType.MODALITY

    focus = {
        ConceptCategory.ANATOMY: [FocusTerm("heart", 0.6)],
        ConceptCategory.PATHOLOGY: [FocusTerm("effusion", 0.9)],
    }
    assert classify_question("Anything here?", focus) == QuestionType.PATHOLOGY
    tied = {
        ConceptCategory.ANATOMY: [FocusTerm("heart", 1.0, True)],
        ConceptCategory.PATHOLOGY: [FocusTerm("effusion", 1.0, True)],
    }
    assert classify_question("heart effusion", tied) == QuestionType.PATHOLOGY


def test_build_dictionary_one_term_per_category(tmp_path: Path, provider) -> None:
    path = tmp_path / "lexicon.tsv"
    path.write_text("anatomy\tlung\npathology\tnodule\nlocation\tleft\ncomparison\tlarger\n")

    dictionary = build_dictionary(path, provider)

    assert len(dictionary) == 4
    for category in ConceptCategory:
        assert len(dictionary.terms(category)) == 1
        assert np.linalg.norm(dictionary.terms(category)[0].embedding) == pytest.approx(1.0)


def test_build_dictionary_duplicate_term(tmp_path: Path, provider) -> None:
    path = tmp_path / "lexicon.tsv"
    path.write_text("anatomy\tlung\npathology\tnodule\nanatomy\tLung\n")

    with pytest.raises(ParseError) as exc_info:
        build_dictionary(path, provider)

    assert exc_info.value.line == 3


def test_build_dictionary_anatomy_only(tmp_path: Path, provider, caplog) -> None:
    path = tmp_path / "lexicon.tsv"
    path.write_text("# anatomy only\nanatomy\tlung\nanatomy\theart\n")

    with caplog.at_level(logging.WARNING):
        dictionary = build_dictionary(path, provider)

    assert [t.term for t in dictionary.terms(ConceptCategory.ANATOMY)] == ["lung", "heart"]
    assert dictionary.terms(ConceptCategory.PATHOLOGY) == ()
    assert "no pathology terms" in caplog.text


def test_analysis_to_dict(dictionary: ConceptDictionary, provider) -> None:
    data = analyze("Where is the nodule?", dictionary, provider).to_dict()

    assert data["question_type"] == "LOCATION"
    assert set(data["focus_terms"]) == {"anatomy", "pathology", "location", "comparison"}
