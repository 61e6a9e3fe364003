"""Tests for the concept lexicon reader and linker."""

from pathlib import Path

import pytest

from medcap.errors import IoError, ParseError
from medcap.lexicon import (
    ConceptCategory,
    ConceptLinker,
    Lexicon,
    read_lexicon,
    read_term_list,
    tokenize,
)


def test_tokenize_keeps_compound_forms() -> None:
    assert tokenize("Chest X-ray shows a 3.5 cm mass.") == [
        "chest", "x-ray", "shows", "a", "3.5", "cm", "mass",
    ]
    assert tokenize("") == []


def test_read_lexicon_defaults_concept_id(tmp_path: Path) -> None:
    """Test a missing concept column falls back to the normalized term."""
    path = tmp_path / "lexicon.tsv"
    path.write_text("# comment\n\nanatomy\tLeft  Lung\npathology\tlesions\tlesion\n")

    entries = read_lexicon(path)

    assert [(e.category, e.concept_id, e.line) for e in entries] == [
        (ConceptCategory.ANATOMY, "left lung", 3),
        (ConceptCategory.PATHOLOGY, "lesion", 4),
    ]


@pytest.mark.parametrize(
    "content, line",
    [
        ("anatomy\tlung\norgan\theart\n", 2),
        ("anatomy\n", 1),
        ("anatomy\tlung\tlung\textra\n", 1),
        ("anatomy\tlung\nanatomy\t---\n", 2),
    ],
)
def test_read_lexicon_rejects_bad_rows(tmp_path: Path, content: str, line: int) -> None:
    path = tmp_path / "lexicon.tsv"
    path.write_text(content)

    with pytest.raises(ParseError) as exc_info:
        read_lexicon(path)

    assert exc_info.value.line == line


def test_read_lexicon_errors_on_missing_or_binary_file(tmp_path: Path) -> None:
    with pytest.raises(IoError):
        read_lexicon(tmp_path / "missing.tsv")

    binary = tmp_path / "binary.tsv"
    binary.write_bytes(b"\xff\xfe\x00anatomy")
    with pytest.raises(ParseError):
        read_lexicon(binary)


def test_link_prefers_longest_phrase() -> None:
    """Test greedy longest-match linking over the bundled lexicon."""
    lexicon = Lexicon.load()

    matches = lexicon.link(tokenize("Opacity in the left lung and both lungs"))
    concepts = [m.concept_id for m in matches]

    assert "left lung" in concepts
    assert concepts.count("lung") == 1
    assert "left" not in concepts


def test_load_with_extra_term_list(tmp_path: Path) -> None:
    """Test flat term lists add uncategorized entries."""
    extra = tmp_path / "terms.txt"
    extra.write_text("# extra\nground-glass opacity\n\n")

    lexicon = Lexicon.load(extra_terms=extra)
    matches = lexicon.link(tokenize("subtle ground-glass opacity"))

    assert [m.concept_id for m in matches] == ["ground-glass opacity"]
    assert matches[0].categories == {None}
    assert read_term_list(extra)[0].line == 2
    assert len(lexicon.terms(ConceptCategory.ANATOMY)) < len(lexicon.terms())


def test_bundled_lexicon_is_a_concept_linker() -> None:
    assert isinstance(Lexicon.load(), ConceptLinker)
