"""Clinical concept lexicon: TSV reader, tokenizer and longest-match linker.

Lexicon files are UTF-8 TSV with ``category<TAB>term[<TAB>concept_id]`` rows,
``#`` comments and blank lines. Categories are anatomy, pathology, location
and comparison.
"""

import logging
import re
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Protocol, runtime_checkable

from medcap.errors import IoError, ParseError

logger = logging.getLogger(__name__)

DEFAULT_LEXICON_PATH = Path(__file__).parent / "resources" / "lexicon.tsv"

TOKEN_PATTERN = re.compile(r"[a-z0-9]+(?:[-.'][a-z0-9]+)*")


class ConceptCategory(str, Enum):
    ANATOMY = "anatomy"
    PATHOLOGY = "pathology"
    LOCATION = "location"
    COMPARISON = "comparison"


@dataclass(frozen=True)
class LexiconEntry:
    term: str
    category: Optional[ConceptCategory]
    concept_id: str
    line: int = 0

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(tokenize(self.term))


@dataclass(frozen=True)
class PhraseMatch:
    start: int
    end: int
    entries: tuple[LexiconEntry, ...]

    @property
    def concept_id(self) -> str:
        return self.entries[0].concept_id

    @property
    def categories(self) -> set[Optional[ConceptCategory]]:
        return {e.category for e in self.entries}

    @property
    def length(self) -> int:
        return self.end - self.start


def tokenize(text: str) -> list[str]:
    """Lower-case word tokens; hyphenated and decimal forms stay whole ("x-ray", "3.5")."""
    return TOKEN_PATTERN.findall((text or "").lower())


def _read_lines(path: Path) -> list[str]:
    try:
        return path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise IoError(f"Lexicon file not found: {path}") from None
    except UnicodeDecodeError as e:
        raise ParseError(f"{path} is not valid UTF-8: {e}") from None
    except OSError as e:
        raise IoError(f"Cannot read lexicon {path}: {e}") from None


def read_lexicon(path: Path) -> list[LexiconEntry]:
    """Parse a category/term TSV file.

    Raises:
        ParseError: On a malformed row, unknown category or duplicate term (with line number)
    """
    entries: list[LexiconEntry] = []
    seen: dict[ConceptCategory, set[str]] = defaultdict(set)
    for line_no, raw in enumerate(_read_lines(path), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        columns = [c.strip() for c in raw.rstrip("\r\n").split("\t")]
        if len(columns) not in (2, 3):
            raise ParseError(
                f"expected 'category<TAB>term[<TAB>concept_id]', got {len(columns)} columns",
                line=line_no,
            )
        try:
            category = ConceptCategory(columns[0].lower())
        except ValueError:
            raise ParseError(f"unknown category '{columns[0]}'", line=line_no) from None
        term = columns[1]
        if not tokenize(term):
            raise ParseError("empty term", line=line_no)
        key = " ".join(tokenize(term))
        if key in seen[category]:
            raise ParseError(f"duplicate term '{term}' in {category.value}", line=line_no)
        seen[category].add(key)
        concept_id = columns[2] if len(columns) == 3 and columns[2] else key
        entries.append(
            LexiconEntry(term=term, category=category, concept_id=concept_id, line=line_no)
        )

    for category in ConceptCategory:
        if not seen[category]:
            logger.warning(f"Lexicon {path} has no {category.value} terms")
    return entries


def read_term_list(path: Path) -> list[LexiconEntry]:
    """Parse a flat term list (one term per line, ``#`` comments)."""
    entries: list[LexiconEntry] = []
    for line_no, raw in enumerate(_read_lines(path), start=1):
        term = raw.strip()
        if not term or term.startswith("#"):
            continue
        key = " ".join(tokenize(term))
        if key:
            entries.append(LexiconEntry(term=term, category=None, concept_id=key, line=line_no))
    return entries


@runtime_checkable
class ConceptLinker(Protocol):
    """Maps token sequences onto lexicon concepts.

    Implementations return non-overlapping matches in token order and list
    their vocabulary by category. A UMLS-backed linker can stand in for
    ``Lexicon`` as long as it honours both calls.
    """

    def link(self, tokens: list[str]) -> list[PhraseMatch]: ...

    def terms(self, category: Optional[ConceptCategory] = None) -> list[LexiconEntry]: ...


class Lexicon:
    """Phrase index over lexicon entries with greedy longest-match linking."""

    def __init__(self, entries: Iterable[LexiconEntry]) -> None:
        self.entries: tuple[LexiconEntry, ...] = tuple(entries)
        index: dict[tuple[str, ...], list[LexiconEntry]] = defaultdict(list)
        for entry in self.entries:
            if entry.tokens:
                index[entry.tokens].append(entry)
        self._index = {phrase: tuple(found) for phrase, found in index.items()}
        self.max_phrase_length = max((len(p) for p in self._index), default=0)

    @classmethod
    def load(cls, path: Optional[Path] = None, extra_terms: Optional[Path] = None) -> "Lexicon":
        """Load the TSV lexicon (bundled default when path is None) plus an optional term list."""
        entries = read_lexicon(path or DEFAULT_LEXICON_PATH)
        if extra_terms is not None:
            entries += read_term_list(extra_terms)
        return cls(entries)

    def terms(self, category: Optional[ConceptCategory] = None) -> list[LexiconEntry]:
        return [e for e in self.entries if category is None or e.category == category]

    def link(self, tokens: list[str]) -> list[PhraseMatch]:
        """Greedy left-to-right longest-match linking of token spans to entries."""
        matches: list[PhraseMatch] = []
        i = 0
        while i < len(tokens):
            for length in range(min(self.max_phrase_length, len(tokens) - i), 0, -1):
                phrase = tuple(tokens[i : i + length])
                if phrase in self._index:
                    matches.append(PhraseMatch(i, i + length, self._index[phrase]))
                    i += length
                    break
            else:
                i += 1
        return matches
