"""Ophthalmology term lookup and inline expansion."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import SpanMismatch


@dataclass(frozen=True)
class JargonEntry:
    term: str
    expansion: str
    weight: float = 1.0
    aliases: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if not self.term.strip():
            raise ValueError("term must be non-empty")
        if not self.expansion.strip():
            raise ValueError(f"{self.term}: expansion must be non-empty")
        if not 0.0 <= float(self.weight) <= 1.0:
            raise ValueError(f"{self.term}: weight must lie in [0, 1]")
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "aliases", frozenset(self.aliases))

    @property
    def surface_forms(self) -> list[str]:
        return [self.term, *sorted(self.aliases)]


@dataclass(frozen=True)
class TermMatch:
    term: str  # canonical, case-folded dictionary key
    start: int
    end: int
    surface: str  # text as it appears in the source
    expansion: str
    weight: float


def _fold(text: str) -> str:
    return " ".join(text.casefold().split())


class JargonDictionary:
    def __init__(self, entries: Iterable[JargonEntry]):
        self.entries: dict[str, JargonEntry] = {}
        self._surface: dict[str, str] = {}
        for entry in entries:
            key = _fold(entry.term)
            for form in entry.surface_forms:
                folded = _fold(form)
                if folded in self._surface:
                    raise ValueError(f"surface form {form!r} is defined twice")
                self._surface[folded] = key
            self.entries[key] = entry
        forms = sorted(self._surface, key=lambda f: (-len(f), f))
        if forms:
            alternation = "|".join(r"\s+".join(re.escape(w) for w in f.split()) for f in forms)
            self._pattern = re.compile(rf"(?<!\w)(?:{alternation})(?!\w)", re.IGNORECASE)
        else:
            self._pattern = None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, text: str) -> bool:
        return _fold(text) in self._surface

    def lookup(self, text: str) -> tuple[str, JargonEntry] | None:
        key = self._surface.get(_fold(text))
        if key is None:
            return None
        return key, self.entries[key]

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "JargonDictionary":
        return cls(_parse_lines(Path(path).read_text(encoding="utf-8"), str(path)))

    @classmethod
    def seed(cls) -> "JargonDictionary":
        """The bundled ophthalmology glossary."""
        text = resources.files("clara.data").joinpath("ophthalmology_jargon.jsonl").read_text(encoding="utf-8")
        return cls(_parse_lines(text, "ophthalmology_jargon.jsonl"))


def _parse_lines(text: str, origin: str) -> list[JargonEntry]:
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            entries.append(
                JargonEntry(
                    term=obj["term"],
                    expansion=obj["expansion"],
                    weight=obj.get("weight", 1.0),
                    aliases=frozenset(obj.get("aliases", ())),
                )
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{origin}: line {lineno}: {exc}") from None
    return entries


def identify_terms(text: str, dictionary: JargonDictionary) -> list[TermMatch]:
    """Leftmost-longest, case-insensitive, whole-word dictionary matches."""
    if dictionary._pattern is None:
        return []
    out = []
    for m in dictionary._pattern.finditer(text):
        found = dictionary.lookup(m.group(0))
        if found is None:  # casefold/IGNORECASE disagreement on exotic characters
            continue
        key, entry = found
        out.append(TermMatch(key, m.start(), m.end(), m.group(0), entry.expansion, entry.weight))
    return out


def _check_spans(text: str, matches: Sequence[TermMatch]) -> None:
    prev_end = 0
    for m in matches:
        if not (prev_end <= m.start < m.end <= len(text)):
            raise SpanMismatch(f"span {m.start}:{m.end} for {m.term!r} is out of order or out of range")
        if text[m.start : m.end] != m.surface:
            raise SpanMismatch(f"text at {m.start}:{m.end} is not {m.surface!r}")
        prev_end = m.end


def inline_insertions(text: str, matches: Sequence[TermMatch]) -> list[tuple[int, str]]:
    """(offset in ``text``, inserted string) for each first occurrence of a term."""
    _check_spans(text, matches)
    seen: set[str] = set()
    out = []
    for m in matches:
        if m.term in seen:
            continue
        seen.add(m.term)
        out.append((m.end, f" ({m.expansion})"))
    return out


def annotate_inline(text: str, matches: Sequence[TermMatch]) -> str:
    pieces = []
    cursor = 0
    for offset, insert in inline_insertions(text, matches):
        pieces.append(text[cursor:offset])
        pieces.append(insert)
        cursor = offset
    pieces.append(text[cursor:])
    return "".join(pieces)
