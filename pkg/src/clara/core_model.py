"""Benchmark domain types: languages, questions, paired benchmark sets, outcomes."""

from __future__ import annotations

import enum
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping

from .errors import DuplicateItem, MalformedItem, PairingViolation, UnknownLanguage

OPTION_KEYS: tuple[str, ...] = ("A", "B", "C", "D")
ABSTAIN = "Abstain"


class Language(str, enum.Enum):
    EN = "EN"
    ES = "ES"
    PT = "PT"
    FIL = "FIL"
    ZH = "ZH"
    HI = "HI"
    FR = "FR"

    @property
    def display_name(self) -> str:
        return _LANGUAGE_NAMES[self]

    def __str__(self) -> str:
        return self.value


_LANGUAGE_NAMES = {
    Language.EN: "English",
    Language.ES: "Spanish",
    Language.PT: "Portuguese",
    Language.FIL: "Filipino",
    Language.ZH: "Mandarin Chinese",
    Language.HI: "Hindi",
    Language.FR: "French",
}

# Column order used by every report.
LANGUAGE_ORDER: tuple[Language, ...] = tuple(Language)

_LANGUAGE_ALIASES = {"HIN": Language.HI, "TL": Language.FIL, "TGL": Language.FIL}


def parse_language(code: str | Language) -> Language:
    if isinstance(code, Language):
        return code
    key = str(code).strip().upper()
    if key in _LANGUAGE_ALIASES:
        return _LANGUAGE_ALIASES[key]
    try:
        return Language(key)
    except ValueError:
        valid = ", ".join(lang.value for lang in Language)
        raise UnknownLanguage(f"unknown language code {code!r} (expected one of {valid})") from None


def language_rank(lang: Language) -> int:
    return LANGUAGE_ORDER.index(lang)


class Category(str, enum.Enum):
    BASIC = "Basic"
    CLINICAL_SURGICAL = "ClinicalSurgical"

    def __str__(self) -> str:
        return self.value


def parse_category(name: str | Category) -> Category:
    """Case- and punctuation-insensitive: 'clinical-surgical' and 'CLINICAL_SURGICAL' both work."""
    if isinstance(name, Category):
        return name
    squashed = re.sub(r"[^a-z]", "", str(name).lower())
    for cat in Category:
        if cat.value.lower() == squashed:
            return cat
    if squashed in ("basicscience", "basicsciences"):
        return Category.BASIC
    raise MalformedItem(f"unknown category {name!r}")


@dataclass(frozen=True)
class QuestionItem:
    qid: str
    language: Language
    category: Category
    subtype: str
    stem: str
    options: Mapping[str, str]
    answer_key: str

    def __post_init__(self) -> None:
        if not isinstance(self.qid, str) or not self.qid.strip():
            raise MalformedItem("qid must be a non-empty string")
        object.__setattr__(self, "language", parse_language(self.language))
        object.__setattr__(self, "category", parse_category(self.category))
        if not isinstance(self.stem, str) or not self.stem.strip():
            raise MalformedItem(f"{self.qid}/{self.language}: empty question stem")
        if not isinstance(self.options, Mapping):
            raise MalformedItem(f"{self.qid}/{self.language}: options must be a mapping")
        keys = sorted(self.options)
        if keys != list(OPTION_KEYS):
            raise MalformedItem(
                f"{self.qid}/{self.language}: options must have keys A-D exactly, got {keys}"
            )
        for key in OPTION_KEYS:
            text = self.options[key]
            if not isinstance(text, str) or not text.strip():
                raise MalformedItem(f"{self.qid}/{self.language}: option {key} is empty")
        if self.answer_key not in OPTION_KEYS:
            raise MalformedItem(f"{self.qid}/{self.language}: answer key {self.answer_key!r} not in A-D")
        ordered = {key: self.options[key] for key in OPTION_KEYS}
        object.__setattr__(self, "options", MappingProxyType(ordered))

    def __hash__(self) -> int:
        return hash((self.qid, self.language))

    @property
    def cell(self) -> tuple[str, Language]:
        return (self.qid, self.language)

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "QuestionItem":
        try:
            return cls(
                qid=str(obj["qid"]),
                language=obj["language"],
                category=obj["category"],
                subtype=str(obj.get("subtype", "")),
                stem=obj["question"],
                options=obj["options"],
                answer_key=str(obj["answer"]).strip().upper(),
            )
        except KeyError as exc:
            raise MalformedItem(f"missing field {exc.args[0]!r}") from None

    def to_json(self) -> dict[str, Any]:
        return {
            "qid": self.qid,
            "language": self.language.value,
            "category": self.category.value,
            "subtype": self.subtype,
            "question": self.stem,
            "options": dict(self.options),
            "answer": self.answer_key,
        }


def _sort_key(item: QuestionItem) -> tuple[str, int]:
    return (item.qid, language_rank(item.language))


@dataclass(frozen=True)
class BenchmarkSet:
    """A paired benchmark. Build with :func:`validate_benchmark`, not directly."""

    items: tuple[QuestionItem, ...]
    languages: frozenset[Language]
    _cells: Mapping[tuple[str, Language], QuestionItem] = field(
        default=MappingProxyType({}), repr=False, compare=False
    )

    def __post_init__(self) -> None:
        object.__setattr__(self, "_cells", MappingProxyType({it.cell: it for it in self.items}))

    @property
    def qids(self) -> tuple[str, ...]:
        return tuple(sorted({it.qid for it in self.items}))

    @property
    def ordered_languages(self) -> tuple[Language, ...]:
        return tuple(lang for lang in LANGUAGE_ORDER if lang in self.languages)

    def get(self, qid: str, language: Language | str) -> QuestionItem:
        return self._cells[(qid, parse_language(language))]

    def category_of(self) -> dict[str, Category]:
        return {it.qid: it.category for it in self.items}

    def __len__(self) -> int:
        return len(self.items)

    def summary(self) -> str:
        # The published question count is ambiguous between items and qids; report both.
        return f"qids={len(self.qids)} languages={len(self.languages)} items={len(self.items)}"


def validate_benchmark(
    raw_items: Iterable[QuestionItem], languages: Iterable[Language | str] | None = None
) -> BenchmarkSet:
    """Check pairing across languages and return an ordered :class:`BenchmarkSet`.

    ``languages`` declares the expected language set; by default it is every
    language that occurs in the input. All violations are collected before raising.
    """
    items = list(raw_items)
    if not items:
        raise MalformedItem("benchmark is empty")
    for it in items:
        if not isinstance(it, QuestionItem):
            raise MalformedItem(f"expected QuestionItem, got {type(it).__name__}")

    counts = Counter(it.cell for it in items)
    dups = sorted(
        ((q, lang.value) for (q, lang), n in counts.items() if n > 1),
        key=lambda c: (c[0], language_rank(Language(c[1]))),
    )
    if dups:
        raise DuplicateItem(dups)

    declared = (
        frozenset(parse_language(lang) for lang in languages)
        if languages is not None
        else frozenset(it.language for it in items)
    )
    by_qid: dict[str, dict[Language, QuestionItem]] = defaultdict(dict)
    for it in items:
        by_qid[it.qid][it.language] = it

    missing: list[tuple[str, str]] = []
    mismatches: list[tuple[str, str]] = []
    ordered_langs = [lang for lang in LANGUAGE_ORDER if lang in declared]
    for qid in sorted(by_qid):
        cells = by_qid[qid]
        for lang in ordered_langs:
            if lang not in cells:
                missing.append((qid, lang.value))
        for lang in cells:
            if lang not in declared:
                missing.append((qid, f"undeclared:{lang.value}"))
        present = [cells[lang] for lang in LANGUAGE_ORDER if lang in cells]
        for attr, label in (("answer_key", "answer key"), ("category", "category"), ("subtype", "subtype")):
            if len({getattr(it, attr) for it in present}) > 1:
                mismatches.append((qid, label))
    if missing or mismatches:
        raise PairingViolation(missing, mismatches)

    return BenchmarkSet(items=tuple(sorted(items, key=_sort_key)), languages=declared)


def load_benchmark_jsonl(path: str | Path) -> list[QuestionItem]:
    """Read a UTF-8 JSON Lines benchmark file.

    Raises UnicodeDecodeError for non-UTF-8 input, ``json.JSONDecodeError`` for
    bad lines and :class:`MalformedItem` (with the line number) for bad fields.
    """
    text = Path(path).read_bytes().decode("utf-8")
    items = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise json.JSONDecodeError(f"line {lineno}: {exc.msg}", exc.doc, exc.pos) from None
        if not isinstance(obj, dict):
            raise MalformedItem(f"line {lineno}: expected a JSON object")
        try:
            items.append(QuestionItem.from_json(obj))
        except MalformedItem as exc:
            raise MalformedItem(f"line {lineno}: {exc}") from None
    return items


def write_benchmark_jsonl(items: Iterable[QuestionItem], path: str | Path) -> None:
    lines = [json.dumps(it.to_json(), ensure_ascii=False) for it in items]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class AnswerOutcome:
    qid: str
    language: Language
    predicted: str
    correct: bool
    method: str
    run_index: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "language", parse_language(self.language))
        if self.predicted not in OPTION_KEYS and self.predicted != ABSTAIN:
            raise ValueError(f"predicted must be A-D or {ABSTAIN}, got {self.predicted!r}")
        if self.predicted == ABSTAIN and self.correct:
            raise ValueError("an abstention can never be correct")
        if self.run_index < 0:
            raise ValueError("run_index must be >= 0")

    @classmethod
    def score(
        cls, item: QuestionItem, predicted: str, method: str, run_index: int = 0
    ) -> "AnswerOutcome":
        return cls(
            qid=item.qid,
            language=item.language,
            predicted=predicted,
            correct=predicted == item.answer_key,
            method=method,
            run_index=run_index,
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "qid": self.qid,
            "language": self.language.value,
            "predicted": self.predicted,
            "correct": self.correct,
            "method": self.method,
            "run_index": self.run_index,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "AnswerOutcome":
        return cls(
            qid=obj["qid"],
            language=obj["language"],
            predicted=obj["predicted"],
            correct=bool(obj["correct"]),
            method=obj["method"],
            run_index=int(obj["run_index"]),
        )
