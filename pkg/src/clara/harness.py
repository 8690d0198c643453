"""Run answering methods over a benchmark and report accuracy and gap-vs-English."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .core_model import (
    LANGUAGE_ORDER,
    AnswerOutcome,
    BenchmarkSet,
    Category,
    Language,
    language_rank,
    parse_category,
    parse_language,
)
from .errors import EmptyFilter, IndexRequired, IoFailure, MissingEnglishRow, VersionMismatch
from .pipeline import TRACE_VERSION, PipelineConfig, PipelineTrace, Ports, run_pipeline

logger = logging.getLogger(__name__)

METHOD_NAMES = ("direct", "translate_cot", "web_toolcall", "clara", "ablation")
DISPLAY_NAMES = {
    "direct": "Direct Inference",
    "translate_cot": "Translate-COT",
    "web_toolcall": "Web-ToolCall",
    "clara": "CLARA",
}
REPORT_VERSION = 1
ALL = "all"


@dataclass(frozen=True)
class MethodSpec:
    name: str
    pipeline_config: PipelineConfig
    runs: int = 8
    label: str = ""

    def __post_init__(self) -> None:
        if self.name not in METHOD_NAMES:
            raise ValueError(f"unknown method {self.name!r}")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if not self.label:
            object.__setattr__(self, "label", self.default_label())

    def default_label(self) -> str:
        if self.name == "ablation":
            return f"ablation[{self.pipeline_config.label}]"
        return self.name

    @property
    def display_name(self) -> str:
        return DISPLAY_NAMES.get(self.name, self.label)

    @property
    def uses_index(self) -> bool:
        return self.pipeline_config.enable_basic_rag

    @property
    def uses_search(self) -> bool:
        return self.pipeline_config.enable_websearch

    @classmethod
    def direct(cls, runs: int = 8, **cfg) -> "MethodSpec":
        return cls("direct", PipelineConfig.ablation(0, **cfg), runs)

    @classmethod
    def translate_cot(cls, runs: int = 8, **cfg) -> "MethodSpec":
        return cls("translate_cot", PipelineConfig.ablation(1, **cfg), runs)

    @classmethod
    def web_toolcall(cls, runs: int = 8, **cfg) -> "MethodSpec":
        # search on the question as written, no translation
        config = PipelineConfig.ablation(0, enable_websearch=True, web_query_source="original", **cfg)
        return cls("web_toolcall", config, runs)

    @classmethod
    def clara(cls, runs: int = 8, **cfg) -> "MethodSpec":
        return cls("clara", PipelineConfig.ablation(5, **cfg), runs)

    @classmethod
    def ablation(cls, level: int, runs: int = 8, **cfg) -> "MethodSpec":
        return cls("ablation", PipelineConfig.ablation(level, **cfg), runs)

    @classmethod
    def named(cls, name: str, runs: int = 8, level: int | None = None, **cfg) -> "MethodSpec":
        if name == "ablation":
            if level is None:
                raise ValueError("ablation needs a level in 0..5")
            return cls.ablation(level, runs, **cfg)
        factory = {"direct": cls.direct, "translate_cot": cls.translate_cot,
                   "web_toolcall": cls.web_toolcall, "clara": cls.clara}.get(name)
        if factory is None:
            raise ValueError(f"unknown method {name!r}; expected one of {', '.join(METHOD_NAMES)}")
        return factory(runs, **cfg)


@dataclass
class MethodRun:
    spec: MethodSpec
    outcomes: list[AnswerOutcome]
    traces: list[PipelineTrace] = field(default_factory=list)

    @property
    def llm_calls(self) -> int:
        return sum(t.llm_call_count for t in self.traces)


def check_ports(spec: MethodSpec, ports: Ports) -> None:
    if spec.uses_index and ports.index is None:
        raise IndexRequired(f"method {spec.label} retrieves from a vector index; run ingest-corpus first")
    if spec.uses_search and ports.search is None:
        raise IndexRequired(f"method {spec.label} uses web search; configure search.kind")


def run_method(bench: BenchmarkSet, spec: MethodSpec, ports: Ports, parallelism: int = 1) -> MethodRun:
    """Answer every item once per run index. Results are ordered (qid, language, run)."""
    check_ports(spec, ports)
    jobs = [(item, r) for item in bench.items for r in range(spec.runs)]

    def work(job):
        item, r = job
        return run_pipeline(item, spec.pipeline_config, ports, spec.label, r)

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]
    order = sorted(range(len(jobs)), key=lambda i: (jobs[i][0].qid, language_rank(jobs[i][0].language), jobs[i][1]))
    return MethodRun(spec, [results[i][0] for i in order], [results[i][1] for i in order])


# -- metrics --------------------------------------------------------------------

def round_half_away(x: float, places: int = 1) -> float:
    """Round half away from zero (2.25 -> 2.3, -2.25 -> -2.3) on the shortest decimal repr."""
    q = Decimal(1).scaleb(-places)
    value = Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP)
    result = float(value)
    return 0.0 if result == 0 else result


def _filter(
    outcomes: Iterable[AnswerOutcome],
    language: Language | str | None,
    category: Category | str | None,
    category_of: Mapping[str, Category] | None,
) -> list[AnswerOutcome]:
    lang = parse_language(language) if language is not None else None
    cat = parse_category(category) if category not in (None, ALL) else None
    if cat is not None and category_of is None:
        raise ValueError("a category filter needs the qid -> category mapping")
    return [
        o
        for o in outcomes
        if (lang is None or o.language is lang) and (cat is None or category_of[o.qid] is cat)
    ]


def run_accuracies(
    outcomes: Iterable[AnswerOutcome],
    language: Language | str | None = None,
    category: Category | str | None = None,
    category_of: Mapping[str, Category] | None = None,
) -> list[float]:
    selected = _filter(outcomes, language, category, category_of)
    if not selected:
        raise EmptyFilter(f"no outcomes for language={language} category={category}")
    by_run: dict[int, list[bool]] = defaultdict(list)
    for o in selected:
        by_run[o.run_index].append(o.correct)
    return [100.0 * sum(v) / len(v) for _, v in sorted(by_run.items())]


def accuracy(
    outcomes: Iterable[AnswerOutcome],
    language: Language | str | None = None,
    category: Category | str | None = None,
    category_of: Mapping[str, Category] | None = None,
) -> float:
    """Percent correct, averaged over run indices. Abstentions count as wrong. Unrounded."""
    per_run = run_accuracies(outcomes, language, category, category_of)
    return sum(per_run) / len(per_run)


def gap_vs_english(accuracies: Mapping[Language | str, float]) -> dict[Language, float]:
    """accuracy(L) - accuracy(EN) per language, rounded half away from zero to 0.1."""
    acc = {parse_language(k): v for k, v in accuracies.items()}
    if Language.EN not in acc:
        raise MissingEnglishRow("an EN accuracy is required to compute gaps")
    return {lang: round_half_away(acc[lang] - acc[Language.EN]) for lang in LANGUAGE_ORDER if lang in acc}


# -- reports --------------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    method: str
    display_name: str
    category: str
    language: Language
    accuracy: float
    gap: float
    run_accuracies: tuple[float, ...]
    n_outcomes: int

    def to_json(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "display_name": self.display_name,
            "category": self.category,
            "language": self.language.value,
            "accuracy": round_half_away(self.accuracy),
            "accuracy_raw": self.accuracy,
            "gap": None if self.gap != self.gap else self.gap,
            "run_accuracies": list(self.run_accuracies),
            "n_outcomes": self.n_outcomes,
        }


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[ReportRow, ...]
    languages: tuple[Language, ...]
    methods: tuple[str, ...]
    categories: tuple[str, ...]
    llm_calls: Mapping[str, int]
    runs: Mapping[str, int]

    def row(self, method: str, language: Language | str, category: str = ALL) -> ReportRow:
        lang = parse_language(language)
        for r in self.rows:
            if r.method == method and r.language is lang and r.category == category:
                return r
        raise KeyError((method, lang, category))

    def to_json(self) -> dict[str, Any]:
        return {
            "report_version": REPORT_VERSION,
            "languages": [lang.value for lang in self.languages],
            "methods": list(self.methods),
            "categories": list(self.categories),
            "runs": dict(self.runs),
            "llm_calls": dict(self.llm_calls),
            "rows": [r.to_json() for r in self.rows],
        }


def build_report(
    method_outcomes: Sequence[tuple[str, Sequence[AnswerOutcome]]],
    category_of: Mapping[str, Category],
    llm_calls: Mapping[str, int] | None = None,
    display_names: Mapping[str, str] | None = None,
) -> EvalReport:
    """Aggregate (method label, outcomes) pairs. Gaps come from unrounded means."""
    if not method_outcomes:
        raise EmptyFilter("no outcomes to report")
    rows: list[ReportRow] = []
    all_langs: set[Language] = set()
    cats_present = sorted({c.value for c in category_of.values()})
    categories = (ALL, *cats_present)
    runs = {}
    for method, outcomes in method_outcomes:
        outcomes = list(outcomes)
        runs[method] = len({o.run_index for o in outcomes})
        langs = [lang for lang in LANGUAGE_ORDER if any(o.language is lang for o in outcomes)]
        all_langs.update(langs)
        for cat in categories:
            acc: dict[Language, float] = {}
            per_run: dict[Language, list[float]] = {}
            counts: dict[Language, int] = {}
            for lang in langs:
                try:
                    per_run[lang] = run_accuracies(outcomes, lang, cat, category_of)
                except EmptyFilter:
                    continue
                acc[lang] = sum(per_run[lang]) / len(per_run[lang])
                counts[lang] = len(_filter(outcomes, lang, cat, category_of))
            gaps = gap_vs_english(acc) if Language.EN in acc else {}
            for lang in acc:
                rows.append(
                    ReportRow(
                        method,
                        (display_names or {}).get(method, DISPLAY_NAMES.get(method, method)),
                        cat,
                        lang,
                        acc[lang],
                        gaps.get(lang, float("nan")),
                        tuple(per_run[lang]),
                        counts[lang],
                    )
                )
    return EvalReport(
        rows=tuple(rows),
        languages=tuple(lang for lang in LANGUAGE_ORDER if lang in all_langs),
        methods=tuple(m for m, _ in method_outcomes),
        categories=categories,
        llm_calls=dict(llm_calls or {}),
        runs=runs,
    )


def report_from_runs(runs: Sequence[MethodRun], bench: BenchmarkSet) -> EvalReport:
    return build_report(
        [(r.spec.label, r.outcomes) for r in runs],
        bench.category_of(),
        {r.spec.label: r.llm_calls for r in runs},
        {r.spec.label: r.spec.display_name for r in runs},
    )


def _fmt(x: float) -> str:
    if x != x:  # NaN
        return ""
    return f"{round_half_away(x):.1f}"


def render_markdown(report: EvalReport) -> str:
    langs = report.languages
    out = []
    for cat in report.categories:
        out.append(f"### Accuracy (%), category: {cat}")
        out.append("")
        out.append("| Method | | " + " | ".join(lang.value for lang in langs) + " |")
        out.append("|---|---|" + "---|" * len(langs))
        for method in report.methods:
            rows = {r.language: r for r in report.rows if r.method == method and r.category == cat}
            if not rows:
                continue
            name = next(iter(rows.values())).display_name
            out.append(f"| {name} | | " + " | ".join(_fmt(rows[l].accuracy) if l in rows else "" for l in langs) + " |")
            out.append("| | Gap | " + " | ".join(_fmt(rows[l].gap) if l in rows else "" for l in langs) + " |")
        out.append("")
    out.append("### LLM calls")
    out.append("")
    out.append("| Method | Runs | Calls |")
    out.append("|---|---|---|")
    for method in report.methods:
        out.append(f"| {method} | {report.runs.get(method, '')} | {report.llm_calls.get(method, '')} |")
    return "\n".join(out) + "\n"


CSV_COLUMNS = ("method", "category", "language", "accuracy", "gap", "n_outcomes", "run_accuracies")


def render_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in report.rows:
        writer.writerow(
            [r.method, r.category, r.language.value, _fmt(r.accuracy), _fmt(r.gap), r.n_outcomes,
             ";".join(f"{x:.4f}" for x in r.run_accuracies)]
        )
    return buf.getvalue()


def render_json(report: EvalReport) -> str:
    return json.dumps(report.to_json(), ensure_ascii=False, sort_keys=True, indent=1, allow_nan=False,
                      default=str) + "\n"


REPORT_FORMATS = {"json": ("report.json", render_json), "csv": ("report.csv", render_csv),
                  "markdown": ("report.md", render_markdown)}


def emit_report(report: EvalReport, formats: Iterable[str], out_dir: str | Path) -> list[Path]:
    formats = list(formats)
    unknown = [f for f in formats if f not in REPORT_FORMATS]
    if unknown:
        raise ValueError(f"unknown report formats {unknown}; choose from {sorted(REPORT_FORMATS)}")
    if not report.rows:
        raise EmptyFilter("report has no rows")
    written = []
    try:
        out = Path(out_dir)
        if formats:
            out.mkdir(parents=True, exist_ok=True)
        for fmt in sorted(set(formats), key=list(REPORT_FORMATS).index):
            name, render = REPORT_FORMATS[fmt]
            path = out / name
            path.write_bytes(render(report).encode("utf-8"))
            written.append(path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return written


# -- stored outcomes ----------------------------------------------------------------

def outcomes_document(runs: Sequence[MethodRun], bench: BenchmarkSet) -> dict[str, Any]:
    return {
        "trace_version": TRACE_VERSION,
        "categories": {q: c.value for q, c in sorted(bench.category_of().items())},
        "methods": [
            {
                "label": r.spec.label,
                "name": r.spec.name,
                "display_name": r.spec.display_name,
                "config": r.spec.pipeline_config.to_json(),
                "runs": r.spec.runs,
                "llm_calls": r.llm_calls,
                "outcomes": [o.to_json() for o in r.outcomes],
            }
            for r in runs
        ],
    }


def report_from_outcomes_document(doc: Mapping[str, Any]) -> EvalReport:
    if doc.get("trace_version") != TRACE_VERSION:
        raise VersionMismatch(f"unsupported trace_version {doc.get('trace_version')!r}")
    category_of = {q: parse_category(c) for q, c in doc["categories"].items()}
    methods = doc["methods"]
    return build_report(
        [(m["label"], [AnswerOutcome.from_json(o) for o in m["outcomes"]]) for m in methods],
        category_of,
        {m["label"]: m["llm_calls"] for m in methods},
        {m["label"]: m["display_name"] for m in methods},
    )


def write_run_artifacts(runs: Sequence[MethodRun], bench: BenchmarkSet, out_dir: str | Path) -> Path:
    """Write outcomes.json and traces/<method>/<qid>_<lang>_r<run>.json."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        doc = outcomes_document(runs, bench)
        path = out / "outcomes.json"
        path.write_bytes((json.dumps(doc, ensure_ascii=False, sort_keys=True, indent=1) + "\n").encode("utf-8"))
        for r in runs:
            tdir = out / "traces" / _safe(r.spec.label)
            tdir.mkdir(parents=True, exist_ok=True)
            for t in r.traces:
                (tdir / f"{_safe(t.qid)}_{t.language}_r{t.run_index}.json").write_bytes(t.dumps().encode("utf-8"))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return path


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)
