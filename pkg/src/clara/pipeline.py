"""The cross-lingual reflective answering pipeline.

One run moves through these states::

    START -> TRANSLATE -> EVALUATE -> RETRIEVE / WEB_SEARCH <-> CRITIQUE
          -> REWRITE -> (back to EVALUATE) ... -> ANSWER -> END

Component flags in :class:`PipelineConfig` switch stages off; with every flag
off the run is a single chain-of-thought call in the original language.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import string
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .core_model import ABSTAIN, OPTION_KEYS, AnswerOutcome, Language, QuestionItem
from .embedding_index import HashingEmbedder, Snippet, VectorIndex, cosine_sim
from .errors import (
    BackendUnavailable,
    EmbedderUnavailable,
    EmptyIndex,
    IndexRequired,
    ParseExhausted,
    SearchUnavailable,
    VersionMismatch,
)
from .jargon import JargonDictionary, TermMatch, annotate_inline, identify_terms
from .llm_gateway import ChatMessage, CompletionParams, LLMGateway, fingerprint
from .relevance import (
    JargonExpansion,
    QueryBundle,
    RetrievalMode,
    WeightedQueryPart,
    rank_with_addon,
)
from .websearch import SearchPort, results_to_snippets

logger = logging.getLogger(__name__)

TRACE_VERSION = 1
TEMPLATE_NAMES = ("translate", "evaluate", "critique", "rewrite", "answer", "direct_cot")


# -- configuration --------------------------------------------------------------

# Component order of the ablation ladder: level n enables the first n components.
ABLATION_COMPONENTS = ("translate", "web", "basic_rag", "corrective_rag", "rewrite")
_FLAG_FOR = {
    "translate": "enable_translate",
    "web": "enable_websearch",
    "basic_rag": "enable_basic_rag",
    "corrective_rag": "enable_corrective_rag",
    "rewrite": "enable_rewrite",
}


@dataclass(frozen=True)
class PipelineConfig:
    enable_translate: bool = True
    enable_websearch: bool = True
    enable_basic_rag: bool = True
    enable_corrective_rag: bool = True
    enable_rewrite: bool = True
    max_iterations: int = 5
    top_k: int = 5
    tau_translation: float = 0.7
    tau_medical: float = 0.7
    max_rewrites: int = 1
    max_retries: int = 2
    web_query_source: str = "translated"

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.max_rewrites < 0 or self.max_retries < 0:
            raise ValueError("max_rewrites and max_retries must be >= 0")
        if self.web_query_source not in ("translated", "original"):
            raise ValueError("web_query_source must be 'translated' or 'original'")

    @classmethod
    def ablation(cls, level: int, **overrides) -> "PipelineConfig":
        """Level 0 is plain direct inference; level 5 is the full pipeline."""
        if not 0 <= level <= len(ABLATION_COMPONENTS):
            raise ValueError(f"ablation level must be in 0..{len(ABLATION_COMPONENTS)}")
        flags = {_FLAG_FOR[c]: i < level for i, c in enumerate(ABLATION_COMPONENTS)}
        flags.update(overrides)
        return cls(**flags)

    @property
    def components(self) -> tuple[str, ...]:
        return tuple(c for c in ABLATION_COMPONENTS if getattr(self, _FLAG_FOR[c]))

    @property
    def label(self) -> str:
        return "+".join(self.components) or "none"

    def to_json(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def stage_call_ceiling(config: PipelineConfig) -> int:
    """Most LLM calls a run can make when every reply parses on the first try."""
    rounds = 1 + (config.max_rewrites if config.enable_rewrite else 0)
    per_round = int(config.enable_basic_rag)
    if config.enable_corrective_rag and (config.enable_basic_rag or config.enable_websearch):
        per_round += config.max_iterations
    return int(config.enable_translate) + rounds * per_round + (rounds - 1) + 1


def call_ceiling(config: PipelineConfig) -> int:
    """Hard upper bound on LLM calls per run, counting parse retries."""
    return stage_call_ceiling(config) * (1 + config.max_retries)


# -- prompt templates -------------------------------------------------------------

class PromptTemplates:
    """Named ``string.Template`` texts (``${placeholder}`` syntax)."""

    def __init__(self, texts: Mapping[str, str]):
        missing = [n for n in TEMPLATE_NAMES if n not in texts]
        if missing:
            raise ValueError(f"missing prompt templates: {missing}")
        self.texts = dict(texts)
        self._compiled = {name: string.Template(text) for name, text in self.texts.items()}

    @classmethod
    def default(cls) -> "PromptTemplates":
        root = resources.files("clara.templates")
        return cls({n: root.joinpath(f"{n}.txt").read_text(encoding="utf-8") for n in TEMPLATE_NAMES})

    @classmethod
    def from_dir(cls, path: str | Path) -> "PromptTemplates":
        path = Path(path)
        return cls({n: (path / f"{n}.txt").read_text(encoding="utf-8") for n in TEMPLATE_NAMES})

    def render(self, name: str, **values: str) -> str:
        return self._compiled[name].substitute(values).strip() + "\n"


def format_options(options: Mapping[str, str]) -> str:
    return "\n".join(f"{k}. {options[k]}" for k in OPTION_KEYS)


def format_evidence(evidence: Sequence["Evidence"]) -> str:
    return "\n".join(f"[{i}] {e.snippet.text}" for i, e in enumerate(evidence, start=1))


# -- stage results ------------------------------------------------------------------

@dataclass(frozen=True)
class Fragment:
    fragment: str
    uncertainty: float


@dataclass(frozen=True)
class TranslationResult:
    english_text: str
    english_options: Mapping[str, str]
    declared_certainty: float
    flagged_fragments: tuple[Fragment, ...] = ()


@dataclass(frozen=True)
class UncertainPart:
    text: str
    uncertainty: float  # as reported; clamped only when turned into a weight


@dataclass(frozen=True)
class EvaluationResult:
    translation_certainty: float
    medical_certainty: float
    uncertain_parts: tuple[UncertainPart, ...] = ()
    jargon_candidates: tuple[str, ...] = ()
    needs_context: bool = False

    def __post_init__(self) -> None:
        for name in ("translation_certainty", "medical_certainty"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def conservative(cls) -> "EvaluationResult":
        """Used when the evaluator reply cannot be parsed; forces retrieval."""
        return cls(0.0, 0.0, (), (), True)


@dataclass(frozen=True)
class Route:
    retrieve: bool
    mode: RetrievalMode = RetrievalMode.BASE_ONLY

    @property
    def name(self) -> str:
        return self.mode.value if self.retrieve else "direct"


def route_for(
    evaluation: EvaluationResult, tau_translation: float, tau_medical: float, dictionary_hits: bool = False
) -> Route:
    """Pick direct answering or a retrieval mode from the dual assessment.

    Retrieval is needed when either certainty is below its threshold or the
    evaluator asks for context. Jargon (from the evaluator or the dictionary)
    together with low medical certainty or a context request selects the
    reweighted mode, which also carries the weighted query parts; otherwise low
    translation certainty with flagged parts selects the weighted mode.
    """
    translation_low = evaluation.translation_certainty < tau_translation
    medical_low = evaluation.medical_certainty < tau_medical
    if not (translation_low or medical_low or evaluation.needs_context):
        return Route(False)
    has_jargon = bool(evaluation.jargon_candidates) or dictionary_hits
    if (medical_low or evaluation.needs_context) and has_jargon:
        return Route(True, RetrievalMode.REWEIGHTED)
    if translation_low and evaluation.uncertain_parts:
        return Route(True, RetrievalMode.WEIGHTED)
    return Route(True, RetrievalMode.BASE_ONLY)


@dataclass(frozen=True)
class Evidence:
    origin: str  # "rag" or "web"
    snippet: Snippet
    score: float
    accepted: bool
    iteration: int

    def to_json(self) -> dict[str, Any]:
        return {
            "origin": self.origin,
            "snippet_id": self.snippet.snippet_id,
            "score": self.score,
            "accepted": self.accepted,
            "iteration": self.iteration,
        }


@dataclass(frozen=True)
class CritiqueVerdict:
    sufficient: bool
    items: tuple[Evidence, ...]  # every item, with ``accepted`` set
    called_llm: bool = False

    @property
    def kept(self) -> tuple[Evidence, ...]:
        return tuple(e for e in self.items if e.accepted)


# -- trace ---------------------------------------------------------------------------

class State(str, enum.Enum):
    START = "START"
    TRANSLATE = "TRANSLATE"
    EVALUATE = "EVALUATE"
    RETRIEVE = "RETRIEVE"
    WEB_SEARCH = "WEB_SEARCH"
    CRITIQUE = "CRITIQUE"
    REWRITE = "REWRITE"
    ANSWER = "ANSWER"
    END = "END"


_S = State
ALLOWED_TRANSITIONS: frozenset[tuple[State, State]] = frozenset(
    {
        (_S.START, _S.TRANSLATE), (_S.START, _S.EVALUATE), (_S.START, _S.WEB_SEARCH), (_S.START, _S.ANSWER),
        (_S.TRANSLATE, _S.EVALUATE), (_S.TRANSLATE, _S.WEB_SEARCH), (_S.TRANSLATE, _S.ANSWER),
        (_S.EVALUATE, _S.RETRIEVE), (_S.EVALUATE, _S.WEB_SEARCH), (_S.EVALUATE, _S.ANSWER),
        (_S.RETRIEVE, _S.CRITIQUE), (_S.RETRIEVE, _S.WEB_SEARCH), (_S.RETRIEVE, _S.ANSWER),
        (_S.RETRIEVE, _S.REWRITE),
        (_S.WEB_SEARCH, _S.CRITIQUE), (_S.WEB_SEARCH, _S.ANSWER), (_S.WEB_SEARCH, _S.REWRITE),
        (_S.CRITIQUE, _S.RETRIEVE), (_S.CRITIQUE, _S.WEB_SEARCH), (_S.CRITIQUE, _S.REWRITE),
        (_S.CRITIQUE, _S.ANSWER),
        (_S.REWRITE, _S.EVALUATE), (_S.REWRITE, _S.RETRIEVE), (_S.REWRITE, _S.WEB_SEARCH),
        (_S.REWRITE, _S.ANSWER),
        (_S.ANSWER, _S.END),
    }
    # any state may abort straight to END after a transport failure
    | {(s, _S.END) for s in State if s is not _S.END}
)


@dataclass
class PipelineTrace:
    qid: str
    language: str
    method: str = "clara"
    run_index: int = 0
    config: dict[str, Any] = field(default_factory=dict)
    clock: Callable[[], float] | None = field(default=None, repr=False, compare=False)
    state: str = State.START.value
    transitions: list[dict[str, Any]] = field(default_factory=list)
    calls: list[dict[str, Any]] = field(default_factory=list)
    rounds: list[dict[str, Any]] = field(default_factory=list)
    iterations: list[dict[str, Any]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    final_answer: str | None = None
    answer_prompt: str | None = None

    def enter(self, new: State) -> None:
        step = len(self.transitions)
        # logical clock unless a real one is injected, so traces stay byte-stable
        t = self.clock() if self.clock is not None else float(step)
        self.transitions.append({"step": step, "from": self.state, "to": new.value, "t": t})
        self.state = new.value

    def note(self, text: str) -> None:
        self.notes.append(text)

    @property
    def llm_call_count(self) -> int:
        return len(self.calls)

    @property
    def visited(self) -> list[str]:
        return [State.START.value] + [t["to"] for t in self.transitions]

    def edges(self) -> set[tuple[str, str]]:
        return {(t["from"], t["to"]) for t in self.transitions}

    def critique_iterations(self) -> int:
        return sum(1 for t in self.transitions if t["to"] == State.CRITIQUE.value)

    def count(self, state: State) -> int:
        return sum(1 for t in self.transitions if t["to"] == state.value)

    def to_json(self) -> dict[str, Any]:
        return {
            "trace_version": TRACE_VERSION,
            "qid": self.qid,
            "language": self.language,
            "method": self.method,
            "run_index": self.run_index,
            "config": self.config,
            "transitions": self.transitions,
            "calls": self.calls,
            "rounds": self.rounds,
            "iterations": self.iterations,
            "notes": self.notes,
            "llm_call_count": self.llm_call_count,
            "final_answer": self.final_answer,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "PipelineTrace":
        if obj.get("trace_version") != TRACE_VERSION:
            raise VersionMismatch(f"unsupported trace_version {obj.get('trace_version')!r}")
        trace = cls(obj["qid"], obj["language"], obj.get("method", ""), obj.get("run_index", 0), obj.get("config", {}))
        trace.transitions = list(obj["transitions"])
        trace.state = trace.transitions[-1]["to"] if trace.transitions else State.START.value
        trace.calls = list(obj["calls"])
        trace.rounds = list(obj.get("rounds", []))
        trace.iterations = list(obj.get("iterations", []))
        trace.notes = list(obj.get("notes", []))
        trace.final_answer = obj.get("final_answer")
        return trace


def is_valid_path(trace: PipelineTrace) -> bool:
    prev = State.START
    for t in trace.transitions:
        cur = State(t["to"])
        if State(t["from"]) is not prev or (prev, cur) not in ALLOWED_TRANSITIONS:
            return False
        prev = cur
    return True


# -- reply validators ------------------------------------------------------------------

def _unit(value: Any) -> float:
    """Coerce to a float clamped to [0, 1]; rejects non-numbers and NaN."""
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ValueError(f"not a number: {value!r}")
    x = float(value)
    if math.isnan(x):
        raise ValueError("NaN")
    return min(1.0, max(0.0, x))


def _raw_number(value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ValueError(f"not a number: {value!r}")
    x = float(value)
    if math.isnan(x):
        raise ValueError("NaN")
    return x


def _flag(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in ("true", "false"):
        return value.strip().lower() == "true"
    raise ValueError(f"not a boolean: {value!r}")


def parse_letter(value: Any) -> str:
    if not isinstance(value, str):
        raise ValueError("answer must be a string")
    letter = value.strip().strip("()[]{}.:*\"' ").upper()
    if letter not in OPTION_KEYS:
        raise ValueError(f"answer {value!r} is not one of A-D")
    return letter


def _check_answer(obj: dict) -> dict:
    return {**obj, "answer": parse_letter(obj["answer"])}


# -- ports ---------------------------------------------------------------------------

@dataclass
class Ports:
    llm: LLMGateway
    embedder: Any = field(default_factory=HashingEmbedder)
    index: VectorIndex | None = None
    dictionary: JargonDictionary | None = None
    search: SearchPort | None = None
    templates: PromptTemplates = field(default_factory=PromptTemplates.default)
    params: CompletionParams | None = None
    record_prompts: bool = False
    clock: Callable[[], float] | None = None


# -- the pipeline ----------------------------------------------------------------------

class ClaraPipeline:
    def __init__(self, config: PipelineConfig, ports: Ports):
        self.config = config
        self.ports = ports

    # LLM plumbing ------------------------------------------------------------

    def _observer(self, stage: str, trace: PipelineTrace | None):
        if trace is None:
            return None

        def record(messages: Sequence[ChatMessage], reply: str | None) -> None:
            entry: dict[str, Any] = {"stage": stage, "fingerprint": fingerprint(messages), "response": reply}
            if self.ports.record_prompts:
                entry["prompt"] = [m.to_json() for m in messages]
            trace.calls.append(entry)

        return record

    def _structured(self, stage: str, prompt: str, keys: set[str], validate, trace) -> dict:
        return self.ports.llm.complete_structured(
            [ChatMessage("user", prompt)],
            self.ports.params,
            expected_keys=keys,
            max_retries=self.config.max_retries,
            validate=validate,
            observer=self._observer(stage, trace),
        )

    # stages ------------------------------------------------------------------

    def translate(self, item: QuestionItem, trace: PipelineTrace | None = None) -> TranslationResult:
        if not self.config.enable_translate or item.language is Language.EN:
            return TranslationResult(item.stem, item.options, 1.0, ())
        prompt = self.ports.templates.render(
            "translate",
            source_language=item.language.display_name,
            stem=item.stem,
            options=format_options(item.options),
        )

        def check(obj: dict) -> dict:
            text = obj["english_question"]
            if not isinstance(text, str) or not text.strip():
                raise ValueError("empty translation")
            return obj

        try:
            obj = self._structured("translate", prompt, {"english_question", "certainty"}, check, trace)
        except ParseExhausted as exc:
            if trace is not None:
                trace.note("translate: reply never parsed; using raw text with certainty 0")
            return TranslationResult(exc.last_response.strip() or item.stem, item.options, 0.0, ())

        english = obj["english_question"].strip()
        options = obj.get("english_options")
        if not (
            isinstance(options, dict)
            and sorted(options) == list(OPTION_KEYS)
            and all(isinstance(v, str) and v.strip() for v in options.values())
        ):
            options = item.options
        try:
            certainty = _unit(obj["certainty"])
        except ValueError:
            certainty = 0.0
        fragments = []
        for frag in obj.get("uncertain_fragments") or []:
            try:
                text = frag["fragment"]
                if isinstance(text, str) and text.strip() and text in english:
                    fragments.append(Fragment(text, _unit(frag.get("uncertainty", 1.0))))
            except (TypeError, KeyError, ValueError):
                continue
        return TranslationResult(english, {k: options[k] for k in OPTION_KEYS}, certainty, tuple(fragments))

    def evaluate(
        self, question: str, options: Mapping[str, str], trace: PipelineTrace | None = None
    ) -> EvaluationResult:
        prompt = self.ports.templates.render("evaluate", question=question, options=format_options(options))

        def check(obj: dict) -> EvaluationResult:
            parts = []
            for p in obj.get("uncertain_parts") or []:
                if isinstance(p, dict) and isinstance(p.get("text"), str) and p["text"].strip():
                    try:
                        parts.append(UncertainPart(p["text"], _raw_number(p.get("uncertainty", 1.0))))
                    except ValueError:
                        continue
            jargon = tuple(j for j in (obj.get("jargon") or []) if isinstance(j, str) and j.strip())
            return EvaluationResult(
                translation_certainty=_unit(obj["translation_certainty"]),
                medical_certainty=_unit(obj["medical_certainty"]),
                uncertain_parts=tuple(parts),
                jargon_candidates=jargon,
                needs_context=_flag(obj.get("needs_context", False)),
            )

        try:
            return self._structured(
                "evaluate", prompt, {"translation_certainty", "medical_certainty"}, check, trace
            )
        except ParseExhausted:
            if trace is not None:
                trace.note("evaluate: reply never parsed; forcing retrieval")
            return EvaluationResult.conservative()

    def query_text(self, question: str, options: Mapping[str, str]) -> str:
        return question + "\n" + format_options(options)

    def resolve_jargon(self, question: str, evaluation: EvaluationResult) -> list[TermMatch]:
        """Dictionary hits in the text, then evaluator terms found in the dictionary.

        Returns one entry per canonical term; evaluator-only terms carry span -1.
        """
        dictionary = self.ports.dictionary
        if dictionary is None:
            return []
        out: list[TermMatch] = []
        seen: set[str] = set()
        for m in identify_terms(question, dictionary):
            if m.term not in seen:
                seen.add(m.term)
                out.append(m)
        for cand in evaluation.jargon_candidates:
            found = dictionary.lookup(cand)
            if found is None or found[0] in seen:
                continue
            key, entry = found
            seen.add(key)
            out.append(TermMatch(key, -1, -1, cand, entry.expansion, entry.weight))
        return out

    def build_bundle(
        self,
        question: str,
        options: Mapping[str, str],
        evaluation: EvaluationResult,
        mode: RetrievalMode,
    ) -> QueryBundle:
        embed = self.ports.embedder.embed
        full = self.query_text(question, options)
        parts: list[WeightedQueryPart] = []
        jargon: list[JargonExpansion] = []
        if mode is not RetrievalMode.BASE_ONLY:
            for p in evaluation.uncertain_parts:
                parts.append(WeightedQueryPart(p.text, min(1.0, max(0.0, p.uncertainty)), embed(p.text)))
        if mode is RetrievalMode.REWEIGHTED:
            for m in self.resolve_jargon(question, evaluation):
                jargon.append(JargonExpansion(m.term, m.expansion, m.weight, embed(m.expansion)))
        return QueryBundle(full, embed(full), tuple(parts), tuple(jargon))

    def retrieve(self, bundle: QueryBundle, mode: RetrievalMode, page: int, iteration: int) -> list[Evidence]:
        index = self.ports.index
        if index is None:
            raise IndexRequired("retrieval is enabled but no vector index is bound")
        k = self.config.top_k
        try:
            ranked = rank_with_addon(index, bundle, mode, k * page)
        except EmptyIndex:
            return []
        return [Evidence("rag", s.snippet, s.total, True, iteration) for s in ranked[k * (page - 1) :]]

    def augment_knowledge(
        self,
        evaluation: EvaluationResult,
        question: str,
        options: Mapping[str, str],
        route: Route,
        iteration: int = 1,
    ) -> list[Evidence]:
        bundle = self.build_bundle(question, options, evaluation, route.mode)
        return self.retrieve(bundle, route.mode, 1, iteration)

    def web_search(
        self, query: str, full_vector: np.ndarray, iteration: int, trace: PipelineTrace | None = None
    ) -> list[Evidence]:
        search = self.ports.search
        if search is None:
            raise IndexRequired("web search is enabled but no search port is bound")
        try:
            results = search.search(query, self.config.top_k)
            snippets = results_to_snippets(results, self.ports.embedder)
        except (SearchUnavailable, EmbedderUnavailable) as exc:
            if trace is not None:
                trace.note(f"web search iteration {iteration}: {exc}")
            return []
        return [Evidence("web", s, cosine_sim(full_vector, s.vector), True, iteration) for s in snippets]

    def critique(
        self,
        evidence: Sequence[Evidence],
        question: str,
        options: Mapping[str, str],
        trace: PipelineTrace | None = None,
    ) -> CritiqueVerdict:
        evidence = tuple(evidence)
        if not self.config.enable_corrective_rag:
            return CritiqueVerdict(bool(evidence), tuple(replace(e, accepted=True) for e in evidence))
        if not evidence:
            return CritiqueVerdict(False, ())
        prompt = self.ports.templates.render(
            "critique", question=question, options=format_options(options), evidence=format_evidence(evidence)
        )

        def check(obj: dict) -> dict:
            keep = obj["keep"]
            if not isinstance(keep, list) or any(isinstance(i, bool) or not isinstance(i, int) for i in keep):
                raise ValueError("keep must be a list of item numbers")
            return {"keep": set(keep), "sufficient": _flag(obj["sufficient"])}

        try:
            verdict = self._structured("critique", prompt, {"keep", "sufficient"}, check, trace)
        except ParseExhausted:
            if trace is not None:
                trace.note("critique: reply never parsed; discarding the batch")
            return CritiqueVerdict(False, tuple(replace(e, accepted=False) for e in evidence), True)
        items = tuple(replace(e, accepted=(i in verdict["keep"])) for i, e in enumerate(evidence, start=1))
        return CritiqueVerdict(verdict["sufficient"], items, True)

    def rewrite(
        self, question: str, options: Mapping[str, str], trace: PipelineTrace | None = None
    ) -> str | None:
        prompt = self.ports.templates.render("rewrite", question=question, options=format_options(options))

        def check(obj: dict) -> dict:
            text = obj["rewritten_question"]
            if not isinstance(text, str) or not text.strip():
                raise ValueError("empty rewrite")
            return obj

        try:
            return self._structured("rewrite", prompt, {"rewritten_question"}, check, trace)[
                "rewritten_question"
            ].strip()
        except ParseExhausted:
            if trace is not None:
                trace.note("rewrite: reply never parsed; answering with current evidence")
            return None

    def answer_prompt(
        self,
        question: str,
        options: Mapping[str, str],
        evidence: Sequence[Evidence],
        language: Language,
        direct: bool = False,
    ) -> str:
        if direct:
            return self.ports.templates.render(
                "direct_cot", source_language=language.display_name, question=question, options=format_options(options)
            )
        block = ""
        if evidence:
            block = "\nReference information:\n" + format_evidence(evidence) + "\n"
        return self.ports.templates.render(
            "answer", evidence_block=block, question=question, options=format_options(options)
        )

    def answer(
        self,
        question: str,
        options: Mapping[str, str],
        evidence: Sequence[Evidence],
        language: Language = Language.EN,
        direct: bool = False,
        trace: PipelineTrace | None = None,
    ) -> str:
        prompt = self.answer_prompt(question, options, evidence, language, direct)
        if trace is not None:
            trace.answer_prompt = prompt
        try:
            return self._structured("answer", prompt, {"answer"}, _check_answer, trace)["answer"]
        except ParseExhausted:
            if trace is not None:
                trace.note("answer: reply never parsed; abstaining")
            return ABSTAIN

    # orchestration -----------------------------------------------------------

    def run(self, item: QuestionItem, method: str = "clara", run_index: int = 0) -> tuple[AnswerOutcome, PipelineTrace]:
        trace = PipelineTrace(
            item.qid, item.language.value, method, run_index, self.config.to_json(), clock=self.ports.clock
        )
        try:
            predicted = self._run(item, trace)
        except (BackendUnavailable, EmbedderUnavailable) as exc:
            trace.note(f"aborted in {trace.state}: {exc}")
            trace.enter(State.END)
            predicted = ABSTAIN
        trace.final_answer = predicted
        return AnswerOutcome.score(item, predicted, method, run_index), trace

    def _run(self, item: QuestionItem, trace: PipelineTrace) -> str:
        cfg = self.config
        if cfg.enable_translate:
            trace.enter(State.TRANSLATE)
        translated = self.translate(item, trace)
        question, options = translated.english_text, translated.english_options

        kept: dict[str, Evidence] = {}
        annotated: str | None = None
        rewrites_left = cfg.max_rewrites if cfg.enable_rewrite else 0
        round_no = 0
        while True:
            round_no += 1
            evaluation: EvaluationResult | None = None
            route = Route(False)
            matches: list[TermMatch] = []
            if cfg.enable_basic_rag:
                trace.enter(State.EVALUATE)
                evaluation = self.evaluate(question, options, trace)
                if self.ports.dictionary is not None:
                    matches = identify_terms(question, self.ports.dictionary)
                route = route_for(evaluation, cfg.tau_translation, cfg.tau_medical, bool(matches))
            rag_active = cfg.enable_basic_rag and route.retrieve
            web_active = cfg.enable_websearch and (route.retrieve or not cfg.enable_basic_rag)
            trace.rounds.append(
                {
                    "round": round_no,
                    "question": question,
                    "route": route.name if cfg.enable_basic_rag else ("web" if web_active else "direct"),
                    "evaluation": _evaluation_json(evaluation),
                }
            )
            if not (rag_active or web_active):
                break

            bundle = None
            if rag_active:
                assert evaluation is not None
                bundle = self.build_bundle(question, options, evaluation, route.mode)
                if bundle.jargon and matches:
                    annotated = annotate_inline(question, matches)
            full_vector = bundle.full_query_vector if bundle is not None else self.ports.embedder.embed(
                self.query_text(question, options)
            )
            web_query = item.stem if cfg.web_query_source == "original" else question

            if cfg.enable_corrective_rag:
                # corpus first, then keep searching until the critic is satisfied
                first = [State.RETRIEVE] if rag_active else []
                fallback = State.WEB_SEARCH if web_active else State.RETRIEVE
                schedule = (first + [fallback] * cfg.max_iterations)[: cfg.max_iterations]
            else:
                # no critic to judge sufficiency: one pass over each enabled source
                schedule = ([State.RETRIEVE] if rag_active else []) + ([State.WEB_SEARCH] if web_active else [])

            sufficient = False
            page = 0
            for iteration, source in enumerate(schedule, start=1):
                trace.enter(source)
                if source is State.RETRIEVE:
                    page += 1
                    evidence = self.retrieve(bundle, route.mode, page, iteration)
                else:
                    evidence = self.web_search(web_query, full_vector, iteration, trace)
                if cfg.enable_corrective_rag:
                    trace.enter(State.CRITIQUE)
                verdict = self.critique(evidence, question, options, trace)
                trace.iterations.append(
                    {
                        "round": round_no,
                        "iteration": iteration,
                        "source": "rag" if source is State.RETRIEVE else "web",
                        "evidence": [e.to_json() for e in verdict.items],
                        "critic_called": verdict.called_llm,
                        "sufficient": verdict.sufficient,
                    }
                )
                for e in verdict.kept:
                    kept.setdefault(e.snippet.snippet_id, e)
                if verdict.sufficient:
                    sufficient = True
                    if cfg.enable_corrective_rag:
                        break

            if sufficient or rewrites_left == 0:
                break
            trace.enter(State.REWRITE)
            rewrites_left -= 1
            rewritten = self.rewrite(question, options, trace)
            if rewritten is None:
                break
            question = rewritten
            annotated = None

        trace.enter(State.ANSWER)
        evidence = list(kept.values())
        direct = not cfg.enable_translate and not evidence
        predicted = self.answer(annotated or question, options, evidence, item.language, direct, trace)
        trace.enter(State.END)
        return predicted


def _evaluation_json(evaluation: EvaluationResult | None) -> dict[str, Any] | None:
    if evaluation is None:
        return None
    return {
        "translation_certainty": evaluation.translation_certainty,
        "medical_certainty": evaluation.medical_certainty,
        "uncertain_parts": [{"text": p.text, "uncertainty": p.uncertainty} for p in evaluation.uncertain_parts],
        "jargon_candidates": list(evaluation.jargon_candidates),
        "needs_context": evaluation.needs_context,
    }


def run_pipeline(
    item: QuestionItem, config: PipelineConfig, ports: Ports, method: str = "clara", run_index: int = 0
) -> tuple[AnswerOutcome, PipelineTrace]:
    return ClaraPipeline(config, ports).run(item, method, run_index)
