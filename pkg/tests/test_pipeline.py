import itertools
import json

import numpy as np
import pytest

import toy_fixture
from clara.core_model import ABSTAIN, Language
from clara.embedding_index import HashingEmbedder
from clara.errors import BackendUnavailable, IndexRequired, ScriptMiss, VersionMismatch
from clara.harness import MethodSpec, run_method
from clara.jargon import JargonDictionary
from clara.llm_gateway import CallableBackend, LLMGateway
from clara.pipeline import (
    ClaraPipeline,
    EvaluationResult,
    PipelineConfig,
    PipelineTrace,
    Ports,
    RetrievalMode,
    State,
    UncertainPart,
    call_ceiling,
    is_valid_path,
    route_for,
    run_pipeline,
    stage_call_ceiling,
)
from clara.websearch import ScriptedSearch
from conftest import make_item

CONFIDENT = {"translation_certainty": 1, "medical_certainty": 1, "needs_context": False}
UNSURE = {"translation_certainty": 0.9, "medical_certainty": 0.2, "needs_context": True, "jargon": []}


def staged(handlers, log=None):
    """Backend dispatching on the template's first line; handlers map task -> reply or callable."""

    def fn(messages):
        prompt = messages[-1].content if messages[-1].role == "user" and messages[-1].content.startswith("Task:") \
            else messages[0].content
        task = prompt.splitlines()[0].removeprefix("Task: ")
        if log is not None:
            log.append(task)
        reply = handlers[task]
        return reply(prompt) if callable(reply) else reply if isinstance(reply, str) else json.dumps(reply)

    return CallableBackend(fn)


def ports_for(backend, **kw):
    defaults = dict(embedder=HashingEmbedder(), index=toy_fixture.index(), dictionary=JargonDictionary.seed(),
                    search=toy_fixture.search(), record_prompts=True)
    defaults.update(kw)
    return Ports(llm=LLMGateway(backend), **defaults)


ANSWER_A = {"reasoning": "r", "answer": "A"}


# -- routing --------------------------------------------------------------------------

def oracle_route(t, m, ctx, llm_jargon, dict_hits, parts, tau=0.7):
    """Decision table written out case by case."""
    low_t, low_m = t < tau, m < tau
    if not low_t and not low_m and not ctx:
        return "direct"
    jargon = llm_jargon or dict_hits
    if jargon and (low_m or ctx):
        return "reweighted"
    if low_t and parts:
        return "weighted"
    return "base_only"


def test_route_matches_decision_table_everywhere():
    for t, m, ctx, lj, dh, parts in itertools.product((0.0, 0.69, 0.7, 1.0), (0.0, 0.69, 0.7, 1.0),
                                                       (False, True), (False, True), (False, True), (False, True)):
        ev = EvaluationResult(t, m, (UncertainPart("x", 0.5),) if parts else (), ("uveitis",) if lj else (), ctx)
        assert route_for(ev, 0.7, 0.7, dh).name == oracle_route(t, m, ctx, lj, dh, parts), (t, m, ctx, lj, dh, parts)


def test_route_modes_are_retrieval_modes():
    assert route_for(EvaluationResult.conservative(), 0.7, 0.7).mode is RetrievalMode.BASE_ONLY
    assert route_for(EvaluationResult.conservative(), 0.7, 0.7, True).mode is RetrievalMode.REWEIGHTED


# -- call budget ------------------------------------------------------------------------

@pytest.mark.parametrize("level,expected", [(0, 1), (1, 2), (2, 2), (3, 3), (4, 8), (5, 15)])
def test_stage_ceiling_per_ladder_level(level, expected):
    cfg = PipelineConfig.ablation(level)
    assert stage_call_ceiling(cfg) == expected
    assert call_ceiling(cfg) == expected * 3


def test_ablation_labels():
    assert PipelineConfig.ablation(0).label == "none"
    assert PipelineConfig.ablation(4).label == "translate+web+basic_rag+corrective_rag"
    with pytest.raises(ValueError):
        PipelineConfig.ablation(6)


# -- stages ----------------------------------------------------------------------------

PT_ITEM = make_item("q1", "PT", stem="Qual estrutura produz o humor aquoso?")


def test_translate_skips_english_and_disabled():
    log = []
    pipe = ClaraPipeline(PipelineConfig(), ports_for(staged({}, log)))
    en = pipe.translate(make_item())
    assert en.english_text == make_item().stem and en.declared_certainty == 1.0 and log == []
    off = ClaraPipeline(PipelineConfig(enable_translate=False), ports_for(staged({}, log)))
    assert off.translate(PT_ITEM).english_text == PT_ITEM.stem and log == []


def test_translate_clamps_and_filters_fragments():
    reply = {"english_question": "Which structure makes aqueous humor?", "certainty": 1.7,
             "english_options": {"A": "a", "B": "b", "C": "c"},
             "uncertain_fragments": [{"fragment": "aqueous humor", "uncertainty": 3},
                                     {"fragment": "not in text", "uncertainty": 0.4}, "junk"]}
    result = ClaraPipeline(PipelineConfig(), ports_for(staged({"translation": reply}))).translate(PT_ITEM)
    assert result.declared_certainty == 1.0
    assert [(f.fragment, f.uncertainty) for f in result.flagged_fragments] == [("aqueous humor", 1.0)]
    assert result.english_options == PT_ITEM.options  # incomplete options fall back to the source


def test_translate_falls_back_to_raw_reply():
    trace = PipelineTrace("q1", "PT")
    result = ClaraPipeline(PipelineConfig(max_retries=1), ports_for(staged({"translation": "Which structure?"}))) \
        .translate(PT_ITEM, trace)
    assert result.english_text == "Which structure?" and result.declared_certainty == 0.0
    assert len(trace.calls) == 2 and "translate" in trace.notes[0]


def test_evaluate_clamps_and_degrades():
    pipe = ClaraPipeline(PipelineConfig(), ports_for(staged({"evaluation": {
        "translation_certainty": "1.4", "medical_certainty": -2, "needs_context": "true",
        "uncertain_parts": [{"text": "x", "uncertainty": 7}, {"text": ""}], "jargon": ["uveitis", 3]}})))
    ev = pipe.evaluate("q?", PT_ITEM.options)
    assert (ev.translation_certainty, ev.medical_certainty, ev.needs_context) == (1.0, 0.0, True)
    assert ev.uncertain_parts == (UncertainPart("x", 7.0),) and ev.jargon_candidates == ("uveitis",)
    bad = ClaraPipeline(PipelineConfig(max_retries=0), ports_for(staged({"evaluation": "certain!"})))
    assert bad.evaluate("q?", PT_ITEM.options) == EvaluationResult.conservative()


def test_weighted_part_weights_are_clamped():
    pipe = ClaraPipeline(PipelineConfig(), ports_for(staged({})))
    ev = EvaluationResult(0.1, 0.9, (UncertainPart("x", 7.0), UncertainPart("y", -1.0)))
    bundle = pipe.build_bundle("q", PT_ITEM.options, ev, RetrievalMode.WEIGHTED)
    assert [p.weight for p in bundle.parts] == [1.0, 0.0] and bundle.jargon == ()


def test_critic_not_called_on_empty_evidence():
    log = []
    verdict = ClaraPipeline(PipelineConfig(), ports_for(staged({}, log))).critique([], "q", PT_ITEM.options)
    assert not verdict.sufficient and not verdict.called_llm and log == []


def test_unparseable_critique_discards_batch():
    pipe = ClaraPipeline(PipelineConfig(max_retries=0), ports_for(staged({"evidence review": "all good"})))
    evidence = pipe.web_search("leukocoria", np.ones(256) / 16, 1)
    verdict = pipe.critique(evidence, "q", PT_ITEM.options)
    assert verdict.called_llm and not verdict.sufficient and verdict.kept == ()


def test_web_search_outage_is_empty_evidence():
    trace = PipelineTrace("q", "EN")
    pipe = ClaraPipeline(PipelineConfig(), ports_for(staged({}), search=ScriptedSearch({}, unavailable=True)))
    assert pipe.web_search("q", np.ones(256), 1, trace) == [] and trace.notes


def test_retrieval_without_index_is_an_error():
    pipe = ClaraPipeline(PipelineConfig(), ports_for(staged({"evaluation": UNSURE}), index=None))
    with pytest.raises(IndexRequired):
        pipe.run(make_item())


# -- whole runs -------------------------------------------------------------------------

def test_backend_outage_abstains():
    def down(messages):
        raise BackendUnavailable("no route")

    outcome, trace = run_pipeline(make_item(), PipelineConfig(), ports_for(CallableBackend(down)))
    assert outcome.predicted == ABSTAIN and not outcome.correct
    assert trace.state == "END" and is_valid_path(trace) and trace.llm_call_count == 1


def test_script_miss_propagates():
    from clara.llm_gateway import ScriptedBackend

    with pytest.raises(ScriptMiss):
        run_pipeline(make_item(), PipelineConfig(), ports_for(ScriptedBackend({})))


def test_unparseable_answer_abstains():
    outcome, trace = run_pipeline(make_item(), PipelineConfig.ablation(0), ports_for(staged({"answer": "A!"})))
    assert outcome.predicted == ABSTAIN and trace.llm_call_count == 3


def test_direct_answer_when_confident():
    log = []
    outcome, trace = run_pipeline(make_item(), PipelineConfig(), ports_for(staged(
        {"evaluation": CONFIDENT, "answer": ANSWER_A}, log)))
    assert outcome.correct and log == ["evaluation", "answer"]
    assert trace.visited == ["START", "TRANSLATE", "EVALUATE", "ANSWER", "END"]


def test_kept_evidence_is_deduplicated():
    # critic keeps item 1 every time but never declares sufficiency; web repeats the same hit
    handlers = {"evaluation": UNSURE, "evidence review": {"keep": [1], "sufficient": False},
                "question rewriting": {"rewritten_question": "Restated question?"}, "answer": ANSWER_A}
    _, trace = run_pipeline(make_item(stem="Leukocoria in a child?"), PipelineConfig(), ports_for(staged(handlers)))
    prompt = trace.answer_prompt
    refs = prompt.split("Reference information:\n", 1)[1].split("\nQuestion:", 1)[0]
    lines = [l for l in refs.splitlines() if l.startswith("[")]
    assert len(lines) == len(set(l.split("] ", 1)[1] for l in lines))
    assert sum("until proven otherwise" in l for l in lines) == 1


def test_rejected_evidence_never_reaches_the_answer(toy_script):
    ports = toy_fixture.scripted_ports(toy_script, record_prompts=True)
    bench = toy_fixture.bench()
    _, trace = run_pipeline(bench.get("q7", "EN"), PipelineConfig(), ports, "clara")
    rejected = [e["snippet_id"] for it in trace.iterations for e in it["evidence"] if not e["accepted"]]
    accepted = [e["snippet_id"] for it in trace.iterations for e in it["evidence"] if e["accepted"]]
    assert rejected and accepted
    texts = {s.snippet_id: s.text for s in ports.index.snippets}
    for sid in rejected:
        assert texts[sid] not in trace.answer_prompt
    assert "until proven otherwise" in trace.answer_prompt


def test_translate_off_without_evidence_uses_direct_template():
    _, trace = run_pipeline(make_item("q", "PT"), PipelineConfig.ablation(0), ports_for(staged({"answer": ANSWER_A})))
    assert "Portuguese" in trace.answer_prompt


def test_runs_are_deterministic_and_paths_valid(toy_script, toy_bench):
    ports = toy_fixture.scripted_ports(toy_script)
    for spec in toy_fixture.default_specs():
        a = run_method(toy_bench, spec, ports)
        b = run_method(toy_bench, spec, toy_fixture.scripted_ports(toy_script), parallelism=4)
        assert [t.dumps() for t in a.traces] == [t.dumps() for t in b.traces]
        for t in a.traces:
            assert is_valid_path(t), (spec.label, t.qid, t.visited)
            assert t.llm_call_count <= stage_call_ceiling(spec.pipeline_config)


def test_trace_roundtrip_and_version_check(toy_script, toy_bench):
    _, trace = run_pipeline(toy_bench.get("q8", "PT"), PipelineConfig(), toy_fixture.scripted_ports(toy_script))
    back = PipelineTrace.from_json(json.loads(trace.dumps()))
    assert back.dumps() == trace.dumps() and back.state == "END"
    with pytest.raises(VersionMismatch):
        PipelineTrace.from_json({**trace.to_json(), "trace_version": 2})


def test_invalid_paths_are_detected():
    t = PipelineTrace("q", "EN")
    t.enter(State.TRANSLATE)
    t.enter(State.CRITIQUE)
    assert not is_valid_path(t)


def test_injected_clock_is_used():
    ticks = iter([10.0, 11.5, 12.0, 13.0])
    p = ports_for(staged({"evaluation": CONFIDENT, "answer": ANSWER_A}), clock=lambda: next(ticks))
    _, trace = run_pipeline(make_item(), PipelineConfig(), p)
    assert [t["t"] for t in trace.transitions] == [10.0, 11.5, 12.0, 13.0]


def test_without_critic_each_source_is_read_once():
    log = []
    _, trace = run_pipeline(make_item(stem="Leukocoria in a child?"), PipelineConfig.ablation(3),
                            ports_for(staged({"evaluation": UNSURE, "answer": ANSWER_A}, log)))
    assert log == ["evaluation", "answer"]
    assert trace.visited == ["START", "TRANSLATE", "EVALUATE", "RETRIEVE", "WEB_SEARCH", "ANSWER", "END"]
    assert "until proven otherwise" in trace.answer_prompt


def test_critic_loop_stops_when_satisfied():
    log = []
    handlers = {"evaluation": UNSURE, "evidence review": {"keep": [1], "sufficient": True}, "answer": ANSWER_A}
    _, trace = run_pipeline(make_item(stem="Leukocoria in a child?"), PipelineConfig(), ports_for(staged(handlers, log)))
    assert log == ["evaluation", "evidence review", "answer"]
    assert trace.count(State.WEB_SEARCH) == 0
