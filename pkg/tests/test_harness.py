import json
from pathlib import Path

import pytest

import toy_fixture
from clara.core_model import ABSTAIN, AnswerOutcome, Category, Language
from clara.errors import EmptyFilter, IndexRequired, IoFailure, MissingEnglishRow, VersionMismatch
from clara.harness import (
    CSV_COLUMNS,
    MethodSpec,
    accuracy,
    build_report,
    emit_report,
    gap_vs_english,
    render_csv,
    render_markdown,
    report_from_outcomes_document,
    round_half_away,
    run_method,
    write_run_artifacts,
)

FIXTURES = Path(__file__).parent / "fixtures"
CATS = {"q1": Category.BASIC, "q2": Category.CLINICAL_SURGICAL}


def outcomes(method, table):
    """table: {(qid, lang, run): predicted}; q1 key A, q2 key B."""
    keys = {"q1": "A", "q2": "B"}
    return [AnswerOutcome(q, Language(l), p, p == keys[q], method, r) for (q, l, r), p in table.items()]


DIRECT = outcomes("direct", {
    ("q1", "EN", 0): "A", ("q2", "EN", 0): "B", ("q1", "FIL", 0): "A", ("q2", "FIL", 0): "C",
    ("q1", "EN", 1): "A", ("q2", "EN", 1): "D", ("q1", "FIL", 1): "B", ("q2", "FIL", 1): "A",
})
CLARA = outcomes("clara", {
    ("q1", "EN", 0): "A", ("q2", "EN", 0): "B", ("q1", "FIL", 0): "A", ("q2", "FIL", 0): "B",
    ("q1", "EN", 1): "A", ("q2", "EN", 1): "B", ("q1", "FIL", 1): "A", ("q2", "FIL", 1): ABSTAIN,
})


def small_report():
    return build_report([("direct", DIRECT), ("clara", CLARA)], CATS, {"direct": 8, "clara": 20})


def test_rounding_is_half_away_from_zero():
    assert [round_half_away(x) for x in (2.25, -2.25, 0.05, -0.05, 1.35, -11.6, 0.04)] == \
        [2.3, -2.3, 0.1, -0.1, 1.4, -11.6, 0.0]
    assert str(round_half_away(-0.04)) == "0.0"


def test_accuracy_averages_runs_and_filters():
    assert accuracy(DIRECT, "EN") == 75.0
    assert accuracy(DIRECT, "FIL", "Basic", CATS) == 50.0
    assert accuracy(CLARA, "FIL", "ClinicalSurgical", CATS) == 50.0
    with pytest.raises(EmptyFilter):
        accuracy(DIRECT, "ZH")
    with pytest.raises(ValueError):
        accuracy(DIRECT, "EN", "Basic")


def test_gap_uses_unrounded_means():
    assert gap_vs_english({"EN": 200 / 3, "PT": 100 / 3}) == {Language.EN: 0.0, Language.PT: -33.3}
    with pytest.raises(MissingEnglishRow):
        gap_vs_english({"PT": 50.0})


def test_markdown_matches_golden_file():
    assert render_markdown(small_report()) == (FIXTURES / "golden_report.md").read_text(encoding="utf-8")


def test_csv_and_json_views():
    report = small_report()
    lines = render_csv(report).splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert "direct,all,FIL,25.0,-50.0,4,50.0000;0.0000" in lines
    row = report.row("clara", "FIL", "ClinicalSurgical")
    assert row.to_json()["gap"] == -50.0 and row.n_outcomes == 2


def test_missing_english_leaves_gap_blank():
    only_fil = [o for o in DIRECT if o.language is Language.FIL]
    report = build_report([("direct", only_fil)], CATS)
    assert report.row("direct", "FIL").to_json()["gap"] is None
    assert "| | Gap | 25.0 |" not in render_markdown(report)


def test_emit_report_formats(tmp_path):
    report = small_report()
    assert emit_report(report, [], tmp_path / "none") == [] and not (tmp_path / "none").exists()
    written = emit_report(report, ["markdown", "json", "csv"], tmp_path)
    assert [p.name for p in written] == ["report.json", "report.csv", "report.md"]
    json.loads((tmp_path / "report.json").read_text())
    with pytest.raises(ValueError):
        emit_report(report, ["pdf"], tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoFailure):
        emit_report(report, ["csv"], blocker / "sub")


def test_method_factories():
    assert MethodSpec.direct().pipeline_config.label == "none"
    assert MethodSpec.translate_cot().pipeline_config.label == "translate"
    web = MethodSpec.web_toolcall().pipeline_config
    assert web.label == "web" and web.web_query_source == "original"
    assert MethodSpec.clara().pipeline_config.label == "translate+web+basic_rag+corrective_rag+rewrite"
    assert MethodSpec.named("ablation", 2, 3).label == "ablation[translate+web+basic_rag]"
    with pytest.raises(ValueError):
        MethodSpec.named("ablation")
    with pytest.raises(ValueError):
        MethodSpec.named("oracle")


def test_missing_ports_fail_before_any_call(toy_script, toy_bench):
    ports = toy_fixture.scripted_ports(toy_script)
    ports.index = None
    with pytest.raises(IndexRequired):
        run_method(toy_bench, MethodSpec.clara(1), ports)
    assert ports.llm.call_count == 0
    ports = toy_fixture.scripted_ports(toy_script)
    ports.search = None
    with pytest.raises(IndexRequired):
        run_method(toy_bench, MethodSpec.web_toolcall(1), ports)


def test_stored_outcomes_rerender_identically(tmp_path, toy_script, toy_bench):
    ports = toy_fixture.scripted_ports(toy_script)
    runs = [run_method(toy_bench, MethodSpec.direct(2), ports), run_method(toy_bench, MethodSpec.clara(2), ports)]
    path = write_run_artifacts(runs, toy_bench, tmp_path)
    doc = json.loads(path.read_text())
    from clara.harness import report_from_runs

    assert render_markdown(report_from_outcomes_document(doc)) == render_markdown(report_from_runs(runs, toy_bench))
    assert (tmp_path / "traces" / "clara" / "q8_PT_r1.json").exists()
    with pytest.raises(VersionMismatch):
        report_from_outcomes_document({**doc, "trace_version": 0})
