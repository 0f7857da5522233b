import json

import pytest

from binttp.analyzer import (
    FORCE_PROMPT,
    MALFORMED_EVIDENCE,
    SYSTEM_PROMPT,
    AnalysisBudget,
    AnalyzerSettings,
    Verdict,
    analyze_binary,
    build_seed_prompt,
    explore_and_decide,
    parse_tool_request,
    parse_verdict,
    tool_retrieve_caller,
    tool_retrieve_function,
    transcript_path,
    truncate_code,
    write_report,
)
from binttp.attck_kb import catalog_from_bundle
from binttp.callgraph import build_call_graph
from binttp.errors import NotFoundError, ValidationError
from binttp.ingest import load_binary_export
from binttp.retrieval import CandidatePair, CandidateSet


@pytest.fixture
def renamed(fixtures_dir):
    return load_binary_export(fixtures_dir / "sample_renamed.json")


@pytest.fixture
def graph(renamed):
    return build_call_graph(renamed)


@pytest.fixture
def catalog(mini_bundle):
    return catalog_from_bundle(mini_bundle)


def _scripted(*replies):
    """按对话中 [user] 轮数依次作答"""

    def respond(prompt):
        turn = prompt.count("[user]\n")
        return replies[min(turn, len(replies)) - 1]

    return respond


def test_budget_validation():
    assert AnalysisBudget().turn_cap == 10
    with pytest.raises(ValidationError):
        AnalysisBudget(max_tool_calls=-1)
    with pytest.raises(ValidationError):
        AnalyzerSettings(per_function_chars=0)
    assert AnalyzerSettings(no_explorer=True).budget.max_tool_calls == 0


def test_verdict_present_needs_evidence():
    with pytest.raises(ValidationError):
        Verdict(present=True, evidence=" ", ttp_id="T1057", func_id="f")
    assert not Verdict(present=False, evidence="none", ttp_id="T1057", func_id="f").flagged


@pytest.mark.parametrize(
    "reply, expected",
    [
        ("VERDICT: PRESENT\nEVIDENCE: kills avguard", (True, "kills avguard")),
        ("Reasoning first.\nVERDICT: **ABSENT**\nEVIDENCE: only prints", (False, "only prints")),
        ("VERDICT: ABSENT", (False, "no supporting behavior identified")),
        ("VERDICT: PRESENT", None),
        ("I think it is present", None),
    ],
)
def test_parse_verdict(reply, expected):
    assert parse_verdict(reply) == expected


def test_parse_tool_request():
    assert parse_tool_request("TOOL: retrieve_caller(foo)") == ("retrieve_caller", "foo")
    assert parse_tool_request("ok\nTOOL: retrieve_function helper@0x20") == ("retrieve_function", "helper@0x20")
    assert parse_tool_request("TOOL: delete_everything x") is None


def test_tool_retrieve_function(renamed):
    text = tool_retrieve_function(renamed, "copy_file_to_stage")
    assert text.startswith("FUNCTION copy_file_to_stage@0x1600\nint copy_file_to_stage(const char *src)")
    # 原始名同样可以解析
    assert tool_retrieve_function(renamed, "sub_1600") == text
    assert tool_retrieve_function(renamed, "missing").startswith("NOT FOUND (retrieve_function)")
    assert "external library routine" in tool_retrieve_function(renamed, "kill")


def test_tool_retrieve_caller(graph):
    assert tool_retrieve_caller(graph, "find_process_by_name") == ["run_payload", "kill_security_processes"]
    assert tool_retrieve_caller(graph, "run_payload") == []
    with pytest.raises(NotFoundError):
        tool_retrieve_caller(graph, "missing")


def test_truncate_code_keeps_head():
    code = "A" * 50 + "B" * 50
    out = truncate_code(code, 60)
    assert out.startswith("A" * 50 + "B" * 10)
    assert "40 more characters truncated" in out
    assert truncate_code("short", 60) == "short"


def test_explorer_follows_callers_to_decide(renamed, graph, catalog, script_gateway, make_guideline):
    gateway, backend = script_gateway()
    budget = AnalysisBudget()
    verdict, bundle = explore_and_decide(
        CandidatePair("f_1600", "T1074"), renamed, graph, make_guideline("T1074"), gateway, budget, catalog
    )
    assert verdict.present and not verdict.flagged
    assert "handle_directory_entry" in verdict.evidence
    assert [(c.tool, c.argument, c.outcome) for c in bundle.tool_log] == [
        ("retrieve_caller", "copy_file_to_stage", "found"),
        ("retrieve_function", "handle_directory_entry", "found"),
    ]
    assert bundle.retrieved == [("f_1800", "caller")]
    assert bundle.turns == 3 <= budget.turn_cap
    assert bundle.transcript[0] == {"role": "system", "content": SYSTEM_PROMPT}
    assert bundle.transcript[1]["content"].startswith("Technique under analysis: T1074 Data Staged")
    assert "Reasoning guideline for T1074" in bundle.transcript[1]["content"]
    assert backend.counters["analyze.T1074.copy_seed"] == 1


def test_without_explorer_the_same_pair_is_absent(renamed, graph, catalog, script_gateway, make_guideline):
    gateway, _ = script_gateway()
    budget = AnalyzerSettings(no_explorer=True).budget
    verdict, bundle = explore_and_decide(
        CandidatePair("f_1600", "T1074"), renamed, graph, make_guideline("T1074"), gateway, budget, catalog
    )
    assert not verdict.present and not verdict.flagged
    assert bundle.tool_log == [] and bundle.turns == 1


def test_repeated_request_is_served_from_conversation(renamed, graph, make_gateway):
    gateway, _ = make_gateway(
        default=_scripted(
            "TOOL: retrieve_function hash_process_name",
            "TOOL: retrieve_function hash_process_name",
            "VERDICT: ABSENT\nEVIDENCE: hashing only",
        )
    )
    verdict, bundle = explore_and_decide(
        CandidatePair("f_1300", "T1057"), renamed, graph, None, gateway, AnalysisBudget()
    )
    assert [c.outcome for c in bundle.tool_log] == ["found", "cached"]
    assert bundle.retrieved == [("f_1900", "callee")]
    assert "ALREADY PROVIDED" in bundle.transcript[-2]["content"]
    assert verdict.evidence == "hashing only"


def test_not_found_and_ambiguous_names(func, make_binary, make_gateway):
    binary = make_binary(
        [
            func("a", 0x10, "int helper(void)\n{\n  return 1;\n}", name="sub_10", recovered_name="helper", summary="x"),
            func("b", 0x20, "int helper(void)\n{\n  return 2;\n}", name="sub_20", recovered_name="helper", summary="y"),
            func("s", 0x30, "int seed(void)\n{\n  return 0;\n}", name="sub_30", recovered_name="seed", summary="z"),
        ]
    )
    gateway, _ = make_gateway(
        default=_scripted(
            "TOOL: retrieve_function nothing_here",
            "TOOL: retrieve_function helper",
            "TOOL: retrieve_function helper@0x20",
            "VERDICT: ABSENT\nEVIDENCE: nothing relevant",
        )
    )
    _, bundle = explore_and_decide(
        CandidatePair("s", "T1057"), binary, build_call_graph(binary), None, gateway, AnalysisBudget()
    )
    assert [c.outcome for c in bundle.tool_log] == ["not_found", "ambiguous", "found"]
    assert bundle.retrieved == [("b", "callee")]
    ambiguous = bundle.transcript[5]["content"]
    assert "- helper@0x10" in ambiguous and "- helper@0x20" in ambiguous


def test_turns_never_exceed_budget(renamed, graph, make_gateway):
    gateway, _ = make_gateway(default="TOOL: retrieve_caller run_payload")
    budget = AnalysisBudget(max_tool_calls=3)
    verdict, bundle = explore_and_decide(CandidatePair("f_1000", "T1057"), renamed, graph, None, gateway, budget)
    assert bundle.turns <= budget.turn_cap
    assert len(bundle.tool_log) == 3
    assert verdict.flagged and not verdict.present
    assert verdict.evidence == MALFORMED_EVIDENCE
    assert any(FORCE_PROMPT in m["content"] for m in bundle.transcript if m["role"] == "user")


def test_context_limit_disables_tools(renamed, graph, make_gateway):
    gateway, _ = make_gateway(
        default=_scripted("TOOL: retrieve_function read_process_cmdline", "VERDICT: ABSENT\nEVIDENCE: seed only")
    )
    seed = build_seed_prompt(renamed.by_id("f_1300"), "T1057", None, AnalysisBudget())
    budget = AnalysisBudget(max_context_chars=len(seed) + 10)
    verdict, bundle = explore_and_decide(CandidatePair("f_1300", "T1057"), renamed, graph, None, gateway, budget)
    assert [c.outcome for c in bundle.tool_log] == ["context_limit"]
    assert bundle.retrieved == []
    assert bundle.transcript[3]["content"] == FORCE_PROMPT
    assert verdict.evidence == "seed only"


def test_one_reformat_retry(renamed, graph, make_gateway):
    gateway, _ = make_gateway(default=_scripted("hmm, hard to say", "VERDICT: PRESENT\nEVIDENCE: reads /proc"))
    verdict, bundle = explore_and_decide(
        CandidatePair("f_1300", "T1057"), renamed, graph, None, gateway, AnalysisBudget()
    )
    assert verdict.present and bundle.turns == 2


def test_no_guideline_mode_omits_checklist(renamed, graph, script_gateway):
    gateway, _ = script_gateway()
    _, bundle = explore_and_decide(CandidatePair("f_1300", "T1057"), renamed, graph, None, gateway, AnalysisBudget())
    assert "Reasoning guideline" not in bundle.transcript[1]["content"]


def test_guideline_must_match_pair(renamed, graph, script_gateway, make_guideline):
    gateway, _ = script_gateway()
    with pytest.raises(ValidationError):
        explore_and_decide(
            CandidatePair("f_1300", "T1057"), renamed, graph, make_guideline("T1562"), gateway, AnalysisBudget()
        )


def _candidates(*pairs):
    return CandidateSet(pairs=[CandidatePair(func_id, ttp_id) for func_id, ttp_id in pairs])


def test_analyze_binary_report(renamed, graph, catalog, script_gateway, make_guideline, tmp_path):
    gateway, _ = script_gateway()
    candidates = _candidates(
        ("f_1300", "T1057"),
        ("f_1200", "T1070"),
        ("f_1500", "T1074"),
        ("f_1600", "T1074"),
        ("f_1100", "T1562"),
        ("f_1100", "T1562"),
        ("f_1900", "T1057"),
    )
    guidelines = {t: make_guideline(t) for t in ("T1057", "T1070", "T1074", "T1562")}
    report = analyze_binary(candidates, renamed, graph, guidelines, gateway, catalog=catalog, run_dir=tmp_path)

    assert len(report.pairs) == 6
    assert report.predicted_ttps == ["T1057", "T1070", "T1074", "T1562"]
    assert [item.func_id for item in report.predicted()["T1074"]] == ["f_1500", "f_1600"]
    assert report.errors == []

    data = report.to_dict()
    assert data["attck_version"] == "16.1"
    staged = next(entry for entry in data["predicted_ttps"] if entry["ttp_id"] == "T1074")
    assert staged["name"] == "Data Staged"
    assert {f["name"] for f in staged["functions"]} == {"stage_collected_files", "copy_file_to_stage"}

    transcript = json.loads(transcript_path(tmp_path, "T1074", "f_1600").read_text(encoding="utf-8"))
    assert transcript["verdict"]["present"] is True
    assert len(transcript["tool_log"]) == 2

    json_path, text_path = write_report(report, tmp_path)
    assert json.loads(json_path.read_text(encoding="utf-8")) == data
    text = text_path.read_text(encoding="utf-8")
    assert "copy_file_to_stage" in text and "PRESENT" in text


def test_missing_guideline_only_fails_that_pair(renamed, graph, catalog, script_gateway, make_guideline):
    gateway, _ = script_gateway()
    candidates = _candidates(("f_1300", "T1057"), ("f_1200", "T1070"))
    report = analyze_binary(candidates, renamed, graph, {"T1057": make_guideline("T1057")}, gateway, catalog=catalog)
    assert [item.ttp_id for item in report.errors] == ["T1070"]
    assert report.predicted_ttps == ["T1057"]


def test_gateway_failure_is_recorded_per_pair(renamed, graph, make_gateway):
    gateway, _ = make_gateway([("find_process_by_name@0x1300", "VERDICT: PRESENT\nEVIDENCE: reads /proc")])
    report = analyze_binary(
        _candidates(("f_1300", "T1057"), ("f_1200", "T1057")),
        renamed,
        graph,
        {},
        gateway,
        AnalyzerSettings(no_guideline=True),
    )
    assert report.predicted_ttps == ["T1057"]
    assert [item.func_id for item in report.errors] == ["f_1200"]
    assert "没有规则匹配" in report.errors[0].error


def test_report_rendering_is_deterministic(renamed, graph, catalog, script_gateway, make_guideline):
    renders = []
    for _ in range(2):
        gateway, _ = script_gateway(parallelism=4)
        report = analyze_binary(
            _candidates(("f_1600", "T1074"), ("f_1300", "T1057")),
            renamed,
            graph,
            {t: make_guideline(t) for t in ("T1057", "T1074")},
            gateway,
            catalog=catalog,
            parallelism=4,
        )
        renders.append(report.render())
    assert renders[0] == renders[1]


def test_explorer_serves_functions_through_the_tool(renamed, graph, make_gateway, monkeypatch):
    from binttp import analyzer

    served = []
    real = analyzer.tool_retrieve_function

    def spy(binary, name, per_function_chars=8000):
        served.append(name)
        return real(binary, name, per_function_chars)

    monkeypatch.setattr(analyzer, "tool_retrieve_function", spy)
    gateway, _ = make_gateway(
        default=_scripted(
            "TOOL: retrieve_function hash_process_name",
            "TOOL: retrieve_function no_such_function",
            "VERDICT: ABSENT\nEVIDENCE: hashing only",
        )
    )
    _, bundle = explore_and_decide(CandidatePair("f_1300", "T1057"), renamed, graph, None, gateway, AnalysisBudget())
    assert served == ["hash_process_name", "no_such_function"]
    assert bundle.transcript[3]["content"] == real(renamed, "hash_process_name")
    assert bundle.transcript[5]["content"] == real(renamed, "no_such_function")


def test_seed_prompt_carries_guideline_text_verbatim(renamed, graph, catalog, make_gateway, make_guideline):
    guideline = make_guideline(
        "T1057",
        required=("the code walks /proc and reads each cmdline", "results feed a kill or injection decision"),
    )
    gateway, backend = make_gateway(default="VERDICT: ABSENT\nEVIDENCE: nothing")
    _, bundle = explore_and_decide(
        CandidatePair("f_1300", "T1057"), renamed, graph, guideline, gateway, AnalysisBudget(), catalog
    )
    seed = bundle.transcript[1]["content"]
    for text in guideline.required_components + guideline.differentiation_criteria:
        assert text in seed
    assert seed in backend.prompts[0]
