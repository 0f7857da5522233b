import json
import re

import pytest

from binttp.callgraph import build_call_graph, condense_and_order
from binttp.errors import RenamePassError, ValidationError
from binttp.gateway import load_mock_script
from binttp.ingest import binary_to_dict, load_binary_export
from binttp.renamer import (
    PLACEHOLDER,
    RenamePassState,
    parse_rename_response,
    rename_binary,
    rename_function,
    rewrite_identifiers,
    sanitize_identifier,
)


@pytest.fixture
def sample(fixtures_dir):
    return load_binary_export(fixtures_dir / "sample_export.json")


@pytest.fixture
def golden(fixtures_dir):
    return json.loads((fixtures_dir / "sample_renamed.json").read_text(encoding="utf-8"))


def _rename(binary, gateway, **kwargs):
    order = condense_and_order(build_call_graph(binary))
    return rewrite_identifiers(rename_binary(binary, order, gateway, **kwargs))


def _echo_responder(prompt):
    name = re.search(r"int (\w+)\(void\)", prompt).group(1)
    return f"SUMMARY: does the work of {name}.\nNAME: {name}_renamed"


def test_sample_matches_golden(sample, golden, script_gateway):
    gateway, backend = script_gateway()
    renamed = _rename(sample, gateway)
    assert binary_to_dict(renamed) == golden
    # 10 个函数各一次，加上环内两个函数的回访
    assert backend.chat_calls == 12
    assert backend.counters["rename.sub_1700"] == 2
    assert backend.counters["rename.sub_1800"] == 2
    assert backend.counters["rename.sub_1900"] == 1


def test_parallel_run_matches_golden(sample, golden, script_gateway):
    gateway, backend = script_gateway(parallelism=4)
    renamed = _rename(sample, gateway, parallelism=4)
    assert binary_to_dict(renamed) == golden
    assert backend.chat_calls == 12


def test_leaf_sees_only_its_own_code(sample, script_gateway):
    gateway, backend = script_gateway()
    _rename(sample, gateway)
    leaf = next(p for p in backend.prompts if "unsigned int sub_1900" in p)
    assert "Summaries of the direct callees:\n(none)" in leaf


def test_caller_gets_direct_callee_summaries_only(sample, script_gateway):
    gateway, backend = script_gateway()
    _rename(sample, gateway)
    root = next(p for p in backend.prompts if "int sub_1000(void)" in p)
    assert "- find_process_by_name: Enumerates running processes" in root
    assert "- wipe_auth_logs: Deletes authentication" in root
    # 间接被调用者不出现
    assert "hash_process_name:" not in root
    assert "kill_security_processes();" in root


def test_cycle_uses_placeholders_then_revisits(sample, script_gateway):
    gateway, backend = script_gateway()
    state = RenamePassState()
    order = condense_and_order(build_call_graph(sample))
    rename_binary(sample, order, gateway, state)

    walk = [p for p in backend.prompts if "int sub_1700(const char *dir)" in p]
    entry = [p for p in backend.prompts if "int sub_1800(const char *dir, struct dirent *ent)" in p]
    assert len(walk) == 2 and len(entry) == 2
    assert PLACEHOLDER.format(name="sub_1800") in walk[0]
    # 第一遍里 sub_1700 已有临时结果，直接给出名称与摘要
    assert PLACEHOLDER.format(name="sub_1700") not in entry[0]
    assert "- walk_directory: Walks a directory and handles each entry." in entry[0]
    assert "walk_directory(" in entry[0]
    assert "- copy_file_to_stage: Copies a file" in entry[0]
    assert "- handle_directory_entry: Recurses into subdirectories" in walk[1]
    assert "summary pending" not in walk[1] and "summary pending" not in entry[1]

    assert state.passes["f_1700"] == 2 and state.passes["f_1800"] == 2
    assert state.passes["f_1500"] == 1
    assert state.revisit_queue == [] and state.placeholders == set()


def test_acyclic_chain_one_call_per_function(func, make_binary, make_gateway):
    functions = [
        func(f"f{i}", 0x100 * (i + 1), f"int sub_{i}(void)\n{{\n  return sub_{i + 1}();\n}}", name=f"sub_{i}")
        for i in range(4)
    ]
    functions.append(func("f4", 0x500, "int sub_4(void)\n{\n  return 4;\n}", name="sub_4"))
    binary = make_binary(functions)
    gateway, backend = make_gateway(default=_echo_responder)
    renamed = _rename(binary, gateway)
    assert backend.chat_calls == 5
    assert [f.recovered_name for f in renamed.functions] == [f"sub_{i}_renamed" for i in range(5)]
    assert "return sub_1_renamed();" in renamed.by_id("f0").decompiled_code
    # 最深的函数最先处理
    assert "int sub_4(void)" in backend.prompts[0]


def test_ten_function_chain(func, make_binary, make_gateway):
    functions = [
        func(f"f{i}", 0x10 * (i + 1), f"int sub_{i}(void)\n{{\n  return sub_{i + 1}();\n}}", name=f"sub_{i}")
        for i in range(9)
    ]
    functions.append(func("f9", 0xa0, "int sub_9(void)\n{\n  return 9;\n}", name="sub_9"))
    gateway, backend = make_gateway(default=_echo_responder)
    _rename(make_binary(functions), gateway)
    assert backend.chat_calls == 10


def test_resume_skips_finished_functions(sample, golden, script_gateway, make_gateway, fixtures_dir, tmp_path):
    checkpoint = tmp_path / "rename_checkpoint.json"
    rules = [r for r in load_mock_script(fixtures_dir / "mock_script.json").rules if r.name != "rename.sub_1000"]
    broken, _ = make_gateway(rules)
    order = condense_and_order(build_call_graph(sample))
    with pytest.raises(RenamePassError) as info:
        rename_binary(sample, order, broken, checkpoint=checkpoint)
    assert info.value.func_id == "f_1000"

    state = RenamePassState.load(checkpoint)
    assert len(state.completed) == 9
    gateway, backend = script_gateway()
    renamed = rewrite_identifiers(rename_binary(sample, order, gateway, state, checkpoint))
    assert backend.chat_calls == 1
    assert binary_to_dict(renamed) == golden

    again, backend = script_gateway()
    rename_binary(sample, order, again, RenamePassState.load(checkpoint))
    assert backend.chat_calls == 0


def test_unparseable_reply_falls_back_after_one_retry(func, make_binary, make_gateway):
    binary = make_binary([func("f", 0x4010, "int sub_4010(void)\n{\n  return 0;\n}", name="sub_4010")])
    gateway, backend = make_gateway(default="I am not sure what this does.")
    result = rename_function(binary.by_id("f"), {}, gateway)
    assert backend.chat_calls == 2
    assert result.recovered_name == "fn_4010"


@pytest.mark.parametrize(
    "reply, name",
    [
        ("SUMMARY: Opens a socket.\nNAME: open_socket", "open_socket"),
        ("1. SUMMARY: Opens a socket.\n2. NAME: `connect-c2`", "connect_c2"),
        ("SUMMARY: Decodes a blob.\nNAME: 3des_decrypt", "fn_3des_decrypt"),
    ],
)
def test_parse_rename_response(reply, name):
    assert parse_rename_response(reply).recovered_name == name


def test_parse_rename_response_rejects_missing_lines():
    assert parse_rename_response("NAME: only_name") is None
    assert parse_rename_response("SUMMARY: x\nNAME: ---") is None
    assert sanitize_identifier("  ") is None


def test_gateway_failure_names_function(func, make_binary, make_gateway):
    binary = make_binary([func("f", 1, "int sub_1(void)\n{\n  return 0;\n}", name="sub_1")])
    gateway, _ = make_gateway()
    with pytest.raises(RenamePassError, match="f"):
        rename_function(binary.by_id("f"), {}, gateway)


def test_rewrite_identifiers_resolves_collisions(func, make_binary):
    binary = make_binary(
        [
            func("a", 0x20, "int sub_20(void)\n{\n  return sub_10() + kill(0, 9);\n}", name="sub_20",
                 recovered_name="helper", summary="b"),
            func("b", 0x10, "int sub_10(void)\n{\n  return 1;\n}", name="sub_10", recovered_name="helper",
                 summary="a"),
            func("c", 0x30, "int sub_30(void)\n{\n  return 0;\n}", name="sub_30", recovered_name="kill",
                 summary="c"),
            func("imp", 0x8000, "", name="kill", external=True),
        ]
    )
    rewritten = rewrite_identifiers(binary)
    assert rewritten.by_id("b").recovered_name == "helper"
    assert rewritten.by_id("a").recovered_name == "helper_2"
    assert rewritten.by_id("c").recovered_name == "kill_2"
    code = rewritten.by_id("a").decompiled_code
    assert code.startswith("int helper_2(void)")
    assert "return helper() + kill(0, 9);" in code
    assert rewritten.by_id("a").callee_names == {"helper", "kill"}


def test_rewrite_requires_all_names(sample):
    with pytest.raises(ValidationError):
        rewrite_identifiers(sample)
