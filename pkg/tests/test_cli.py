import json

import pytest

from binttp import gateway as gateway_module
from binttp.cli import main
from binttp.errors import NetworkForbiddenError


@pytest.fixture
def workspace(tmp_path, fixtures_dir):
    config = tmp_path / "binttp.toml"
    config.write_text(
        "\n".join(
            [
                'mode = "record"',
                f"record_dir = '{tmp_path / 'records'}'",
                f"mock_script = '{fixtures_dir / 'mock_script.json'}'",
                "parallelism = 1",
                "",
                "[provider]",
                'model = "mock-chat"',
                'embedding_model = "mock-embed"',
                "",
                "[paths]",
                f"run_dir = '{tmp_path / 'runs' / 'record'}'",
                f"attck_bundle = '{fixtures_dir / 'mini_attack_bundle.json'}'",
                f"guideline_dir = '{tmp_path / 'guidelines'}'",
                "",
            ]
        ),
        encoding="utf-8",
    )
    return {
        "root": tmp_path,
        "config": str(config),
        "export": str(fixtures_dir / "sample_export.json"),
    }


@pytest.fixture
def no_network(monkeypatch):
    def refuse(*args, **kwargs):
        raise NetworkForbiddenError("测试中禁止访问网络")

    monkeypatch.setattr(gateway_module.HttpBackend, "chat", refuse)
    monkeypatch.setattr(gateway_module.HttpBackend, "embed", refuse)


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, json.loads(out) if code == 0 else out


def _run_dir(workspace, name):
    path = workspace["root"] / "runs" / name
    return path, f"paths.run_dir='{path}'"


def test_record_then_replay_is_byte_identical(workspace, capsys, no_network):
    code, summary = _run(capsys, "guidelines", "--config", workspace["config"])
    assert code == 0
    assert summary["written"] == 6 and summary["failed"] == []
    assert summary["gateway"]["chat_backend_calls"] == 18

    code, summary = _run(capsys, "run", workspace["export"], "--config", workspace["config"])
    assert code == 0
    assert summary["rename"]["renamed"] == 10
    assert summary["rename"]["model_calls"] == 12
    assert summary["candidates"]["final"] == 5
    assert summary["analysis"]["predicted_ttps"] == ["T1057", "T1070", "T1074", "T1562"]
    assert summary["analysis"]["errors"] == 0

    outputs = []
    for name in ("replay_a", "replay_b"):
        run_dir, override = _run_dir(workspace, name)
        code, summary = _run(
            capsys, "run", workspace["export"], "--config", workspace["config"],
            "--set", 'mode="replay"', "--set", override,
        )
        assert code == 0
        assert summary["gateway"]["chat_backend_calls"] == 0
        assert summary["gateway"]["replayed"] > 0
        outputs.append(((run_dir / "report.json").read_bytes(), (run_dir / "report.txt").read_bytes()))
        manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["config"]["mode"] == "replay"
        assert manifest["resolved_config"]["gateway"]["mode"] == "replay"
        assert manifest["resolved_config"]["paths"]["run_dir"] == str(run_dir)

    recorded = workspace["root"] / "runs" / "record"
    assert outputs[0] == outputs[1]
    assert outputs[0][0] == (recorded / "report.json").read_bytes()
    assert (recorded / "transcripts" / "T1074__f_1600.json").exists()


def test_replay_without_records_fails(workspace, capsys, no_network):
    _, override = _run_dir(workspace, "empty")
    code = main(["run", workspace["export"], "--config", workspace["config"], "--set", 'mode="replay"', "--set", override])
    assert code == 1
    assert "[rename]" in capsys.readouterr().err


def test_missing_required_key_exits_2(workspace, capsys, tmp_path):
    broken = tmp_path / "broken.toml"
    text = (tmp_path / "binttp.toml").read_text(encoding="utf-8").replace('model = "mock-chat"\n', "")
    broken.write_text(text, encoding="utf-8")
    code = main(["guidelines", "--config", str(broken)])
    assert code == 2
    assert "provider.model" in capsys.readouterr().err


def test_rename_resume_makes_no_calls(workspace, capsys, no_network):
    code, first = _run(capsys, "rename", workspace["export"], "--config", workspace["config"])
    assert code == 0
    assert first["model_calls"] == 12 and first["cyclic_functions"] == 2

    code, again = _run(capsys, "rename", workspace["export"], "--config", workspace["config"], "--resume")
    assert code == 0
    assert again["model_calls"] == 0
    renamed = json.loads((workspace["root"] / "runs" / "record" / "renamed.json").read_text(encoding="utf-8"))
    assert {f["recovered_name"] for f in renamed["functions"] if not f.get("external")} >= {"copy_file_to_stage"}


def test_no_explorer_ablation(workspace, capsys, no_network):
    assert _run(capsys, "guidelines", "--config", workspace["config"])[0] == 0
    run_dir, override = _run_dir(workspace, "no_explorer")
    code, summary = _run(
        capsys, "run", workspace["export"], "--config", workspace["config"], "--set", override,
        "--ablation", "no_explorer",
    )
    assert code == 0
    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    assert report["ablation"] == {"no_explorer": True, "no_guideline": False}
    assert all(pair["tool_calls"] == 0 for pair in report["pairs"])
    copy_pair = next(p for p in report["pairs"] if p["func_id"] == "f_1600")
    assert copy_pair["present"] is False
    assert summary["analysis"]["predicted_ttps"] == ["T1057", "T1070", "T1074", "T1562"]


def test_eval_and_stats(workspace, capsys, no_network, tmp_path):
    assert _run(capsys, "guidelines", "--config", workspace["config"])[0] == 0
    assert _run(capsys, "run", workspace["export"], "--config", workspace["config"])[0] == 0
    run_dir = workspace["root"] / "runs" / "record"

    labels = tmp_path / "labels.json"
    labels.write_text(
        json.dumps(
            {
                "labels": [
                    {"function": "f_1000", "ttps": ["T1562"]},
                    {"function": "f_1100", "ttps": ["T1562"]},
                    {"function": "f_1200", "ttps": ["T1070"]},
                    {"function": "f_1300", "ttps": ["T1057"]},
                    {"function": "f_1500", "ttps": ["T1074"]},
                    {"function": "f_1600", "ttps": ["T1074"]},
                ]
            }
        ),
        encoding="utf-8",
    )
    truth = tmp_path / "truth.json"
    truth.write_text(
        json.dumps({"reported": ["T1057", "T1070", "T1083"], "validated": ["T1057", "T1070", "T1074", "T1562"]}),
        encoding="utf-8",
    )
    out = tmp_path / "eval.json"
    code, summary = _run(
        capsys, "eval", "--report", str(run_dir / "report.json"), "--annotations", str(labels),
        "--export", str(run_dir / "renamed.json"), "--truth", str(truth), "--out", str(out),
    )
    assert code == 0
    assert summary["average"]["precision"] == 100.0
    assert summary["average"]["recall"] == 87.5
    assert summary["overall"]["covered"] == 2 and summary["overall"]["reported"] == 3
    assert summary["overall"]["precision"] == 1.0
    assert out.with_suffix(".txt").exists()

    code, stats = _run(capsys, "stats", str(run_dir / "candidates.json"))
    assert code == 0
    assert stats["dense"] == 60 and stats["final"] == 5
    assert stats["reduction"]["final"] == round(1 - 5 / 60, 4)


def test_ingest_without_config(workspace, capsys, tmp_path):
    dot = tmp_path / "graph.dot"
    code, summary = _run(capsys, "ingest", workspace["export"], "--dot", str(dot))
    assert code == 0
    assert summary["functions"] == 12 and summary["external"] == 2
    assert summary["cyclic_functions"] == 2
    assert dot.read_text(encoding="utf-8").startswith("digraph")


@pytest.mark.parametrize(
    "content",
    ["{not json", json.dumps([1, 2]), json.dumps({"pairs": [{"func_id": "f_1000"}]})],
)
def test_eval_rejects_malformed_report(capsys, tmp_path, content):
    report = tmp_path / "report.json"
    report.write_text(content, encoding="utf-8")
    labels = tmp_path / "labels.json"
    labels.write_text(json.dumps({"labels": [{"function": "f_1000", "ttps": ["T1562"]}]}), encoding="utf-8")
    code = main(["eval", "--report", str(report), "--annotations", str(labels), "--out", str(tmp_path / "eval.json")])
    assert code == 1
    assert "分析报告" in capsys.readouterr().err


@pytest.mark.parametrize("content", ["", json.dumps({"pairs": []}), json.dumps({"counts": {"dense": 1}, "pairs": [{"x": 1}]})])
def test_stats_rejects_malformed_candidates(capsys, tmp_path, content):
    path = tmp_path / "candidates.json"
    path.write_text(content, encoding="utf-8")
    assert main(["stats", str(path)]) == 1
    assert "候选集文件" in capsys.readouterr().err
