import json
from pathlib import Path

import pytest

from binttp.attck_kb import ReasoningGuideline
from binttp.gateway import BackendMode, Gateway, GatewaySettings, load_mock_script, mock_script
from binttp.ingest import binary_from_dict

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def _function(func_id, address, code, name=None, external=False, **extra):
    entry = {"id": func_id, "address": address, "name": name or func_id, "code": code}
    if external:
        entry["external"] = True
    entry.update(extra)
    return entry


def _binary(functions, binary_id="sample", platform="linux"):
    return binary_from_dict({"binary_id": binary_id, "platform": platform, "functions": functions})


@pytest.fixture
def func():
    """导出记录构造器: func("sub_1000", 0x1000, "int sub_1000() { ... }")"""
    return _function


@pytest.fixture
def make_binary():
    return _binary


@pytest.fixture
def make_gateway(tmp_path):
    """(规则, 默认回复) -> (网关, 脚本后端)，不触网"""

    def build(rules=(), default=None, mode=BackendMode.MOCK, **overrides):
        backend = mock_script(list(rules), default=default)
        settings = GatewaySettings(
            model="mock-chat",
            embedding_model="mock-embed",
            mode=mode,
            record_dir=tmp_path / "records",
            parallelism=overrides.pop("parallelism", 1),
            **overrides,
        )
        return Gateway(settings, backend=backend, sleep=lambda _: None), backend

    return build


def _technique(ttp_id, name, description, tactics=("defense-evasion",), stix_id=None, **extra):
    obj = {
        "type": "attack-pattern",
        "id": stix_id or f"attack-pattern--{ttp_id.lower().replace('.', '-')}",
        "name": name,
        "description": description,
        "kill_chain_phases": [{"kill_chain_name": "mitre-attack", "phase_name": t} for t in tactics],
        "external_references": [{"source_name": "mitre-attack", "external_id": ttp_id}],
    }
    if "." in ttp_id:
        obj["x_mitre_is_subtechnique"] = True
    obj.update(extra)
    return obj


def _bundle(objects, version="16.1"):
    collection = {"type": "x-mitre-collection", "id": "x-mitre-collection--test", "x_mitre_version": version}
    return {"type": "bundle", "id": "bundle--test", "objects": [collection, *objects]}


@pytest.fixture
def technique():
    return _technique


@pytest.fixture
def stix_bundle():
    return _bundle


@pytest.fixture
def mini_bundle():
    return json.loads((FIXTURES / "mini_attack_bundle.json").read_text(encoding="utf-8"))


@pytest.fixture
def make_guideline():
    def build(ttp_id, version="16.1", required=("the code performs the characteristic action",)):
        return ReasoningGuideline.from_dict(
            {
                "ttp_id": ttp_id,
                "classification": "behavior_focused",
                "required_components": list(required),
                "positive_indicators": ["calls into the relevant system API"],
                "negative_indicators": ["only reads configuration for display"],
                "differentiation_criteria": ["distinguish from T1057 process discovery"],
                "positive_examples": ["enumerates and terminates security processes", "patches ETW"],
                "negative_examples": ["logs its own process id", "prints a directory listing"],
                "attck_version": version,
            }
        )

    return build


@pytest.fixture
def script_gateway(tmp_path):
    """fixtures/mock_script.json 驱动的网关"""

    def build(mode=BackendMode.MOCK, parallelism=1):
        backend = load_mock_script(FIXTURES / "mock_script.json")
        settings = GatewaySettings(
            model="mock-chat",
            embedding_model="mock-embed",
            mode=mode,
            record_dir=tmp_path / "records",
            parallelism=parallelism,
            mock_script=FIXTURES / "mock_script.json",
        )
        return Gateway(settings, backend=backend, sleep=lambda _: None), backend

    return build
