"""
运行配置：单个 TOML 文件 + 命令行 --set key=value 覆盖
"""

from __future__ import annotations

import copy
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .analyzer import AnalyzerSettings
from .attck_kb import DEFAULT_PROCEDURE_LIMIT
from .errors import ConfigError, ValidationError
from .gateway import BackendMode, GatewaySettings
from .retrieval import RetrievalConfig

REQUIRED_KEYS = ("mode", "provider.model", "provider.embedding_model", "paths.run_dir")


@dataclass(frozen=True)
class PathSettings:
    run_dir: Path
    attck_bundle: Path | None = None
    guideline_dir: Path = Path("guidelines")
    procedure_limit: int = DEFAULT_PROCEDURE_LIMIT


@dataclass
class RunConfig:
    gateway: GatewaySettings
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    analyzer: AnalyzerSettings = field(default_factory=AnalyzerSettings)
    paths: PathSettings = field(default_factory=lambda: PathSettings(run_dir=Path("runs/latest")))
    raw: dict = field(default_factory=dict)

    def snapshot(self) -> dict:
        """写入 manifest 的配置快照（覆盖已合并）"""
        return copy.deepcopy(self.raw)

    def require_bundle(self) -> Path:
        if self.paths.attck_bundle is None:
            raise ConfigError("paths.attck_bundle", "未配置 ATT&CK bundle 路径")
        if not self.paths.attck_bundle.exists():
            raise ConfigError("paths.attck_bundle", f"文件不存在: {self.paths.attck_bundle}")
        return self.paths.attck_bundle


def parse_override(text: str) -> tuple[str, Any]:
    """key=value；value 先按 TOML 字面量解析，失败按字符串"""
    key, sep, value = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(text, "覆盖项格式应为 key=value")
    try:
        parsed = tomllib.loads(f"v = {value.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value.strip()
    return key, parsed


def apply_overrides(data: dict, overrides: Iterable[str]) -> dict:
    data = copy.deepcopy(data)
    for item in overrides:
        key, value = parse_override(item)
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(key, f"{part} 不是配置节")
            node = child
        node[parts[-1]] = value
    return data


def _get(data: dict, dotted: str, default: Any = None) -> Any:
    node: Any = data
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def _typed(data: dict, key: str, kind: type | tuple[type, ...], default: Any) -> Any:
    value = _get(data, key, default)
    if value is None:
        return None
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or (isinstance(value, bool) and kind is not bool):
        raise ConfigError(key, f"类型错误: {value!r}")
    return value


def _optional_path(data: dict, key: str, default: str | None = None) -> Path | None:
    value = _typed(data, key, str, default)
    return Path(value) if value else None


def config_from_dict(data: dict) -> RunConfig:
    for key in REQUIRED_KEYS:
        if _get(data, key) in (None, ""):
            raise ConfigError(key, "缺少必填配置项")

    try:
        mode = BackendMode(_typed(data, "mode", str, None))
    except ValueError as error:
        raise ConfigError("mode", f"未知模式 {data['mode']!r}，应为 live/record/replay/mock") from error

    parallelism = _typed(data, "parallelism", int, 4)
    if parallelism < 1:
        raise ConfigError("parallelism", "必须 >= 1")
    gateway = GatewaySettings(
        endpoint=_typed(data, "provider.endpoint", str, "https://api.openai.com/v1"),
        model=_typed(data, "provider.model", str, None),
        embedding_model=_typed(data, "provider.embedding_model", str, None),
        api_key_env=_typed(data, "provider.api_key_env", str, "OPENAI_API_KEY"),
        mode=mode,
        cache_dir=_optional_path(data, "cache_dir"),
        record_dir=_optional_path(data, "record_dir"),
        parallelism=parallelism,
        requests_per_minute=_typed(data, "requests_per_minute", float, 0.0),
        temperature=_typed(data, "temperature", float, 0.0),
        mock_script=_optional_path(data, "mock_script"),
    )
    if mode in (BackendMode.RECORD, BackendMode.REPLAY) and gateway.record_dir is None:
        raise ConfigError("record_dir", f"{mode.value} 模式需要 record_dir")
    if mode is BackendMode.MOCK and gateway.mock_script is None:
        raise ConfigError("mock_script", "mock 模式需要 mock_script")

    try:
        retrieval = RetrievalConfig(
            k=_typed(data, "retrieval.k", int, 20),
            tau=_typed(data, "retrieval.tau", float, 0.5),
        )
    except ValidationError as error:
        raise ConfigError("retrieval", str(error)) from error

    try:
        analyzer = AnalyzerSettings(
            max_tool_calls=_typed(data, "analyzer.max_tool_calls", int, 8),
            max_context_chars=_typed(data, "analyzer.max_context_chars", int, 60000),
            per_function_chars=_typed(data, "analyzer.per_function_chars", int, 8000),
            no_explorer=_typed(data, "analyzer.no_explorer", bool, False),
            no_guideline=_typed(data, "analyzer.no_guideline", bool, False),
        )
    except ValidationError as error:
        raise ConfigError("analyzer", str(error)) from error

    paths = PathSettings(
        run_dir=Path(_typed(data, "paths.run_dir", str, None)),
        attck_bundle=_optional_path(data, "paths.attck_bundle"),
        guideline_dir=Path(_typed(data, "paths.guideline_dir", str, "guidelines")),
        procedure_limit=_typed(data, "paths.procedure_limit", int, DEFAULT_PROCEDURE_LIMIT),
    )
    return RunConfig(gateway=gateway, retrieval=retrieval, analyzer=analyzer, paths=paths, raw=data)


def load_config(path: str | Path, overrides: Iterable[str] = ()) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"配置文件不存在: {path}")
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as error:
        raise ConfigError("--config", f"TOML 解析失败: {error}") from error
    return config_from_dict(apply_overrides(data, overrides))


def settings_dict(config: RunConfig) -> dict:
    """已解析配置（路径转字符串），便于日志与调试"""

    def clean(value):
        if isinstance(value, Path):
            return str(value)
        if isinstance(value, BackendMode):
            return value.value
        if isinstance(value, dict):
            return {k: clean(v) for k, v in value.items()}
        return value

    return {
        "gateway": clean(asdict(config.gateway)),
        "retrieval": asdict(config.retrieval),
        "analyzer": asdict(config.analyzer),
        "paths": clean(asdict(config.paths)),
    }
