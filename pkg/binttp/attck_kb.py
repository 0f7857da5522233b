"""
ATT&CK 知识库读取与 TTP 推理指南合成

指南合成五步:
    1 定义提取（确定性）
    2 子技术与程序示例补充（确定性）
    3 分类: behavior_focused / intent_critical（模型）
    4 正反例合成，第 3 步结果作为上下文（模型）
    5 汇总为指南（模型）
"""

from __future__ import annotations

import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

from .errors import (
    ExportParseError,
    GatewayError,
    GuidelineStepError,
    NotFoundError,
    ResponseFormatError,
    ValidationError,
    VersionSkewError,
)
from .fileutil import atomic_write_text, dump_json
from .gateway import Gateway, Message
from .logutil import ProgressCallback, log_message

log = logging.getLogger(__name__)

TTP_ID_RE = re.compile(r"^T\d{4}(\.\d{3})?$")
TTP_ID_SEARCH_RE = re.compile(r"\bT\d{4}(?:\.\d{3})?\b")
CITATION_RE = re.compile(r"\s*\(Citation:[^)]*\)")
PROCEDURE_SOURCES = ("malware--", "tool--", "intrusion-set--", "campaign--")
DEFAULT_PROCEDURE_LIMIT = 10


def is_ttp_id(value: str) -> bool:
    return bool(value) and TTP_ID_RE.match(value) is not None


def parent_id(ttp_id: str) -> str:
    return ttp_id.split(".", 1)[0]


def strip_citations(text: str) -> str:
    return CITATION_RE.sub("", text or "").strip()


@dataclass(frozen=True)
class TtpRecord:
    ttp_id: str
    name: str
    tactics: tuple[str, ...] = ()
    description: str = ""
    sub_techniques: tuple["TtpRecord", ...] = ()
    procedure_examples: tuple[str, ...] = ()
    attck_version: str = "unknown"

    def __post_init__(self) -> None:
        if not is_ttp_id(self.ttp_id):
            raise ValidationError(f"非法的技术 id: {self.ttp_id!r}")
        if any(sub.sub_techniques for sub in self.sub_techniques):
            raise ValidationError(f"{self.ttp_id}: 子技术不能再嵌套子技术")


@dataclass(frozen=True)
class TtpCatalog:
    """父技术目录，按 ttp_id 排序"""

    records: tuple[TtpRecord, ...]
    attck_version: str = "unknown"

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TtpRecord]:
        return iter(self.records)

    def __contains__(self, ttp_id: str) -> bool:
        try:
            self.get(ttp_id)
        except NotFoundError:
            return False
        return True

    @property
    def technique_count(self) -> int:
        return len(self.records)

    def ids(self) -> list[str]:
        return [record.ttp_id for record in self.records]

    def get(self, ttp_id: str) -> TtpRecord:
        for record in self.records:
            if record.ttp_id == ttp_id:
                return record
            if ttp_id.startswith(record.ttp_id + "."):
                for sub in record.sub_techniques:
                    if sub.ttp_id == ttp_id:
                        return sub
        raise NotFoundError("技术", ttp_id)


def _attack_id(obj: dict) -> str | None:
    for ref in obj.get("external_references", []) or []:
        source = ref.get("source_name", "")
        if source.startswith("mitre") and source.endswith("attack") and ref.get("external_id"):
            return ref["external_id"]
    return None


def _active(obj: dict) -> bool:
    return not (obj.get("revoked") or obj.get("x_mitre_deprecated"))


def catalog_from_bundle(bundle: dict, procedure_limit: int = DEFAULT_PROCEDURE_LIMIT) -> TtpCatalog:
    if not isinstance(bundle, dict) or bundle.get("type") != "bundle" or not isinstance(bundle.get("objects"), list):
        raise ExportParseError("不是 STIX bundle（缺少 type=bundle 或 objects 数组）")

    version = "unknown"
    patterns: dict[str, dict] = {}
    relationships: list[dict] = []
    for index, obj in enumerate(bundle["objects"]):
        if not isinstance(obj, dict) or "type" not in obj:
            raise ExportParseError("STIX 对象缺少 type", index=index, field="type")
        kind = obj["type"]
        if kind == "x-mitre-collection" and obj.get("x_mitre_version"):
            version = str(obj["x_mitre_version"])
        elif kind == "attack-pattern" and _active(obj):
            ttp_id = _attack_id(obj)
            if ttp_id and is_ttp_id(ttp_id):
                patterns[obj["id"]] = {**obj, "_ttp_id": ttp_id}
        elif kind == "relationship" and _active(obj):
            relationships.append(obj)

    parent_of: dict[str, str] = {}
    procedures: dict[str, list[tuple[str, str]]] = {}
    for rel in relationships:
        source, target = rel.get("source_ref", ""), rel.get("target_ref", "")
        kind = rel.get("relationship_type")
        if kind == "subtechnique-of" and source in patterns and target in patterns:
            parent_of[source] = target
        elif kind == "uses" and target in patterns and source.startswith(PROCEDURE_SOURCES):
            text = strip_citations(rel.get("description", ""))
            if text:
                procedures.setdefault(target, []).append((rel.get("modified", ""), text))

    def examples(stix_id: str) -> tuple[str, ...]:
        # 最新的在前，截断到上限
        items = sorted(procedures.get(stix_id, []), key=lambda item: (item[0], item[1]), reverse=True)
        return tuple(text for _, text in items[:procedure_limit])

    def record(stix_id: str, subs: tuple[TtpRecord, ...] = ()) -> TtpRecord:
        obj = patterns[stix_id]
        tactics = sorted(
            {
                phase["phase_name"]
                for phase in obj.get("kill_chain_phases", []) or []
                if phase.get("kill_chain_name") == "mitre-attack"
            }
        )
        return TtpRecord(
            ttp_id=obj["_ttp_id"],
            name=obj.get("name", ""),
            tactics=tuple(tactics),
            description=strip_citations(obj.get("description", "")),
            sub_techniques=subs,
            procedure_examples=examples(stix_id),
            attck_version=version,
        )

    by_ttp = {obj["_ttp_id"]: stix_id for stix_id, obj in patterns.items()}
    children: dict[str, list[str]] = {}
    for stix_id, obj in patterns.items():
        ttp_id = obj["_ttp_id"]
        if "." not in ttp_id:
            continue
        parent = parent_of.get(stix_id) or by_ttp.get(parent_id(ttp_id))
        if parent is None:
            log.debug("子技术 %s 的父技术不存在或已废弃，跳过", ttp_id)
            continue
        children.setdefault(parent, []).append(stix_id)

    parents = []
    for stix_id, obj in patterns.items():
        if "." in obj["_ttp_id"]:
            continue
        subs = tuple(
            sorted((record(c) for c in children.get(stix_id, [])), key=lambda r: r.ttp_id)
        )
        parents.append(record(stix_id, subs))
    parents.sort(key=lambda r: r.ttp_id)
    if not parents:
        raise ValidationError("bundle 中没有任何有效技术")
    return TtpCatalog(records=tuple(parents), attck_version=version)


def load_attck_bundle(path: str | Path, procedure_limit: int = DEFAULT_PROCEDURE_LIMIT) -> TtpCatalog:
    path = Path(path)
    if not path.exists():
        raise NotFoundError("ATT&CK bundle", str(path))
    try:
        bundle = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as error:
        raise ExportParseError(f"bundle 解析失败: {error}") from error
    catalog = catalog_from_bundle(bundle, procedure_limit=procedure_limit)
    log.info("ATT&CK v%s: %d 个父技术", catalog.attck_version, catalog.technique_count)
    return catalog


# ---------------------------------------------------------------- 指南


class Classification(str, Enum):
    BEHAVIOR_FOCUSED = "behavior_focused"
    INTENT_CRITICAL = "intent_critical"


CLASSIFICATION_HINTS = {
    Classification.BEHAVIOR_FOCUSED: "the presence of the characteristic action is sufficient, regardless of intent",
    Classification.INTENT_CRITICAL: "similar low-level actions may be benign; evidence of adversarial purpose is required",
}


@dataclass(frozen=True)
class ReasoningGuideline:
    ttp_id: str
    classification: Classification
    required_components: tuple[str, ...]
    positive_indicators: tuple[str, ...]
    negative_indicators: tuple[str, ...]
    differentiation_criteria: tuple[str, ...]
    positive_examples: tuple[str, ...]
    negative_examples: tuple[str, ...]
    attck_version: str

    LIST_FIELDS = (
        "required_components",
        "positive_indicators",
        "negative_indicators",
        "differentiation_criteria",
        "positive_examples",
        "negative_examples",
    )

    def validate(self) -> "ReasoningGuideline":
        if not is_ttp_id(self.ttp_id):
            raise ValidationError(f"非法的技术 id: {self.ttp_id!r}")
        for name in self.LIST_FIELDS:
            values = getattr(self, name)
            if not values or not all(isinstance(v, str) and v.strip() for v in values):
                raise ValidationError(f"{self.ttp_id}: 字段 {name} 不能为空")
        for criterion in self.differentiation_criteria:
            if not TTP_ID_SEARCH_RE.search(criterion):
                raise ValidationError(f"{self.ttp_id}: 区分标准没有引用技术 id: {criterion!r}")
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        data["classification"] = self.classification.value
        for name in self.LIST_FIELDS:
            data[name] = list(data[name])
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ReasoningGuideline":
        expected = [f.name for f in fields(cls)]
        missing = [name for name in expected if name not in data]
        if missing:
            raise ValidationError(f"指南缺少字段: {missing}")
        for name in cls.LIST_FIELDS:
            if not isinstance(data[name], list):
                raise ValidationError(f"指南字段 {name} 必须是列表")
        try:
            classification = Classification(data["classification"])
        except ValueError as error:
            raise ValidationError(f"未知分类: {data['classification']!r}") from error
        guideline = cls(
            ttp_id=data["ttp_id"],
            classification=classification,
            attck_version=str(data["attck_version"]),
            **{name: tuple(data[name]) for name in cls.LIST_FIELDS},
        )
        return guideline.validate()


def render_checklist(guideline: ReasoningGuideline) -> str:
    """推理时注入提示词的检查清单"""
    lines = [f"Reasoning guideline for {guideline.ttp_id} ({guideline.classification.value}: "
             f"{CLASSIFICATION_HINTS[guideline.classification]})"]
    sections = (
        ("Required components (all must be satisfied)", guideline.required_components),
        ("Positive indicators", guideline.positive_indicators),
        ("Negative indicators (argue against this technique)", guideline.negative_indicators),
        ("Differentiation criteria", guideline.differentiation_criteria),
        ("Positive examples", guideline.positive_examples),
        ("Negative examples", guideline.negative_examples),
    )
    for title, items in sections:
        lines.append(f"{title}:")
        lines.extend(f"  [ ] {item}" for item in items)
    return "\n".join(lines)


def definition_text(record: TtpRecord) -> str:
    """第 1 步：知识库中的正式定义"""
    tactics = ", ".join(record.tactics) or "unspecified"
    return f"Technique {record.ttp_id}: {record.name}\nTactics: {tactics}\nDefinition:\n{record.description}"


def augmentation_text(record: TtpRecord) -> str:
    """第 2 步：子技术与程序示例"""
    lines = []
    if record.sub_techniques:
        lines.append("Sub-techniques:")
        lines.extend(f"- {sub.ttp_id} {sub.name}" for sub in record.sub_techniques)
    if record.procedure_examples:
        lines.append("Procedure examples:")
        lines.extend(f"- {text}" for text in record.procedure_examples)
    return "\n".join(lines) if lines else "No sub-techniques or procedure examples are recorded."


def _knowledge(record: TtpRecord) -> str:
    return f"{definition_text(record)}\n\n{augmentation_text(record)}"


CLASSIFY_PROMPT = """You are an ATT&CK analyst preparing attribution guidance for binary code analysis.

{knowledge}

Classify how this technique must be attributed:
- BEHAVIOR_FOCUSED: {behavior}.
- INTENT_CRITICAL: {intent}.

Answer with exactly one line: CLASSIFICATION: BEHAVIOR_FOCUSED or CLASSIFICATION: INTENT_CRITICAL"""

EXAMPLES_PROMPT = """You are an ATT&CK analyst preparing attribution guidance for binary code analysis.

{knowledge}

This technique is classified as {label}: {hint}.

Synthesize representative POSITIVE examples of code behavior that implements this technique
(across platforms, APIs and malware families), and complementary NEGATIVE examples that reflect
benign behavior or closely related techniques. Give at least two of each, one per line:
POSITIVE: <example>
NEGATIVE: <example>"""

CONSOLIDATE_PROMPT = """You are an ATT&CK analyst writing a concise reasoning guideline for {ttp_id}.

{knowledge}

Classification: {label} ({hint}).

Positive examples:
{positives}
Negative examples:
{negatives}

Consolidate everything into a checklist. Use one item per line with these labels:
REQUIRED: <required component>
POSITIVE_INDICATOR: <behavior indicating the technique>
NEGATIVE_INDICATOR: <behavior that argues against it>
DIFFERENTIATION: <criterion naming a confusable technique id, e.g. T1562>
Provide at least one line for each label."""

REFORMAT_HINT = "Your answer did not follow the required line format. Answer again using only the labeled lines."

_LABEL_PATTERNS = {
    Classification.BEHAVIOR_FOCUSED: re.compile(r"behaviou?r[\s_-]*focused", re.I),
    Classification.INTENT_CRITICAL: re.compile(r"intent[\s_-]*critical", re.I),
}


def parse_classification(text: str) -> Classification | None:
    found = [label for label, pattern in _LABEL_PATTERNS.items() if pattern.search(text or "")]
    return found[0] if len(found) == 1 else None


def _labeled(text: str, label: str) -> list[str]:
    pattern = re.compile(rf"^\s*(?:[-*]\s*)?{label}\s*:\s*(.+?)\s*$", re.M | re.I)
    return [m.group(1) for m in pattern.finditer(text or "")]


def _converse(gateway: Gateway, prompt: str, parse, retry_hint: str):
    """一次请求 + 一次格式重试；返回 parse 结果，失败抛 ResponseFormatError"""
    messages = [Message("user", prompt)]
    reply = gateway.chat(gateway.request(messages))
    result = parse(reply)
    if result is not None:
        return result
    messages += [Message("assistant", reply), Message("user", retry_hint)]
    reply = gateway.chat(gateway.request(messages))
    result = parse(reply)
    if result is None:
        raise ResponseFormatError(f"响应不符合协议: {reply[:200]!r}")
    return result


def classify_ttp(record: TtpRecord, gateway: Gateway) -> Classification:
    prompt = CLASSIFY_PROMPT.format(
        knowledge=_knowledge(record),
        behavior=CLASSIFICATION_HINTS[Classification.BEHAVIOR_FOCUSED],
        intent=CLASSIFICATION_HINTS[Classification.INTENT_CRITICAL],
    )
    return _converse(
        gateway,
        prompt,
        parse_classification,
        "Your answer was ambiguous. Reply with exactly one of the two labels: "
        "CLASSIFICATION: BEHAVIOR_FOCUSED or CLASSIFICATION: INTENT_CRITICAL",
    )


def _parse_examples(text: str) -> tuple[tuple[str, ...], tuple[str, ...]] | None:
    positives, negatives = _labeled(text, "POSITIVE"), _labeled(text, "NEGATIVE")
    if len(positives) < 2 or len(negatives) < 2:
        return None
    return tuple(positives), tuple(negatives)


def _parse_consolidation(text: str) -> dict[str, tuple[str, ...]] | None:
    parsed = {
        "required_components": tuple(_labeled(text, "REQUIRED")),
        "positive_indicators": tuple(_labeled(text, "POSITIVE_INDICATOR")),
        "negative_indicators": tuple(_labeled(text, "NEGATIVE_INDICATOR")),
        "differentiation_criteria": tuple(
            c for c in _labeled(text, "DIFFERENTIATION") if TTP_ID_SEARCH_RE.search(c)
        ),
    }
    return parsed if all(parsed.values()) else None


def synthesize_guideline(record: TtpRecord, gateway: Gateway) -> ReasoningGuideline:
    ttp_id = record.ttp_id
    knowledge = _knowledge(record)  # 第 1、2 步

    try:
        label = classify_ttp(record, gateway)
    except (GatewayError, ResponseFormatError) as error:
        raise GuidelineStepError(3, ttp_id, error) from error
    hint = CLASSIFICATION_HINTS[label]

    try:
        positives, negatives = _converse(
            gateway,
            EXAMPLES_PROMPT.format(knowledge=knowledge, label=label.name, hint=hint),
            _parse_examples,
            REFORMAT_HINT + " Give at least two POSITIVE and two NEGATIVE lines.",
        )
    except (GatewayError, ResponseFormatError) as error:
        raise GuidelineStepError(4, ttp_id, error) from error

    try:
        parts = _converse(
            gateway,
            CONSOLIDATE_PROMPT.format(
                ttp_id=ttp_id,
                knowledge=knowledge,
                label=label.name,
                hint=hint,
                positives="\n".join(f"- {p}" for p in positives),
                negatives="\n".join(f"- {n}" for n in negatives),
            ),
            _parse_consolidation,
            REFORMAT_HINT,
        )
        return ReasoningGuideline(
            ttp_id=ttp_id,
            classification=label,
            positive_examples=positives,
            negative_examples=negatives,
            attck_version=record.attck_version,
            **parts,
        ).validate()
    except (GatewayError, ResponseFormatError, ValidationError) as error:
        raise GuidelineStepError(5, ttp_id, error) from error


class GuidelineStore:
    """每个技术一个 <ttp_id>.guideline 文件（可人工编辑的 JSON）"""

    SUFFIX = ".guideline"

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def path_for(self, ttp_id: str) -> Path:
        return self.directory / f"{ttp_id}{self.SUFFIX}"

    def exists(self, ttp_id: str) -> bool:
        return self.path_for(ttp_id).exists()

    def ids(self) -> list[str]:
        if not self.directory.exists():
            return []
        return sorted(p.name[: -len(self.SUFFIX)] for p in self.directory.glob(f"*{self.SUFFIX}"))

    def save(self, guideline: ReasoningGuideline) -> Path:
        guideline.validate()
        with self._guard:
            lock = self._locks.setdefault(guideline.ttp_id, threading.Lock())
        with lock:
            return atomic_write_text(self.path_for(guideline.ttp_id), dump_json(guideline.to_dict()))

    def load(
        self,
        ttp_id: str,
        expected_version: str | None = None,
        allow_version_skew: bool = False,
    ) -> ReasoningGuideline:
        path = self.path_for(ttp_id)
        if not path.exists():
            raise NotFoundError("推理指南", ttp_id)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as error:
            raise ValidationError(f"{path.name} 不是合法 JSON: {error}") from error
        guideline = ReasoningGuideline.from_dict(data)
        if guideline.ttp_id != ttp_id:
            raise ValidationError(f"{path.name} 中的 ttp_id 为 {guideline.ttp_id}")
        if expected_version is not None and guideline.attck_version != expected_version:
            message = (
                f"{ttp_id} 的指南基于 ATT&CK v{guideline.attck_version}，当前目录为 v{expected_version}"
            )
            if not allow_version_skew:
                raise VersionSkewError(message + "；如确认可用请加 --allow-version-skew")
            log.warning("版本偏差: %s", message)
        return guideline

    def load_many(
        self,
        ttp_ids: Iterable[str],
        expected_version: str | None = None,
        allow_version_skew: bool = False,
    ) -> dict[str, ReasoningGuideline]:
        return {
            ttp_id: self.load(ttp_id, expected_version, allow_version_skew) for ttp_id in sorted(set(ttp_ids))
        }


@dataclass
class SynthesisReport:
    written: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)


def synthesize_catalog(
    catalog: TtpCatalog,
    gateway: Gateway,
    store: GuidelineStore,
    ttp_ids: Iterable[str] | None = None,
    force: bool = False,
    parallelism: int = 1,
    logger: ProgressCallback | None = None,
) -> SynthesisReport:
    """离线批量合成；不同技术互不依赖，可并发"""
    records = [catalog.get(t) for t in sorted(set(ttp_ids))] if ttp_ids else list(catalog)
    report = SynthesisReport()
    todo = []
    for record in records:
        if store.exists(record.ttp_id) and not force:
            report.skipped.append(record.ttp_id)
        else:
            todo.append(record)

    def work(record: TtpRecord) -> tuple[str, str | None]:
        try:
            store.save(synthesize_guideline(record, gateway))
        except GuidelineStepError as error:
            return record.ttp_id, str(error)
        log_message(f"已生成 {record.ttp_id} 的推理指南", logger)
        return record.ttp_id, None

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        for ttp_id, error in pool.map(work, todo):
            if error:
                report.failed[ttp_id] = error
            else:
                report.written.append(ttp_id)
    return report
