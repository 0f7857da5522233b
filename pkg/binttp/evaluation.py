"""
评估：函数级逐 TTP 精确率/召回率/F1 与宏平均，二进制级报告覆盖率与精确率
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .attck_kb import is_ttp_id
from .errors import ValidationError
from .fileutil import atomic_write_text, dump_json
from .report import make_table, render_text

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FunctionLabel:
    func_id: str
    ttp_ids: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        bad = sorted(t for t in self.ttp_ids if not is_ttp_id(t))
        if bad:
            raise ValidationError(f"{self.func_id}: 非法的技术 id {bad}")


def load_annotations(path: str | Path) -> list[FunctionLabel]:
    """{"labels": [{"function": <id>, "ttps": [...]}]}"""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as error:
        raise ValidationError(f"标注文件不是合法 JSON: {error}") from error
    if not isinstance(data, dict) or not isinstance(data.get("labels"), list):
        raise ValidationError("标注文件缺少 labels 列表")
    labels: dict[str, FunctionLabel] = {}
    for index, entry in enumerate(data["labels"]):
        if not isinstance(entry, dict) or not isinstance(entry.get("function"), str):
            raise ValidationError(f"labels[{index}] 缺少 function 字段")
        ttps = entry.get("ttps", [])
        if not isinstance(ttps, list):
            raise ValidationError(f"labels[{index}].ttps 必须是列表")
        if entry["function"] in labels:
            raise ValidationError(f"函数 {entry['function']} 被重复标注")
        labels[entry["function"]] = FunctionLabel(entry["function"], frozenset(ttps))
    return list(labels.values())


@dataclass(frozen=True)
class Instance:
    func_id: str
    ttp_id: str
    truth: bool

    @property
    def key(self) -> tuple[str, str]:
        return self.func_id, self.ttp_id


def build_instances(
    functions: Sequence[str],
    ttps: Sequence[str],
    labels: Iterable[FunctionLabel],
) -> list[Instance]:
    """函数 x TTP 全组合；未标注的函数全部为负例"""
    known = set(functions)
    label_map: dict[str, frozenset[str]] = {}
    for label in labels:
        if label.func_id not in known:
            raise ValidationError(f"标注引用了未知函数 {label.func_id}")
        label_map[label.func_id] = label.ttp_ids
    return [
        Instance(func_id, ttp_id, ttp_id in label_map.get(func_id, frozenset()))
        for func_id in functions
        for ttp_id in ttps
    ]


# ---------------------------------------------------------------- 函数级


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    def f1(self) -> float:
        return f1_score(self.precision(), self.recall())


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


@dataclass(frozen=True)
class MetricRow:
    """百分比，保留两位小数"""

    label: str
    precision: float
    recall: float
    f1: float


def _row(label: str, precision: float, recall: float, f1: float) -> MetricRow:
    return MetricRow(label, round(precision, 2), round(recall, 2), round(f1, 2))


def macro_average(rows: Iterable[MetricRow | Sequence[float]], label: str = "Average") -> MetricRow:
    """不加权平均；也接受现成的逐 TTP 百分比 (P, R, F1)"""
    values = [(r.precision, r.recall, r.f1) if isinstance(r, MetricRow) else tuple(r) for r in rows]
    if not values:
        raise ValidationError("没有可平均的行")
    count = len(values)
    return _row(
        label,
        sum(v[0] for v in values) / count,
        sum(v[1] for v in values) / count,
        sum(v[2] for v in values) / count,
    )


@dataclass
class MetricsReport:
    rows: list[MetricRow] = field(default_factory=list)
    counts: dict[str, ConfusionCounts] = field(default_factory=dict)

    @property
    def average(self) -> MetricRow | None:
        return macro_average(self.rows) if self.rows else None

    def to_dict(self) -> dict:
        average = self.average
        return {
            "per_ttp": [asdict(r) for r in self.rows],
            "average": asdict(average) if average else None,
            "counts": {ttp_id: asdict(c) for ttp_id, c in sorted(self.counts.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(
            rows=[MetricRow(**r) for r in data.get("per_ttp", [])],
            counts={ttp_id: ConfusionCounts(**c) for ttp_id, c in data.get("counts", {}).items()},
        )


def compute_metrics(predictions: Iterable[tuple[str, str]], instances: Sequence[Instance]) -> MetricsReport:
    """predictions: 判定为正的 (func_id, ttp_id) 集合"""
    positive = set(predictions)
    keys = {inst.key for inst in instances}
    unknown = positive - keys
    if unknown:
        raise ValidationError(f"预测中包含不在实例集中的对: {sorted(unknown)[:5]}")

    counts: dict[str, ConfusionCounts] = {}
    for inst in instances:
        c = counts.setdefault(inst.ttp_id, ConfusionCounts())
        predicted = inst.key in positive
        if predicted and inst.truth:
            c.tp += 1
        elif predicted:
            c.fp += 1
        elif inst.truth:
            c.fn += 1
        else:
            c.tn += 1

    rows = [
        _row(ttp_id, 100 * c.precision(), 100 * c.recall(), 100 * c.f1())
        for ttp_id, c in sorted(counts.items())
    ]
    return MetricsReport(rows=rows, counts=counts)


# ---------------------------------------------------------------- 二进制级


@dataclass(frozen=True)
class BinaryEvalResult:
    reported: frozenset[str]
    predicted: frozenset[str]
    validated_true: frozenset[str]

    def __post_init__(self) -> None:
        extra = self.validated_true - self.predicted
        if extra:
            raise ValidationError(f"validated_true 必须是 predicted 的子集: {sorted(extra)}")

    @classmethod
    def create(cls, reported: Iterable[str], predicted: Iterable[str], validated: Iterable[str]) -> "BinaryEvalResult":
        """validated 中不在 predicted 里的条目被忽略"""
        predicted = frozenset(predicted)
        return cls(frozenset(reported), predicted, frozenset(validated) & predicted)


@dataclass
class BinaryMetrics:
    """比例为 0-1 小数；无定义时为 None 并附说明"""

    coverage: float | None
    precision: float | None
    discovered: int
    discovered_true: int
    covered: int = 0
    reported: int = 0
    predicted: int = 0
    validated: int = 0
    notes: list[str] = field(default_factory=list)


def _metrics(covered: int, reported: int, validated: int, predicted: int,
             discovered: int, discovered_true: int) -> BinaryMetrics:
    notes = []
    coverage = covered / reported if reported else None
    if coverage is None:
        notes.append("reported 为空，覆盖率无定义")
    precision = validated / predicted if predicted else None
    if precision is None:
        notes.append("predicted 为空，精确率无定义")
    return BinaryMetrics(
        coverage=coverage,
        precision=precision,
        discovered=discovered,
        discovered_true=discovered_true,
        covered=covered,
        reported=reported,
        predicted=predicted,
        validated=validated,
        notes=notes,
    )


def binary_eval(result: BinaryEvalResult) -> BinaryMetrics:
    return _metrics(
        covered=len(result.reported & result.predicted),
        reported=len(result.reported),
        validated=len(result.validated_true),
        predicted=len(result.predicted),
        discovered=len(result.predicted - result.reported),
        discovered_true=len(result.validated_true - result.reported),
    )


def aggregate_binary_results(results: Iterable[BinaryMetrics]) -> BinaryMetrics:
    """Overall 行：各样本计数求和后再求比例"""
    items = list(results)
    return _metrics(
        covered=sum(m.covered for m in items),
        reported=sum(m.reported for m in items),
        validated=sum(m.validated for m in items),
        predicted=sum(m.predicted for m in items),
        discovered=sum(m.discovered for m in items),
        discovered_true=sum(m.discovered_true for m in items),
    )


def load_binary_truth(path: str | Path) -> tuple[frozenset[str], frozenset[str]]:
    """{"reported": [...], "validated": [...]}"""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: 必须是 JSON 对象")
    values = []
    for key in ("reported", "validated"):
        items = data.get(key, [])
        if not isinstance(items, list) or not all(isinstance(t, str) and is_ttp_id(t) for t in items):
            raise ValidationError(f"{path}: {key} 必须是技术 id 列表")
        values.append(frozenset(items))
    return values[0], values[1]


# ---------------------------------------------------------------- 报告


@dataclass
class EvalReport:
    functions: MetricsReport | None = None
    binaries: dict[str, BinaryMetrics] = field(default_factory=dict)

    @property
    def overall(self) -> BinaryMetrics | None:
        return aggregate_binary_results(self.binaries.values()) if self.binaries else None

    def to_dict(self) -> dict:
        overall = self.overall
        return {
            "functions": self.functions.to_dict() if self.functions is not None else None,
            "binaries": {name: asdict(m) for name, m in sorted(self.binaries.items())},
            "overall": asdict(overall) if overall else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        functions = data.get("functions")
        return cls(
            functions=MetricsReport.from_dict(functions) if functions is not None else None,
            binaries={name: BinaryMetrics(**m) for name, m in data.get("binaries", {}).items()},
        )


def _pct(value: float | None) -> str:
    return "-" if value is None else f"{100 * value:.1f}"


def render_eval_report(report: EvalReport) -> str:
    blocks = []
    if report.functions is not None:
        rows = [(r.label, f"{r.precision:.2f}", f"{r.recall:.2f}", f"{r.f1:.2f}") for r in report.functions.rows]
        average = report.functions.average
        if average is not None:
            rows.append((average.label, f"{average.precision:.2f}", f"{average.recall:.2f}", f"{average.f1:.2f}"))
        blocks.append(make_table("函数级 TTP 识别", ["TTP", "Precision %", "Recall %", "F1 %"], rows))
    if report.binaries:
        entries = sorted(report.binaries.items())
        entries.append(("Overall", report.overall))
        blocks.append(
            make_table(
                "二进制级 TTP 识别",
                ["样本", "#Reported", "#Covered", "Coverage %", "#Discovered", "#Discovered true", "Precision %"],
                (
                    (name, m.reported, m.covered, _pct(m.coverage), m.discovered, m.discovered_true,
                     _pct(m.precision))
                    for name, m in entries
                ),
            )
        )
    if not blocks:
        blocks.append(make_table("函数级 TTP 识别", ["TTP", "Precision %", "Recall %", "F1 %"], []))
    return render_text(*blocks)


def emit_eval_report(report: EvalReport, out_path: str | Path) -> str:
    """out_path 写 JSON，同名 .txt 写表格；返回表格文本"""
    out_path = Path(out_path)
    text = render_eval_report(report)
    atomic_write_text(out_path, dump_json(report.to_dict()))
    atomic_write_text(out_path.with_suffix(".txt"), text)
    return text


def load_eval_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def predictions_from_report(report: Mapping) -> set[tuple[str, str]]:
    """分析报告中判定为 PRESENT 的 (func_id, ttp_id)"""
    return {(p["func_id"], p["ttp_id"]) for p in report.get("pairs", []) if p.get("present")}


def predicted_ttps_from_report(report: Mapping) -> frozenset[str]:
    return frozenset(entry["ttp_id"] for entry in report.get("predicted_ttps", []))


def load_analysis_report(path: str | Path) -> dict:
    """读取 analyze 输出的 report.json，只校验评估用到的字段"""
    try:
        report = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as error:
        raise ValidationError(f"分析报告不是合法 JSON: {path}: {error}") from error
    if not isinstance(report, dict):
        raise ValidationError(f"分析报告顶层必须是对象: {path}")
    for key, fields_needed in (("pairs", ("func_id", "ttp_id")), ("predicted_ttps", ("ttp_id",))):
        entries = report.get(key, [])
        if not isinstance(entries, list):
            raise ValidationError(f"分析报告 {path} 的 {key} 必须是列表")
        for index, entry in enumerate(entries):
            if not isinstance(entry, dict) or not all(isinstance(entry.get(name), str) for name in fields_needed):
                raise ValidationError(f"分析报告 {path} 的 {key}[{index}] 缺少 {'/'.join(fields_needed)}")
    return report
