"""
候选对分析代理

每个 (函数, TTP) 候选对开一段独立对话：
  1. 种子函数代码 + 摘要 + 推理指南检查清单
  2. 代理按需调用 retrieve_function / retrieve_caller 获取上下文（受预算限制）
  3. 给出 VERDICT: PRESENT|ABSENT 与 EVIDENCE
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

from .attck_kb import ReasoningGuideline, TtpCatalog, render_checklist
from .callgraph import CallGraph
from .errors import BinTtpError, NotFoundError, ValidationError
from .fileutil import atomic_write_text, dump_json
from .gateway import Gateway, Message
from .ingest import Binary, FunctionRecord
from .logutil import ProgressCallback, log_message
from .report import make_table, render_text
from .retrieval import CandidatePair, CandidateSet

log = logging.getLogger(__name__)

MALFORMED_EVIDENCE = "malformed response"

TOOL_FUNCTION = "retrieve_function"
TOOL_CALLER = "retrieve_caller"


@dataclass(frozen=True)
class AnalysisBudget:
    max_tool_calls: int = 8
    max_context_chars: int = 60000
    per_function_chars: int = 8000

    def __post_init__(self) -> None:
        if self.max_tool_calls < 0:
            raise ValidationError("max_tool_calls 不能为负数")
        if self.max_context_chars <= 0 or self.per_function_chars <= 0:
            raise ValidationError("上下文字符上限必须为正数")

    @property
    def turn_cap(self) -> int:
        return self.max_tool_calls + 2


@dataclass(frozen=True)
class AnalyzerSettings:
    max_tool_calls: int = 8
    max_context_chars: int = 60000
    per_function_chars: int = 8000
    no_explorer: bool = False
    no_guideline: bool = False

    def __post_init__(self) -> None:
        AnalysisBudget(self.max_tool_calls, self.max_context_chars, self.per_function_chars)

    @property
    def budget(self) -> AnalysisBudget:
        return AnalysisBudget(
            max_tool_calls=0 if self.no_explorer else self.max_tool_calls,
            max_context_chars=self.max_context_chars,
            per_function_chars=self.per_function_chars,
        )


@dataclass(frozen=True)
class ToolCall:
    tool: str
    argument: str
    outcome: str  # found / not_found / ambiguous / cached / context_limit


@dataclass
class ContextBundle:
    seed: str
    ttp_id: str
    retrieved: list[tuple[str, str]] = field(default_factory=list)
    tool_log: list[ToolCall] = field(default_factory=list)
    context_chars: int = 0
    turns: int = 0
    transcript: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ttp_id": self.ttp_id,
            "retrieved": [{"func_id": f, "role": r} for f, r in self.retrieved],
            "tool_log": [asdict(call) for call in self.tool_log],
            "context_chars": self.context_chars,
            "turns": self.turns,
            "transcript": self.transcript,
        }


@dataclass(frozen=True)
class Verdict:
    present: bool
    evidence: str
    ttp_id: str
    func_id: str
    flagged: bool = False

    def __post_init__(self) -> None:
        if self.present and not self.evidence.strip():
            raise ValidationError(f"{self.func_id}/{self.ttp_id}: PRESENT 结论必须给出证据")


# ---------------------------------------------------------------- 工具

ADDRESS_SUFFIX_RE = re.compile(r"^(?P<name>[A-Za-z_]\w*)(?:@(?P<addr>0x[0-9A-Fa-f]+))?$")


def _split_argument(argument: str) -> tuple[str, int | None]:
    match = ADDRESS_SUFFIX_RE.match(argument.strip().strip("`'\"()"))
    if not match:
        return argument.strip(), None
    address = match.group("addr")
    return match.group("name"), int(address, 16) if address else None


def _qualified(func: FunctionRecord) -> str:
    return f"{func.display_name}@0x{func.entry_address:x}"


def resolve_functions(binary: Binary, argument: str) -> list[FunctionRecord]:
    """支持 name@0xADDR 形式消歧"""
    name, address = _split_argument(argument)
    hits = binary.lookup(name)
    if address is not None:
        hits = [f for f in hits if f.entry_address == address]
    return hits


def _miss_message(tool: str, argument: str) -> str:
    return f"NOT FOUND ({tool}): no function named '{argument}' exists in this binary."


def _ambiguous_message(tool: str, argument: str, hits: list[FunctionRecord]) -> str:
    lines = [f"AMBIGUOUS ({tool}): '{argument}' matches {len(hits)} functions. Repeat the call with one of:"]
    lines.extend(f"- {_qualified(f)}" for f in hits)
    return "\n".join(lines)


def truncate_code(code: str, limit: int) -> str:
    """保留头部"""
    if len(code) <= limit:
        return code
    return f"{code[:limit]}\n/* ... {len(code) - limit} more characters truncated ... */"


def _function_body(func: FunctionRecord, limit: int) -> str:
    if func.external:
        return f"/* {func.display_name} is an external library routine; no code is available */"
    return truncate_code(func.decompiled_code, limit)


def tool_retrieve_function(binary: Binary, name: str, per_function_chars: int = 8000) -> str:
    hits = resolve_functions(binary, name)
    if not hits:
        return _miss_message(TOOL_FUNCTION, name)
    if len(hits) > 1:
        return _ambiguous_message(TOOL_FUNCTION, name, hits)
    func = hits[0]
    return f"FUNCTION {_qualified(func)}\n{_function_body(func, per_function_chars)}"


def tool_retrieve_caller(graph: CallGraph, name: str) -> list[str]:
    """按地址排序的调用者名称；未知名称抛 NotFoundError，由代理循环转成未命中消息"""
    target, address = _split_argument(name)
    ids = graph.resolve(target)
    if address is not None:
        ids = [i for i in ids if graph.addresses.get(i) == address]
    if not ids:
        raise NotFoundError("函数", name)
    callers: set[str] = set()
    for func_id in ids:
        callers |= set(graph.graph.predecessors(func_id))
    ordered = sorted(callers, key=lambda i: (graph.addresses.get(i, 0), i))
    return [graph.names.get(i, i) for i in ordered]


# ---------------------------------------------------------------- 提示词

SYSTEM_PROMPT = """You are a malware analyst deciding whether a function from a stripped, decompiled binary implements a specific MITRE ATT&CK technique.
You may request more context with exactly one tool call per reply, written on its own line:
TOOL: retrieve_function <name>   (returns the decompiled code of the named function)
TOOL: retrieve_caller <name>     (returns the names of functions that call the named function)
Use name@0xADDRESS when a name is ambiguous.
When the available context is sufficient, reply with exactly:
VERDICT: PRESENT or VERDICT: ABSENT
EVIDENCE: <the specific code behavior that supports your decision>"""

SEED_PROMPT = """Technique under analysis: {ttp}

Seed function {name}:
Summary: {summary}
```c
{code}
```
{guideline}
{tools}"""

TOOLS_OPEN = "You may make up to {n} tool calls before deciding. Fetch callers or callees only when the seed function alone does not settle the question."
TOOLS_CLOSED = "No tool calls are available for this analysis. Decide from the seed function alone."

FORCE_PROMPT = (
    "The context budget is exhausted and tools are now disabled. "
    "Decide with the information you already have and reply with the VERDICT and EVIDENCE lines."
)
REFORMAT_PROMPT = "Your reply did not follow the protocol. Reply with one TOOL line, or with the VERDICT and EVIDENCE lines."

TOOL_RE = re.compile(r"^\s*TOOL\s*:\s*(retrieve_function|retrieve_caller)\s*\(?\s*([^\s)]+)\s*\)?\s*$", re.M | re.I)
VERDICT_RE = re.compile(r"^\s*VERDICT\s*:\s*\**\s*(PRESENT|ABSENT)\b", re.M | re.I)
EVIDENCE_RE = re.compile(r"^\s*EVIDENCE\s*:\s*(.*)", re.M | re.I | re.S)


def parse_verdict(text: str) -> tuple[bool, str] | None:
    verdict = VERDICT_RE.search(text or "")
    if not verdict:
        return None
    present = verdict.group(1).upper() == "PRESENT"
    evidence_match = EVIDENCE_RE.search(text)
    evidence = evidence_match.group(1).strip() if evidence_match else ""
    if present and not evidence:
        return None
    return present, evidence or "no supporting behavior identified"


def parse_tool_request(text: str) -> tuple[str, str] | None:
    match = TOOL_RE.search(text or "")
    if not match:
        return None
    return match.group(1).lower(), match.group(2)


def build_seed_prompt(
    func: FunctionRecord,
    ttp_label: str,
    guideline: ReasoningGuideline | None,
    budget: AnalysisBudget,
) -> str:
    return SEED_PROMPT.format(
        ttp=ttp_label,
        name=_qualified(func),
        summary=func.summary or "(no summary)",
        code=_function_body(func, budget.per_function_chars),
        guideline=f"\n{render_checklist(guideline)}\n" if guideline is not None else "",
        tools=TOOLS_OPEN.format(n=budget.max_tool_calls) if budget.max_tool_calls > 0 else TOOLS_CLOSED,
    )


# ---------------------------------------------------------------- 代理循环


class _Explorer:
    """单个候选对的对话状态；对话内部单线程"""

    def __init__(self, binary: Binary, graph: CallGraph, budget: AnalysisBudget, bundle: ContextBundle) -> None:
        self.binary = binary
        self.graph = graph
        self.budget = budget
        self.bundle = bundle
        self.seen_functions: set[str] = {bundle.seed}
        self.seen_callers: dict[str, str] = {}
        self.caller_ids: set[str] = set()
        self.tools_enabled = budget.max_tool_calls > 0

    def _log(self, tool: str, argument: str, outcome: str) -> None:
        self.bundle.tool_log.append(ToolCall(tool, argument, outcome))
        if len(self.bundle.tool_log) >= self.budget.max_tool_calls:
            self.tools_enabled = False

    def _fetch_function(self, argument: str) -> tuple[str, str]:
        hits = resolve_functions(self.binary, argument)
        if len(hits) == 1 and hits[0].func_id in self.seen_functions:
            return "cached", f"ALREADY PROVIDED: {_qualified(hits[0])} is already in this conversation."
        text = tool_retrieve_function(self.binary, argument, self.budget.per_function_chars)
        if not hits:
            return "not_found", text
        if len(hits) > 1:
            return "ambiguous", text
        func = hits[0]
        self.seen_functions.add(func.func_id)
        role = "caller" if func.func_id in self.caller_ids else "callee"
        self.bundle.retrieved.append((func.func_id, role))
        return "found", text

    def _fetch_callers(self, argument: str) -> tuple[str, str]:
        if argument in self.seen_callers:
            return "cached", f"ALREADY PROVIDED: {self.seen_callers[argument]}"
        hits = resolve_functions(self.binary, argument)
        if not hits:
            return "not_found", _miss_message(TOOL_CALLER, argument)
        if len(hits) > 1 and "@" not in argument:
            return "ambiguous", _ambiguous_message(TOOL_CALLER, argument, hits)
        names = tool_retrieve_caller(self.graph, argument)
        for func_id in self.graph.graph.predecessors(hits[0].func_id):
            self.caller_ids.add(func_id)
        if names:
            text = f"CALLERS of {argument}: " + ", ".join(names)
        else:
            text = f"CALLERS of {argument}: (none, it is not called from inside this binary)"
        self.seen_callers[argument] = text
        return "found", text

    def run_tool(self, tool: str, argument: str) -> str:
        if tool == TOOL_FUNCTION:
            outcome, text = self._fetch_function(argument)
        else:
            outcome, text = self._fetch_callers(argument)
        if self.bundle.context_chars + len(text) > self.budget.max_context_chars:
            if outcome == "found" and tool == TOOL_FUNCTION:
                self.bundle.retrieved.pop()
            self._log(tool, argument, "context_limit")
            self.tools_enabled = False
            return ""
        self.bundle.context_chars += len(text)
        self._log(tool, argument, outcome)
        return text


def explore_and_decide(
    pair: CandidatePair,
    binary: Binary,
    graph: CallGraph,
    guideline: ReasoningGuideline | None,
    gateway: Gateway,
    budget: AnalysisBudget,
    catalog: TtpCatalog | None = None,
) -> tuple[Verdict, ContextBundle]:
    """guideline 为 None 即不带指南的消融模式；网关错误向上抛出"""
    if guideline is not None and guideline.ttp_id != pair.ttp_id:
        raise ValidationError(f"指南 {guideline.ttp_id} 与候选对 {pair.ttp_id} 不一致")
    seed = binary.by_id(pair.func_id)
    ttp_label = pair.ttp_id
    if catalog is not None and pair.ttp_id in catalog:
        ttp_label = f"{pair.ttp_id} {catalog.get(pair.ttp_id).name}"

    seed_text = build_seed_prompt(seed, ttp_label, guideline, budget)
    bundle = ContextBundle(seed=seed.func_id, ttp_id=pair.ttp_id, context_chars=len(seed_text))
    explorer = _Explorer(binary, graph, budget, bundle)
    messages = [Message("user", seed_text)]
    retried = False
    outcome: tuple[bool, str] | None = None

    while bundle.turns < budget.turn_cap:
        reply = gateway.chat(gateway.request(messages, system=SYSTEM_PROMPT))
        bundle.turns += 1
        messages.append(Message("assistant", reply))

        outcome = parse_verdict(reply)
        if outcome is not None:
            break
        tool = parse_tool_request(reply)
        if tool is not None and explorer.tools_enabled:
            result = explorer.run_tool(*tool)
            if not explorer.tools_enabled:
                # 预算用尽：下一轮为强制决策
                result = f"{result}\n\n{FORCE_PROMPT}" if result else FORCE_PROMPT
            messages.append(Message("user", result))
            continue
        if retried:
            break
        retried = True
        messages.append(Message("user", FORCE_PROMPT if tool is not None else REFORMAT_PROMPT))

    flagged = outcome is None
    if flagged:
        log.warning("%s/%s: 模型未给出合法结论，按 ABSENT 处理", pair.func_id, pair.ttp_id)
        outcome = (False, MALFORMED_EVIDENCE)
    bundle.transcript = [{"role": "system", "content": SYSTEM_PROMPT}] + [m.to_dict() for m in messages]
    verdict = Verdict(present=outcome[0], evidence=outcome[1], ttp_id=pair.ttp_id, func_id=pair.func_id,
                      flagged=flagged)
    return verdict, bundle


# ---------------------------------------------------------------- 批量分析


@dataclass
class PairAnalysis:
    func_id: str
    ttp_id: str
    verdict: Verdict | None = None
    bundle: ContextBundle | None = None
    error: str | None = None

    @property
    def key(self) -> tuple[str, str]:
        return self.ttp_id, self.func_id


@dataclass
class AnalysisReport:
    binary_id: str
    settings: AnalyzerSettings
    attck_version: str = "unknown"
    pairs: list[PairAnalysis] = field(default_factory=list)
    names: dict[str, str] = field(default_factory=dict)
    ttp_names: dict[str, str] = field(default_factory=dict)

    def predicted(self) -> dict[str, list[PairAnalysis]]:
        """二进制级 TTP 集合：至少一个函数判定 PRESENT"""
        found: dict[str, list[PairAnalysis]] = {}
        for item in self.pairs:
            if item.verdict is not None and item.verdict.present:
                found.setdefault(item.ttp_id, []).append(item)
        return {ttp_id: found[ttp_id] for ttp_id in sorted(found)}

    @property
    def predicted_ttps(self) -> list[str]:
        return list(self.predicted())

    @property
    def errors(self) -> list[PairAnalysis]:
        return [item for item in self.pairs if item.error is not None]

    def to_dict(self) -> dict:
        return {
            "binary_id": self.binary_id,
            "attck_version": self.attck_version,
            "ablation": {"no_explorer": self.settings.no_explorer, "no_guideline": self.settings.no_guideline},
            "predicted_ttps": [
                {
                    "ttp_id": ttp_id,
                    "name": self.ttp_names.get(ttp_id, ""),
                    "functions": [
                        {
                            "func_id": item.func_id,
                            "name": self.names.get(item.func_id, item.func_id),
                            "evidence": item.verdict.evidence,
                        }
                        for item in items
                    ],
                }
                for ttp_id, items in self.predicted().items()
            ],
            "pairs": [
                {
                    "func_id": item.func_id,
                    "ttp_id": item.ttp_id,
                    "present": None if item.verdict is None else item.verdict.present,
                    "evidence": None if item.verdict is None else item.verdict.evidence,
                    "flagged": False if item.verdict is None else item.verdict.flagged,
                    "tool_calls": 0 if item.bundle is None else len(item.bundle.tool_log),
                    "error": item.error,
                }
                for item in self.pairs
            ],
        }

    def render(self) -> str:
        summary = make_table(
            f"{self.binary_id} 预测的 ATT&CK 技术",
            ["技术", "名称", "函数", "证据"],
            (
                (ttp_id, self.ttp_names.get(ttp_id, ""), self.names.get(item.func_id, item.func_id),
                 item.verdict.evidence)
                for ttp_id, items in self.predicted().items()
                for item in items
            ),
        )
        pairs = make_table(
            "候选对判定",
            ["技术", "函数", "结论", "工具调用", "备注"],
            (
                (
                    item.ttp_id,
                    self.names.get(item.func_id, item.func_id),
                    "ERROR" if item.verdict is None else ("PRESENT" if item.verdict.present else "ABSENT"),
                    0 if item.bundle is None else len(item.bundle.tool_log),
                    item.error or ("flagged" if item.verdict and item.verdict.flagged else ""),
                )
                for item in self.pairs
            ),
        )
        return render_text(summary, pairs)


def transcript_path(run_dir: str | Path, ttp_id: str, func_id: str) -> Path:
    safe = re.sub(r"[^\w.-]", "_", func_id)
    return Path(run_dir) / "transcripts" / f"{ttp_id}__{safe}.json"


def analyze_binary(
    candidates: CandidateSet,
    binary: Binary,
    graph: CallGraph,
    guidelines: Mapping[str, ReasoningGuideline],
    gateway: Gateway,
    settings: AnalyzerSettings | None = None,
    catalog: TtpCatalog | None = None,
    parallelism: int = 1,
    run_dir: str | Path | None = None,
    logger: ProgressCallback | None = None,
) -> AnalysisReport:
    """重复的候选对只分析一次；缺少指南或网关失败只影响该候选对"""
    settings = settings or AnalyzerSettings()
    budget = settings.budget
    unique = sorted({(p.ttp_id, p.func_id): p for p in candidates.pairs}.items())
    pairs = [pair for _, pair in unique]

    def work(pair: CandidatePair) -> PairAnalysis:
        item = PairAnalysis(func_id=pair.func_id, ttp_id=pair.ttp_id)
        guideline = None
        if not settings.no_guideline:
            guideline = guidelines.get(pair.ttp_id)
            if guideline is None:
                item.error = f"缺少 {pair.ttp_id} 的推理指南"
                log.error("%s/%s: %s", pair.func_id, pair.ttp_id, item.error)
                return item
        try:
            item.verdict, item.bundle = explore_and_decide(pair, binary, graph, guideline, gateway, budget, catalog)
        except BinTtpError as error:
            item.error = str(error)
            log.error("%s/%s 分析失败: %s", pair.func_id, pair.ttp_id, error)
            return item
        if run_dir is not None:
            atomic_write_text(
                transcript_path(run_dir, pair.ttp_id, pair.func_id),
                dump_json({**item.bundle.to_dict(), "verdict": asdict(item.verdict)}),
            )
        label = "PRESENT" if item.verdict.present else "ABSENT"
        log_message(f"{pair.ttp_id} @ {pair.func_id}: {label}", logger)
        return item

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        results = list(pool.map(work, pairs))

    report = AnalysisReport(
        binary_id=binary.binary_id,
        settings=settings,
        attck_version=catalog.attck_version if catalog is not None else "unknown",
        pairs=results,
        names={f.func_id: f.display_name for f in binary.functions},
        ttp_names={r.ttp_id: r.name for r in catalog} if catalog is not None else {},
    )
    return report


def write_report(report: AnalysisReport, run_dir: str | Path) -> tuple[Path, Path]:
    run_dir = Path(run_dir)
    json_path = atomic_write_text(run_dir / "report.json", dump_json(report.to_dict()))
    text_path = atomic_write_text(run_dir / "report.txt", report.render())
    return json_path, text_path
