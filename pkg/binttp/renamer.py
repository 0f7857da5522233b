"""
自底向上的函数重命名与摘要

- 叶子函数只看自身代码
- 调用者在所有被调用者有摘要之后处理，只提供直接被调用者的摘要
- 环内函数第一遍：尚无临时结果的成员给占位摘要；全部成员有临时结果后再回访一次
"""

from __future__ import annotations

import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .callgraph import CallGraph, SccOrder, build_call_graph
from .errors import GatewayError, RenamePassError, ValidationError
from .fileutil import atomic_write_text, dump_json
from .gateway import Gateway, Message
from .ingest import Binary, FunctionRecord, is_valid_identifier, rename_tokens
from .logutil import ProgressCallback, log_message

log = logging.getLogger(__name__)

PLACEHOLDER = "summary pending for {name}"

RENAME_PROMPT = """Below is your code snippet.
{code}

Summaries of the direct callees:
{callees}

Question: You will be given the function body with callee names recovered and summaries of the direct callees. Please analyze the function and provide:
1. Function summary (1-3 sentences).
2. Recovered function name.

Answer with exactly two labeled lines:
SUMMARY: <function summary>
NAME: <recovered function name>"""

REFORMAT_PROMPT = "Reply again using exactly two labeled lines: SUMMARY: <summary> and NAME: <identifier>."

SUMMARY_RE = re.compile(r"^\s*(?:\d+\.\s*)?SUMMARY\s*:\s*(.+?)\s*$", re.M | re.I)
NAME_RE = re.compile(r"^\s*(?:\d+\.\s*)?NAME\s*:\s*(.+?)\s*$", re.M | re.I)


@dataclass(frozen=True)
class RenameResult:
    summary: str
    recovered_name: str

    def __post_init__(self) -> None:
        if not self.summary.strip():
            raise ValidationError("摘要不能为空")
        if not is_valid_identifier(self.recovered_name):
            raise ValidationError(f"非法的函数名: {self.recovered_name!r}")


def sanitize_identifier(name: str) -> str | None:
    """非标识符字符替换为下划线；数字开头补 fn_ 前缀"""
    cleaned = re.sub(r"[^A-Za-z0-9_]", "_", name.strip().strip("`'\""))
    if not cleaned or not cleaned.strip("_"):
        return None
    if cleaned[0].isdigit():
        cleaned = f"fn_{cleaned}"
    return cleaned


def fallback_name(func: FunctionRecord) -> str:
    return f"fn_{func.entry_address:x}"


def parse_rename_response(text: str) -> RenameResult | None:
    summary = SUMMARY_RE.search(text or "")
    name = NAME_RE.search(text or "")
    if not summary or not name:
        return None
    identifier = sanitize_identifier(name.group(1))
    if identifier is None or not summary.group(1).strip():
        return None
    return RenameResult(summary=summary.group(1).strip(), recovered_name=identifier)


def build_rename_prompt(code: str, callee_summaries: dict[str, str]) -> str:
    if callee_summaries:
        callees = "\n".join(f"- {name}: {text}" for name, text in sorted(callee_summaries.items()))
    else:
        callees = "(none)"
    return RENAME_PROMPT.format(code=code, callees=callees)


def rename_function(
    func: FunctionRecord,
    callee_summaries: dict[str, str],
    gateway: Gateway,
    callee_names: dict[str, str] | None = None,
) -> RenameResult:
    """callee_names: 原始名 -> 已恢复名，用于在函数体中替换调用点"""
    code = rename_tokens(func.decompiled_code, callee_names or {})
    messages = [Message("user", build_rename_prompt(code, callee_summaries))]
    try:
        reply = gateway.chat(gateway.request(messages))
        result = parse_rename_response(reply)
        if result is None:
            messages += [Message("assistant", reply), Message("user", REFORMAT_PROMPT)]
            reply = gateway.chat(gateway.request(messages))
            result = parse_rename_response(reply)
    except GatewayError as error:
        raise RenamePassError(func.func_id, error) from error
    if result is None:
        log.warning("%s 的响应无法解析，使用回退名称 %s", func.func_id, fallback_name(func))
        result = RenameResult(summary=reply.strip() or "(empty response)", recovered_name=fallback_name(func))
    return result


@dataclass
class RenamePassState:
    """func_id -> (结果, 所在遍次)；占位与回访队列只在环内使用"""

    completed: dict[str, RenameResult] = field(default_factory=dict)
    passes: dict[str, int] = field(default_factory=dict)
    placeholders: set[str] = field(default_factory=set)
    revisit_queue: list[str] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, func_id: str, result: RenameResult, pass_no: int) -> None:
        with self._lock:
            self.completed[func_id] = result
            self.passes[func_id] = pass_no
            self.placeholders.discard(func_id)
            if pass_no == 2 and func_id in self.revisit_queue:
                self.revisit_queue.remove(func_id)

    def is_final(self, func_id: str, cyclic: bool) -> bool:
        return self.passes.get(func_id, 0) >= (2 if cyclic else 1)

    def to_dict(self) -> dict:
        with self._lock:
            return {
                func_id: {
                    "summary": result.summary,
                    "recovered_name": result.recovered_name,
                    "pass": self.passes[func_id],
                }
                for func_id, result in sorted(self.completed.items())
            }

    def save(self, path: str | Path) -> Path:
        return atomic_write_text(path, dump_json(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "RenamePassState":
        state = cls()
        path = Path(path)
        if not path.exists():
            return state
        for func_id, entry in json.loads(path.read_text(encoding="utf-8")).items():
            state.completed[func_id] = RenameResult(entry["summary"], entry["recovered_name"])
            state.passes[func_id] = int(entry.get("pass", 1))
        return state


def _external_summary(func: FunctionRecord) -> str:
    return func.summary or f"external library routine {func.raw_name}"


class _RenamePass:
    def __init__(
        self,
        binary: Binary,
        order: SccOrder,
        graph: CallGraph,
        gateway: Gateway,
        state: RenamePassState,
        checkpoint: Path | None,
        logger: ProgressCallback | None,
    ) -> None:
        self.binary = binary
        self.order = order
        self.graph = graph
        self.gateway = gateway
        self.state = state
        self.checkpoint = checkpoint
        self.logger = logger
        self.funcs = {f.func_id: f for f in binary.functions}
        self._save_lock = threading.Lock()

    def _context(self, func: FunctionRecord, pending: set[str]) -> tuple[dict[str, str], dict[str, str]]:
        """直接被调用者的摘要与已恢复名；pending 中的成员给占位摘要"""
        summaries: dict[str, str] = {}
        names: dict[str, str] = {}
        for callee_id in sorted(self.graph.graph.successors(func.func_id)):
            callee = self.funcs[callee_id]
            if callee.external:
                summaries[callee.display_name] = _external_summary(callee)
                continue
            result = None if callee_id in pending else self.state.completed.get(callee_id)
            if result is None:
                summaries[callee.raw_name] = PLACEHOLDER.format(name=callee.raw_name)
            else:
                summaries[result.recovered_name] = result.summary
                names[callee.raw_name] = result.recovered_name
        return summaries, names

    def _rename(self, func: FunctionRecord, pending: set[str], pass_no: int) -> None:
        summaries, names = self._context(func, pending)
        result = rename_function(func, summaries, self.gateway, names)
        self.state.record(func.func_id, result, pass_no)
        log_message(f"[第{pass_no}遍] {func.raw_name} -> {result.recovered_name}", self.logger)

    def run_component(self, index: int) -> None:
        component = self.order.components[index]
        members = sorted(
            (self.funcs[m] for m in component if not self.funcs[m].external),
            key=lambda f: f.entry_address,
        )
        if not members:
            return
        cyclic = self.order.is_cyclic(index)
        try:
            if not cyclic:
                for func in members:
                    if not self.state.is_final(func.func_id, False):
                        self._rename(func, set(), 1)
                return
            ids = {f.func_id for f in members}
            first = [f for f in members if self.state.passes.get(f.func_id, 0) < 1]
            with self.state._lock:
                self.state.placeholders |= {f.func_id for f in first}
                for f in members:
                    if f.func_id not in self.state.revisit_queue and not self.state.is_final(f.func_id, True):
                        self.state.revisit_queue.append(f.func_id)
            # 第一遍：已有临时结果的成员给出名称与摘要，其余给占位摘要
            for func in first:
                self._rename(func, {m for m in ids if m not in self.state.completed}, 1)
            # 回访：此时所有成员都有临时结果
            for func in members:
                if not self.state.is_final(func.func_id, True):
                    self._rename(func, set(), 2)
        finally:
            self._save()

    def _save(self) -> None:
        if self.checkpoint is not None:
            with self._save_lock:
                self.state.save(self.checkpoint)


def rename_binary(
    binary: Binary,
    order: SccOrder,
    gateway: Gateway,
    state: RenamePassState | None = None,
    checkpoint: str | Path | None = None,
    parallelism: int = 1,
    logger: ProgressCallback | None = None,
) -> Binary:
    state = state if state is not None else RenamePassState()
    graph = build_call_graph(binary)
    runner = _RenamePass(binary, order, graph, gateway, state,
                         Path(checkpoint) if checkpoint else None, logger)

    for wave in order.levels():
        if parallelism > 1 and len(wave) > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                # list() 触发异常传播
                list(pool.map(runner.run_component, wave))
        else:
            for index in wave:
                runner.run_component(index)

    functions = []
    for func in binary.functions:
        result = state.completed.get(func.func_id)
        if func.external or result is None:
            functions.append(func)
        else:
            functions.append(replace(func, summary=result.summary, recovered_name=result.recovered_name))
    log_message(f"重命名完成: {len(state.completed)} 个函数", logger)
    return binary.replace_functions(functions)


def rewrite_identifiers(binary: Binary) -> Binary:
    """把代码中的原始名替换为恢复名；重名按地址顺序加 _2、_3 后缀"""
    missing = [f.func_id for f in binary.functions if not f.external and not f.recovered_name]
    if missing:
        raise ValidationError(f"以下函数还没有恢复名: {missing}")

    used = {f.raw_name for f in binary.functions if f.external}
    final: dict[str, str] = {}
    for func in sorted(binary.internal_functions(), key=lambda f: (f.entry_address, f.func_id)):
        base = func.recovered_name
        candidate, counter = base, 1
        while candidate in used:
            counter += 1
            candidate = f"{base}_{counter}"
        used.add(candidate)
        final[func.func_id] = candidate

    mapping = {}
    for func in binary.internal_functions():
        if func.raw_name != final[func.func_id]:
            mapping[func.raw_name] = final[func.func_id]

    functions = []
    for func in binary.functions:
        callees = frozenset(mapping.get(name, name) for name in func.callee_names)
        if func.external:
            functions.append(replace(func, callee_names=callees))
            continue
        functions.append(
            replace(
                func,
                decompiled_code=rename_tokens(func.decompiled_code, mapping),
                callee_names=callees,
                recovered_name=final[func.func_id],
            )
        )
    return binary.replace_functions(functions)
