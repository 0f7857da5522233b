"""
反编译导出文件的读取、写出、调用关系提取与去重

导出格式（UTF-8 JSON）:
    {"binary_id": str, "platform": str,
     "functions": [{"id", "address", "name", "code", "callees"?, "external"?,
                    "summary"?, "recovered_name"?}]}
"""

from __future__ import annotations

import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable

from .errors import ExportParseError, NotFoundError, ValidationError
from .fileutil import atomic_write_text, dump_json

log = logging.getLogger(__name__)

IDENTIFIER_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
# 调用位置：标识符紧跟 "("，且前面不是标识符字符
CALL_SITE_RE = re.compile(r"(?<![A-Za-z0-9_])([A-Za-z_][A-Za-z0-9_]*)\(")
TOKEN_RE = re.compile(r"(?<![A-Za-z0-9_])[A-Za-z_][A-Za-z0-9_]*")
# 反编译器输出开头的函数原型，其中的函数名不是调用
PROTOTYPE_RE = re.compile(r"^\s*[^{};]*?[A-Za-z_][A-Za-z0-9_]*\s*\([^{};]*\)\s*(?=\{)")
# 以这些关键字开头的 "xxx (...) {" 是语句，不是原型
STATEMENT_KEYWORDS = frozenset({"if", "while", "for", "switch", "return", "do", "else", "case"})


class Platform(str, Enum):
    LINUX = "linux"
    WINDOWS = "windows"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, value: str) -> "Platform":
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            return cls.UNKNOWN


def is_valid_identifier(name: str | None) -> bool:
    return bool(name) and IDENTIFIER_RE.match(name) is not None


@dataclass(frozen=True)
class FunctionRecord:
    func_id: str
    entry_address: int
    raw_name: str
    decompiled_code: str
    callee_names: frozenset[str] = frozenset()
    summary: str | None = None
    recovered_name: str | None = None
    external: bool = False

    def __post_init__(self) -> None:
        if self.recovered_name is not None and not is_valid_identifier(self.recovered_name):
            raise ValidationError(f"函数 {self.func_id} 的恢复名不是合法标识符: {self.recovered_name!r}")

    @property
    def display_name(self) -> str:
        return self.recovered_name or self.raw_name

    @property
    def names(self) -> set[str]:
        return {self.raw_name, self.display_name}


@dataclass(frozen=True)
class Binary:
    binary_id: str
    platform: Platform
    functions: tuple[FunctionRecord, ...] = field(default_factory=tuple)

    @cached_property
    def _id_index(self) -> dict[str, FunctionRecord]:
        return {f.func_id: f for f in self.functions}

    @cached_property
    def _name_index(self) -> dict[str, list[FunctionRecord]]:
        index: dict[str, list[FunctionRecord]] = defaultdict(list)
        for func in sorted(self.functions, key=lambda f: f.entry_address):
            for name in func.names:
                index[name].append(func)
        return dict(index)

    def by_id(self, func_id: str) -> FunctionRecord:
        try:
            return self._id_index[func_id]
        except KeyError:
            raise NotFoundError("函数", func_id) from None

    def lookup(self, name: str) -> list[FunctionRecord]:
        """按恢复名或原始名查找，可能多个，按地址排序"""
        return list(self._name_index.get(name, ()))

    def all_names(self) -> set[str]:
        names: set[str] = set()
        for func in self.functions:
            names |= func.names
        return names

    def internal_functions(self) -> list[FunctionRecord]:
        return [f for f in self.functions if not f.external]

    def replace_functions(self, functions: Iterable[FunctionRecord]) -> "Binary":
        return replace(self, functions=tuple(functions))


def extract_callees(decompiled_code: str, known_names: set[str]) -> set[str]:
    """返回在代码中处于调用位置的已知名称（含自调用）"""
    if not known_names:
        raise ValidationError("known_names 不能为空")
    found = set(CALL_SITE_RE.findall(decompiled_code))
    return found & set(known_names)


def function_body(code: str) -> str:
    """去掉开头的函数原型，只留函数体"""
    match = PROTOTYPE_RE.match(code)
    if match is None:
        return code
    head = TOKEN_RE.findall(match.group(0))
    if not head or head[0] in STATEMENT_KEYWORDS:
        return code
    return code[match.end():]


def rename_tokens(code: str, mapping: dict[str, str]) -> str:
    """按标识符边界一次性替换，避免链式替换"""
    if not mapping:
        return code
    return TOKEN_RE.sub(lambda m: mapping.get(m.group(0), m.group(0)), code)


def _require(obj: dict, key: str, kind: type, index: int):
    if key not in obj:
        raise ExportParseError("缺少必填字段", index=index, field=key)
    value = obj[key]
    if kind is int and isinstance(value, bool):
        raise ExportParseError("类型错误，应为 int", index=index, field=key)
    if not isinstance(value, kind):
        raise ExportParseError(f"类型错误，应为 {kind.__name__}", index=index, field=key)
    return value


def binary_from_dict(document: dict) -> Binary:
    if not isinstance(document, dict):
        raise ExportParseError("顶层必须是 JSON 对象")
    for key in ("binary_id", "platform", "functions"):
        if key not in document:
            raise ExportParseError(f"缺少顶层字段 '{key}'")
    if not isinstance(document["functions"], list):
        raise ExportParseError("顶层字段 'functions' 必须是数组")
    if not document["functions"]:
        raise ValidationError("empty binary: 导出文件中没有任何函数")

    raw: list[dict] = []
    for index, entry in enumerate(document["functions"]):
        if not isinstance(entry, dict):
            raise ExportParseError("函数记录必须是对象", index=index)
        func_id = _require(entry, "id", str, index)
        address = _require(entry, "address", int, index)
        if address < 0:
            raise ExportParseError("地址不能为负", index=index, field="address")
        name = _require(entry, "name", str, index)
        code = _require(entry, "code", str, index)
        callees = entry.get("callees")
        if callees is not None and (
            not isinstance(callees, list) or not all(isinstance(c, str) for c in callees)
        ):
            raise ExportParseError("必须是字符串数组", index=index, field="callees")
        external = entry.get("external", False)
        if not isinstance(external, bool):
            raise ExportParseError("必须是布尔值", index=index, field="external")
        summary = entry.get("summary")
        recovered = entry.get("recovered_name")
        if summary is not None and not isinstance(summary, str):
            raise ExportParseError("必须是字符串", index=index, field="summary")
        if recovered is not None and not is_valid_identifier(recovered):
            raise ExportParseError("不是合法标识符", index=index, field="recovered_name")
        raw.append(
            dict(func_id=func_id, address=address, name=name, code=code, callees=callees,
                 external=external, summary=summary, recovered=recovered)
        )

    seen: set[str] = set()
    for entry in raw:
        if entry["func_id"] in seen:
            raise ValidationError(f"重复的函数 id: {entry['func_id']}")
        seen.add(entry["func_id"])

    known = {e["name"] for e in raw} | {e["recovered"] for e in raw if e["recovered"]}
    functions = []
    for index, entry in enumerate(raw):
        if entry["callees"] is None:
            callees = extract_callees(function_body(entry["code"]), known) if entry["code"] else set()
        else:
            unknown = set(entry["callees"]) - known
            if unknown:
                raise ValidationError(
                    f"记录 #{index} ({entry['func_id']}) 引用了不存在的函数: {sorted(unknown)}"
                )
            callees = set(entry["callees"])
        functions.append(
            FunctionRecord(
                func_id=entry["func_id"],
                entry_address=entry["address"],
                raw_name=entry["name"],
                decompiled_code=entry["code"],
                callee_names=frozenset(callees),
                summary=entry["summary"],
                recovered_name=entry["recovered"],
                external=entry["external"],
            )
        )
    return Binary(
        binary_id=str(document["binary_id"]),
        platform=Platform.parse(document["platform"]),
        functions=tuple(functions),
    )


def binary_to_dict(binary: Binary) -> dict:
    functions = []
    for func in binary.functions:
        entry = {
            "id": func.func_id,
            "address": func.entry_address,
            "name": func.raw_name,
            "code": func.decompiled_code,
            "callees": sorted(func.callee_names),
        }
        if func.external:
            entry["external"] = True
        if func.summary is not None:
            entry["summary"] = func.summary
        if func.recovered_name is not None:
            entry["recovered_name"] = func.recovered_name
        functions.append(entry)
    return {"binary_id": binary.binary_id, "platform": binary.platform.value, "functions": functions}


def load_binary_export(path: str | Path) -> Binary:
    path = Path(path)
    if not path.exists():
        raise NotFoundError("导出文件", str(path))
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as error:
        raise ExportParseError(f"JSON 解析失败: {error}") from error
    binary = binary_from_dict(document)
    log.info("已加载 %s: %d 个函数", binary.binary_id, len(binary.functions))
    return binary


def write_binary_export(binary: Binary, path: str | Path) -> Path:
    return atomic_write_text(path, dump_json(binary_to_dict(binary)))


def _dedup_once(functions: list[FunctionRecord]) -> tuple[list[FunctionRecord], bool]:
    groups: dict[str, list[FunctionRecord]] = defaultdict(list)
    for func in functions:
        if not func.external and func.decompiled_code:
            groups[func.decompiled_code].append(func)

    rewrite: dict[str, str] = {}
    removed: set[str] = set()
    for members in groups.values():
        if len(members) < 2:
            continue
        members.sort(key=lambda f: (f.entry_address, f.func_id))
        keep = members[0]
        for dup in members[1:]:
            removed.add(dup.func_id)
            for name in dup.names:
                rewrite[name] = keep.display_name
            log.debug("去重: %s 与 %s 代码相同，保留 0x%x", dup.func_id, keep.func_id, keep.entry_address)
    if not removed:
        return functions, False

    result = []
    for func in functions:
        if func.func_id in removed:
            continue
        if func.callee_names & rewrite.keys():
            callees = frozenset(rewrite.get(name, name) for name in func.callee_names)
            func = replace(
                func,
                decompiled_code=rename_tokens(func.decompiled_code, rewrite),
                callee_names=callees,
            )
        result.append(func)
    return result, True


def dedup_functions(binary: Binary) -> Binary:
    """相同代码只保留最低地址的函数，调用方引用改写到保留者，直到不动点"""
    functions = list(binary.functions)
    before = len(functions)
    changed = True
    while changed:
        functions, changed = _dedup_once(functions)
    if len(functions) != before:
        log.info("去重删除了 %d 个重复函数", before - len(functions))
        return binary.replace_functions(functions)
    return binary
