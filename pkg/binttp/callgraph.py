"""
调用图构建、强连通分量缩合与自底向上排序
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx

from .errors import NotFoundError
from .ingest import Binary

log = logging.getLogger(__name__)


@dataclass
class CallGraph:
    graph: nx.DiGraph
    names: dict[str, str] = field(default_factory=dict)
    addresses: dict[str, int] = field(default_factory=dict)
    name_index: dict[str, list[str]] = field(default_factory=dict)
    unresolved: int = 0

    @property
    def nodes(self) -> frozenset[str]:
        return frozenset(self.graph.nodes)

    @property
    def edges(self) -> frozenset[tuple[str, str]]:
        return frozenset(self.graph.edges)

    def resolve(self, name: str) -> list[str]:
        """名称 -> func_id 列表（按地址排序）"""
        return list(self.name_index.get(name, []))


@dataclass(frozen=True)
class SccOrder:
    """自底向上的组件序列：被调用者所在组件总在调用者之前"""

    components: tuple[frozenset[str], ...]
    cyclic: frozenset[str]
    depends_on: tuple[frozenset[int], ...] = ()

    def position(self, func_id: str) -> int:
        for index, component in enumerate(self.components):
            if func_id in component:
                return index
        raise NotFoundError("函数", func_id)

    def is_cyclic(self, index: int) -> bool:
        return bool(self.components[index] & self.cyclic)

    def levels(self) -> list[list[int]]:
        """按依赖深度分波次，同一波次的组件之间没有调用关系"""
        depth: list[int] = []
        for index in range(len(self.components)):
            deps = self.depends_on[index] if self.depends_on else frozenset()
            depth.append(1 + max((depth[d] for d in deps), default=-1))
        waves: dict[int, list[int]] = {}
        for index, level in enumerate(depth):
            waves.setdefault(level, []).append(index)
        return [waves[level] for level in sorted(waves)]


def build_call_graph(binary: Binary) -> CallGraph:
    graph = nx.DiGraph()
    names: dict[str, str] = {}
    addresses: dict[str, int] = {}
    name_index: dict[str, list[str]] = {}
    for func in sorted(binary.functions, key=lambda f: f.entry_address):
        graph.add_node(func.func_id)
        names[func.func_id] = func.display_name
        addresses[func.func_id] = func.entry_address
        for name in func.names:
            name_index.setdefault(name, []).append(func.func_id)

    unresolved = 0
    for func in binary.functions:
        for callee in sorted(func.callee_names):
            targets = name_index.get(callee)
            if not targets:
                unresolved += 1
                log.warning("%s 调用了无法解析的名称 %s", func.func_id, callee)
                continue
            graph.add_edge(func.func_id, targets[0])
    return CallGraph(graph=graph, names=names, addresses=addresses,
                     name_index=name_index, unresolved=unresolved)


def condense_and_order(graph: CallGraph) -> SccOrder:
    g = graph.graph
    if g.number_of_nodes() == 0:
        return SccOrder(components=(), cyclic=frozenset(), depends_on=())

    condensed = nx.condensation(g)
    members = {c: frozenset(condensed.nodes[c]["members"]) for c in condensed.nodes}

    def sort_key(c: int) -> tuple[int, str]:
        return min((graph.addresses.get(n, 0), n) for n in members[c])

    # 反向图的拓扑序 = 被调用者在前
    ordered = list(nx.lexicographical_topological_sort(condensed.reverse(copy=True), key=sort_key))
    position = {c: i for i, c in enumerate(ordered)}

    cyclic: set[str] = set()
    for c in ordered:
        group = members[c]
        if len(group) > 1:
            cyclic |= group
        else:
            (node,) = group
            if g.has_edge(node, node):
                cyclic.add(node)

    depends_on = tuple(
        frozenset(position[callee] for callee in condensed.successors(c)) for c in ordered
    )
    return SccOrder(
        components=tuple(members[c] for c in ordered),
        cyclic=frozenset(cyclic),
        depends_on=depends_on,
    )


def callers_of(graph: CallGraph, target: str) -> set[str]:
    if target not in graph.graph:
        raise NotFoundError("函数", target)
    return set(graph.graph.predecessors(target))


def callees_of(graph: CallGraph, target: str) -> set[str]:
    if target not in graph.graph:
        raise NotFoundError("函数", target)
    return set(graph.graph.successors(target))


def write_condensation_dot(order: SccOrder, graph: CallGraph, path: str | Path) -> Path:
    """缩合图调试输出（DOT 文本）"""
    lines = ["digraph Condensation {", "  rankdir=BT;"]
    for index, component in enumerate(order.components):
        label = "\\n".join(graph.names.get(n, n) for n in sorted(component, key=lambda n: graph.addresses.get(n, 0)))
        shape = "box" if order.is_cyclic(index) else "ellipse"
        lines.append(f'  c{index} [label="{label}", shape={shape}];')
    for index, deps in enumerate(order.depends_on):
        for dep in sorted(deps):
            lines.append(f"  c{index} -> c{dep};")
    lines.append("}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
