import networkx as nx
import numpy as np
import pytest

from binttp.callgraph import (
    CallGraph,
    build_call_graph,
    callees_of,
    callers_of,
    condense_and_order,
    write_condensation_dot,
)
from binttp.errors import NotFoundError
from binttp.ingest import load_binary_export


@pytest.fixture
def sample(fixtures_dir):
    return load_binary_export(fixtures_dir / "sample_export.json")


def test_sample_graph_edges(sample):
    graph = build_call_graph(sample)
    assert len(graph.nodes) == 12
    assert ("f_1100", "imp_kill") in graph.edges
    assert ("f_1800", "f_1700") in graph.edges
    assert ("f_1700", "f_1800") in graph.edges
    assert graph.unresolved == 0
    assert callers_of(graph, "f_1300") == {"f_1000", "f_1100"}
    assert callees_of(graph, "f_1000") == {"f_1100", "f_1200", "f_1300", "f_1500"}


def test_unknown_node(sample):
    graph = build_call_graph(sample)
    with pytest.raises(NotFoundError):
        callers_of(graph, "f_9999")


def test_sample_order_is_bottom_up(sample):
    graph = build_call_graph(sample)
    order = condense_and_order(graph)
    assert order.cyclic == {"f_1700", "f_1800"}
    assert frozenset({"f_1700", "f_1800"}) in order.components
    for caller, callee in graph.edges:
        if order.position(caller) != order.position(callee):
            assert order.position(callee) < order.position(caller)
    assert order.position("f_1000") == len(order.components) - 1


def test_self_recursive_function_is_cyclic(func, make_binary):
    binary = make_binary(
        [
            func("fact", 0x10, "int fact(int n)\n{\n  return n ? n * fact(n - 1) : 1;\n}"),
            func("main", 0x20, "int main(void)\n{\n  return fact(5);\n}"),
        ]
    )
    order = condense_and_order(build_call_graph(binary))
    assert order.cyclic == {"fact"}
    assert order.is_cyclic(order.position("fact"))
    assert not order.is_cyclic(order.position("main"))


def test_empty_graph():
    order = condense_and_order(CallGraph(graph=nx.DiGraph()))
    assert order.components == ()
    assert order.levels() == []


def test_order_is_deterministic(sample):
    first = condense_and_order(build_call_graph(sample))
    second = condense_and_order(build_call_graph(sample))
    assert first == second


def _random_binary(make_binary, func, rng, size):
    names = [f"sub_{i:x}" for i in range(size)]
    entries = []
    for i, name in enumerate(names):
        fanout = int(rng.integers(0, 4))
        callees = sorted({names[j] for j in rng.integers(0, size, fanout)})
        entries.append(func(f"f{i}", 0x1000 + 0x10 * i, "", name=name, callees=callees))
    return make_binary(entries)


def test_random_graphs_respect_callee_first_order(func, make_binary):
    rng = np.random.default_rng(20240611)
    for _ in range(200):
        binary = _random_binary(make_binary, func, rng, int(rng.integers(1, 30)))
        graph = build_call_graph(binary)
        order = condense_and_order(graph)

        covered = [n for component in order.components for n in component]
        assert sorted(covered) == sorted(graph.nodes)

        for caller, callee in graph.edges:
            a, b = order.position(caller), order.position(callee)
            if a == b:
                assert caller in order.cyclic and callee in order.cyclic
            else:
                assert b < a

        waves = order.levels()
        wave_of = {index: depth for depth, wave in enumerate(waves) for index in wave}
        for index, deps in enumerate(order.depends_on):
            for dep in deps:
                assert wave_of[dep] < wave_of[index]


def test_condensation_dot(sample, tmp_path):
    graph = build_call_graph(sample)
    order = condense_and_order(graph)
    path = write_condensation_dot(order, graph, tmp_path / "scc.dot")
    text = path.read_text(encoding="utf-8")
    assert text.startswith("digraph Condensation {")
    assert "shape=box" in text
