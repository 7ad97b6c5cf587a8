import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphcert.fixtures import random_graph, toy_graph
from graphcert.graph import (
    Box,
    Graph,
    GraphBuilder,
    GraphError,
    GraphFormatError,
    Node,
    Op,
    dumps_graph,
    evaluate,
    forward,
    loads_graph,
    validate,
)


def test_toy_forward_values():
    g = toy_graph()
    assert evaluate(g, [1.0])[0] == pytest.approx(4.0)
    assert evaluate(g, [-1.0])[0] == pytest.approx(3.0)
    vals = forward(g, np.array([0.75]))
    assert vals["pre"][0] == pytest.approx(0.5)


def test_batched_evaluation_matches_rows():
    g = random_graph(1, ops=("affine", "sin", "mul"), in_dim=3, out_dim=2)
    X = np.random.default_rng(0).normal(size=(7, 3))
    Y = evaluate(g, X)
    assert Y.shape == (7, 2)
    for x, y in zip(X, Y):
        np.testing.assert_allclose(evaluate(g, x), y)


def test_cycle_rejected():
    nodes = [Node("x", Op.INPUT, dim=1), Node("a", Op.NEG, ("b",)), Node("b", Op.NEG, ("a",))]
    rep = validate(Graph(nodes, ["x"], "b"))
    assert not rep.ok
    assert any("cycle" in v for v in rep.violations)


def test_shape_mismatch_reported():
    nodes = [
        Node("x", Op.INPUT, dim=2),
        Node("y", Op.INPUT, dim=3),
        Node("s", Op.ADD, ("x", "y"), dim=2),
    ]
    assert not validate(Graph(nodes, ["x", "y"], "s")).ok


def test_unvalidated_graph_refuses_evaluation():
    nodes = [Node("x", Op.INPUT, dim=1), Node("a", Op.NEG, ("zzz",))]
    g = Graph(nodes, ["x"], "a")
    with pytest.raises(GraphError):
        evaluate(g, [0.0])


def test_builder_helpers_dimensions():
    b = GraphBuilder()
    x = b.input("x", 3)
    h = b.affine(x, np.ones((4, 3)))
    s = b.slice(h, 1, 3)
    c = b.concat([s, b.sum(h)])
    g = b.build(c)
    assert g.output_dim == 3
    np.testing.assert_allclose(evaluate(g, [1.0, 2.0, 3.0]), [6.0, 6.0, 24.0])


def test_multi_input_concatenation_order():
    b = GraphBuilder()
    x = b.input("x", 2)
    u = b.input("u", 1)
    g = b.build(b.concat([u, x]))
    assert g.input_dim == 3
    assert g.input_slices() == {"x": slice(0, 2), "u": slice(2, 3)}
    np.testing.assert_allclose(evaluate(g, [1.0, 2.0, 3.0]), [3.0, 1.0, 2.0])


def test_inline_fragment():
    inner = toy_graph()
    b = GraphBuilder()
    x = b.input("x", 1)
    y = b.inline(inner, [b.scale(x, 0.5)], tag="t")
    g = b.build(b.add_(y, x))
    assert evaluate(g, [2.0])[0] == pytest.approx(6.0)


def test_json_round_trip_exact():
    g = random_graph(4, ops=("affine", "tanh", "square", "cos"), in_dim=2, out_dim=2)
    g2 = loads_graph(dumps_graph(g))
    X = np.random.default_rng(1).uniform(-2, 2, size=(20, 2))
    np.testing.assert_array_equal(evaluate(g, X), evaluate(g2, X))
    assert dumps_graph(g2) == dumps_graph(g)


@pytest.mark.parametrize(
    "mutate, needle",
    [
        (lambda d: d.pop("format_version"), "format_version"),
        (lambda d: d["nodes"].append({"id": "bad", "op": "warp", "parents": []}), "warp"),
        (lambda d: d.__setitem__("output", "missing"), "missing"),
    ],
)
def test_malformed_graph_documents(mutate, needle):
    doc = json.loads(dumps_graph(toy_graph()))
    mutate(doc)
    with pytest.raises(GraphFormatError, match=needle):
        loads_graph(json.dumps(doc))


def test_syntax_error_reports_position():
    with pytest.raises(GraphFormatError, match="line 1"):
        loads_graph("{ nope")


def test_box_basics():
    b = Box([-1.0, 0.0], [1.0, 0.0])
    assert b.dim == 2
    assert b.volume() == 2.0
    assert b.contains([0.5, 0.0])
    assert not b.contains([0.5, 1e-3])
    with pytest.raises(ValueError):
        Box([1.0], [0.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_random_graph_deterministic_and_valid(seed):
    g1 = random_graph(seed, ops=("affine", "relu", "sigmoid", "mul"))
    g2 = random_graph(seed, ops=("affine", "relu", "sigmoid", "mul"))
    assert validate(g1).ok
    assert dumps_graph(g1) == dumps_graph(g2)
