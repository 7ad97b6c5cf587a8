import numpy as np
import pytest

from graphcert.boundprop import bounds_on_box
from graphcert.fixtures import mlp, square_minus_one, toy_graph, two_layer_tanh, unary_graph
from graphcert.graph import Box, GraphBuilder, Op, evaluate
from graphcert.jacobian import UnsupportedDerivative, augment_with_jacobian, point_gradient


def fd_grad(g, X, h=1e-6):
    G = np.zeros_like(X)
    for i in range(X.shape[1]):
        e = np.zeros(X.shape[1])
        e[i] = h
        G[:, i] = (evaluate(g, X + e)[:, 0] - evaluate(g, X - e)[:, 0]) / (2 * h)
    return G


def test_sin_augmented_at_zero():
    aug = augment_with_jacobian(unary_graph("sin"))
    np.testing.assert_allclose(evaluate(aug.graph, [0.0]), [0.0, 1.0], atol=1e-15)


def test_square_augmented():
    aug = augment_with_jacobian(unary_graph("square"))
    np.testing.assert_allclose(evaluate(aug.graph, [3.0]), [9.0, 6.0])


def test_relu_gate_convention():
    aug = augment_with_jacobian(toy_graph())
    y = evaluate(aug.graph, np.array([[1.0], [0.0], [0.5]]))
    np.testing.assert_allclose(y[:, 1], [2.0, 0.0, 0.0])
    np.testing.assert_allclose(point_gradient(toy_graph(), np.array([[1.0], [0.0], [0.5]]))[:, 0], [2.0, 0.0, 0.0])


def mixed_graph():
    b = GraphBuilder("mixed")
    x = b.input("x", 3)
    a = b.slice(x, 0, 2)
    c = b.concat([b.unary(Op.COS, a), b.unary(Op.SIGMOID, b.slice(x, 2, 3))])
    h = b.mul(c, b.affine(x, np.arange(9.0).reshape(3, 3) / 9.0))
    return b.build(b.sum(b.sub(b.unary(Op.SQUARE, h), b.neg(b.scale(h, 0.3)))))


@pytest.mark.parametrize(
    "g", [two_layer_tanh(), mlp([2, 5, 1], "sigmoid", seed=2), square_minus_one(), mixed_graph()], ids=lambda g: g.name
)
def test_gradients_match_finite_differences(g):
    X = np.random.default_rng(0).uniform(-1.5, 1.5, size=(50, g.input_dim))
    aug = augment_with_jacobian(g)
    Y = evaluate(aug.graph, X)
    np.testing.assert_allclose(Y[:, aug.value_slice], evaluate(g, X), rtol=1e-12, atol=1e-12)
    fd = fd_grad(g, X)
    np.testing.assert_allclose(Y[:, aug.grad_slice], fd, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(point_gradient(g, X), fd, rtol=1e-5, atol=1e-6)


def test_gradient_bounds_contain_sampled_gradients():
    g = two_layer_tanh()
    box = Box(np.full(g.input_dim, -0.5), np.full(g.input_dim, 0.5))
    aug = augment_with_jacobian(g)
    sb, _ = bounds_on_box(aug.graph, box)
    G = point_gradient(g, box.sample(np.random.default_rng(1), 3000))
    assert np.all(sb.lower[aug.grad_slice] <= G.min(0) + 1e-9)
    assert np.all(G.max(0) <= sb.upper[aug.grad_slice] + 1e-9)


def test_unreachable_input_gets_zero_gradient():
    b = GraphBuilder()
    x = b.input("x", 1)
    b.input("w", 1)
    aug = augment_with_jacobian(b.build(b.unary(Op.SIN, x)))
    np.testing.assert_allclose(evaluate(aug.graph, [0.0, 5.0]), [0.0, 1.0, 0.0])


def test_vector_output_rejected():
    b = GraphBuilder()
    x = b.input("x", 2)
    with pytest.raises(ValueError):
        augment_with_jacobian(b.build(b.unary(Op.SIN, x)))


def test_heaviside_has_no_derivative_rule():
    b = GraphBuilder()
    x = b.input("x", 1)
    with pytest.raises(UnsupportedDerivative):
        augment_with_jacobian(b.build(b.unary(Op.HEAVISIDE, x)))
