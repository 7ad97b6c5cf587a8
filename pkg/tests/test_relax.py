import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _sweep import KINDS, UNARY, worst_violation
from graphcert.graph import Node, Op
from graphcert.relax import (
    RelaxParams,
    UnsupportedOperator,
    mccormick_planes,
    relax_heaviside,
    relax_mul,
    relax_node,
    relax_relu,
    relax_sin,
    relax_square,
    relax_tanh,
)


def lines(r):
    return r.lower[0][0, 0], r.lower_bias[0, 0], r.upper[0][0, 0], r.upper_bias[0, 0]


@pytest.mark.parametrize("kind", KINDS)
def test_sampled_soundness(kind):
    assert worst_violation(kind, boxes=60, m=2000, seed=11) <= 1e-9


finite = st.floats(-20, 20, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(sorted(UNARY)), finite, st.floats(0, 15), st.floats(0, 1))
def test_unary_sound_at_any_point(kind, c, w, t):
    fn, rule = UNARY[kind]
    l, u = c - w / 2, c + w / 2
    x = l + t * (u - l)
    a_l, b_l, a_u, b_u = lines(rule(np.array([[l]]), np.array([[u]])))
    fx = float(fn(np.array(x)))
    assert a_l * x + b_l <= fx + 1e-9
    assert fx <= a_u * x + b_u + 1e-9


def test_relu_triangle():
    a_l, b_l, a_u, b_u = lines(relax_relu([[-1.0]], [[3.0]]))
    assert (a_u, b_u) == pytest.approx((0.75, 0.75))
    assert (a_l, b_l) == (1.0, 0.0)  # u > -l picks the identity lower line
    a_l, _, _, _ = lines(relax_relu([[-3.0]], [[1.0]]))
    assert a_l == 0.0


def test_relu_alpha_parameter_respected():
    a_l, _, _, _ = lines(relax_relu([[-1.0]], [[1.0]], alpha=0.3))
    assert a_l == pytest.approx(0.3)


def test_relu_stable_cases_exact():
    assert lines(relax_relu([[0.5]], [[2.0]])) == (1.0, 0.0, 1.0, 0.0)
    assert lines(relax_relu([[-2.0]], [[-0.5]])) == (0.0, 0.0, 0.0, 0.0)


def test_heaviside_cases():
    assert lines(relax_heaviside([[0.5]], [[1.0]]))[1::2] == (1.0, 1.0)
    assert lines(relax_heaviside([[-1.0]], [[0.0]]))[1::2] == (0.0, 0.0)
    # the gate is 0 at 0, so [0, 1] is not constantly on
    assert lines(relax_heaviside([[0.0]], [[1.0]]))[1::2] == (0.0, 1.0)


def test_square_chord_and_tangent():
    a_l, b_l, a_u, b_u = lines(relax_square([[1.0]], [[3.0]]))
    assert (a_u, b_u) == pytest.approx((4.0, -3.0))
    assert (a_l, b_l) == pytest.approx((4.0, -4.0))  # tangent at 2


def test_mccormick_tight_at_corners():
    lx, ux, ly, uy = -1.0, 2.0, 0.5, 3.0
    for coef_x, coef_y, b in mccormick_planes(lx, ux, ly, uy):
        hits = [abs(coef_x * x + coef_y * y + b - x * y) < 1e-12 for x in (lx, ux) for y in (ly, uy)]
        assert sum(hits) >= 2
    r = relax_mul([[lx]], [[ux]], [[ly]], [[uy]])
    lo, hi = r.planes([np.array([[[0.0]]]), np.array([[[1.0]]])])
    assert lo[0, 0, 0] <= 0.0 <= hi[0, 0, 0]


def test_tanh_lower_secant_on_concave_side():
    # oracle: (tanh 2 - tanh 1) / 1
    a_l, b_l, _, _ = lines(relax_tanh([[1.0]], [[2.0]]))
    assert a_l == pytest.approx(np.tanh(2) - np.tanh(1), abs=1e-9)
    assert a_l == pytest.approx(0.20243, abs=1e-5)
    assert a_l * 1 + b_l == pytest.approx(np.tanh(1), abs=1e-8)


def test_sin_full_period_gives_constants():
    assert lines(relax_sin([[0.0]], [[7.0]])) == (0.0, -1.0, 0.0, 1.0)


def test_point_box_is_tight():
    for kind, (fn, rule) in UNARY.items():
        a_l, b_l, a_u, b_u = lines(rule([[0.7]], [[0.7]]))
        assert a_l * 0.7 + b_l == pytest.approx(fn(np.array(0.7)), abs=1e-8), kind
        assert a_u * 0.7 + b_u == pytest.approx(fn(np.array(0.7)), abs=1e-8), kind


def test_relax_node_dispatch_and_unsupported():
    node = Node("r", Op.RELU, ("x",), dim=1)
    r = relax_node(node, [(np.array([[-1.0]]), np.array([[1.0]]))], RelaxParams(alpha={"r": 0.0}))
    assert r.lower[0][0, 0] == 0.0
    with pytest.raises(UnsupportedOperator):
        relax_node(Node("i", Op.INPUT, dim=1), [])
