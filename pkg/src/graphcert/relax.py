"""Sound per-operator linear relaxations on preactivation boxes.

Every rule is vectorized over a leading batch axis: preactivation bounds come in
as arrays of shape (B, d) and the resulting coefficients keep that batch axis.
Elementwise operators produce diagonal relaxations (slope vectors); structural
operators produce dense coefficient matrices shared across the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .graph import Node, Op, sigmoid

TWO_PI = 2.0 * np.pi
# outward bias padding for lines whose tangency point is located numerically
PAD = 1e-9
BISECT_TOL = 1e-10


@dataclass
class RelaxParams:
    """Free parameters of the relaxation family.

    ``alpha`` maps a ReLU node id to a lower slope (scalar or per-neuron array);
    nodes without an entry use the steeper-side heuristic.
    """

    alpha: dict[str, object] = field(default_factory=dict)
    mul_lower: int = 1
    mul_upper: int = 1


@dataclass
class LinearRelaxation:
    """Lower/upper planes for one node, per parent.

    With ``diagonal`` set, ``lower[j]``/``upper[j]`` are slope vectors of shape
    (B, d); otherwise they are matrices of shape (B, d, p_j).  B may be 1 for
    relaxations that do not depend on the box.
    """

    lower: list[np.ndarray]
    upper: list[np.ndarray]
    lower_bias: np.ndarray
    upper_bias: np.ndarray
    diagonal: bool = True
    exact: bool = False

    def matrix(self, j: int, which: str = "lower") -> np.ndarray:
        coef = (self.lower if which == "lower" else self.upper)[j]
        if not self.diagonal:
            return coef
        return coef[..., :, None] * np.eye(coef.shape[-1])

    def planes(self, xs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate both planes at parent values xs[j] of shape (B, N, p_j) -> (B, N, d) each."""
        lo = self.lower_bias[:, None, :]
        hi = self.upper_bias[:, None, :]
        for j, x in enumerate(xs):
            if self.diagonal:
                lo = lo + self.lower[j][:, None, :] * x
                hi = hi + self.upper[j][:, None, :] * x
            else:
                lo = lo + np.einsum("bdp,bnp->bnd", self.lower[j], x)
                hi = hi + np.einsum("bdp,bnp->bnd", self.upper[j], x)
        return lo, hi

    def backprop(self, A: np.ndarray, lower: bool) -> tuple[list[np.ndarray], np.ndarray]:
        """Push a coefficient block A (B, q, d) through this node.

        For the lower bound positive entries of A pick the lower plane and negative
        entries the upper plane; ``lower=False`` swaps the roles.
        """
        if self.exact:
            if self.diagonal:
                lams = [A * c[:, None, :] for c in self.lower]
            else:
                lams = [A @ c for c in self.lower]
            bias = np.einsum("bqd,bd->bq", A, np.broadcast_to(self.lower_bias, (A.shape[0], A.shape[2])))
            return lams, bias
        pos, neg = np.maximum(A, 0.0), np.minimum(A, 0.0)
        first, second = (self.lower, self.upper) if lower else (self.upper, self.lower)
        b_first, b_second = (self.lower_bias, self.upper_bias) if lower else (self.upper_bias, self.lower_bias)
        if self.diagonal:
            lams = [pos * f[:, None, :] + neg * s[:, None, :] for f, s in zip(first, second)]
        else:
            lams = [pos @ f + neg @ s for f, s in zip(first, second)]
        bias = np.einsum("bqd,bd->bq", pos, b_first) + np.einsum("bqd,bd->bq", neg, b_second)
        return lams, bias


def _as2d(a) -> np.ndarray:
    return np.atleast_2d(np.asarray(a, dtype=float))


def _elementwise(lo_slope, lo_bias, up_slope, up_bias, exact=False) -> LinearRelaxation:
    return LinearRelaxation([lo_slope], [up_slope], lo_bias, up_bias, diagonal=True, exact=exact)


# ---------------------------------------------------------------------------
# piecewise-linear and polynomial rules


def relu_default_alpha(l, u):
    return (u > -l).astype(float)


def relax_relu(l, u, alpha=None) -> LinearRelaxation:
    l, u = _as2d(l), _as2d(u)
    active = l >= 0
    inactive = u <= 0
    unstable = ~(active | inactive)
    if alpha is None:
        alpha = relu_default_alpha(l, u)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), l.shape)
    denom = np.where(unstable, u - l, 1.0)
    up_slope = np.where(active, 1.0, np.where(unstable, u / denom, 0.0))
    up_bias = np.where(unstable, -u * l / denom, 0.0)
    lo_slope = np.where(active, 1.0, np.where(unstable, alpha, 0.0))
    return _elementwise(lo_slope, np.zeros_like(l), up_slope, up_bias)


def relax_heaviside(l, u) -> LinearRelaxation:
    # the gate is 0 at the kink, so only a strictly positive box is constantly 1
    l, u = _as2d(l), _as2d(u)
    on = l > 0
    off = u <= 0
    zeros = np.zeros_like(l)
    lo_bias = np.where(on, 1.0, 0.0)
    up_bias = np.where(off, 0.0, 1.0)
    return _elementwise(zeros, lo_bias, zeros.copy(), up_bias)


def relax_square(l, u) -> LinearRelaxation:
    """Chord above, midpoint tangent below."""
    l, u = _as2d(l), _as2d(u)
    m = 0.5 * (l + u)
    return _elementwise(2.0 * m, -m * m, l + u, -l * u)


def mccormick_planes(lx, ux, ly, uy):
    """All four McCormick planes as (coef_x, coef_y, bias) triples: lower1, lower2, upper1, upper2."""
    return (
        (ly, lx, -lx * ly),
        (uy, ux, -ux * uy),
        (ly, ux, -ux * ly),
        (uy, lx, -lx * uy),
    )


def relax_mul(lx, ux, ly, uy, lower_choice: int = 1, upper_choice: int = 1) -> LinearRelaxation:
    lx, ux, ly, uy = (_as2d(a) for a in (lx, ux, ly, uy))
    lo1, lo2, up1, up2 = mccormick_planes(lx, ux, ly, uy)
    lo = lo1 if lower_choice == 1 else lo2
    up = up1 if upper_choice == 1 else up2
    return LinearRelaxation([lo[0], lo[1]], [up[0], up[1]], lo[2], up[2], diagonal=True)


def relax_affine(W, b=None) -> LinearRelaxation:
    W = np.atleast_2d(np.asarray(W, dtype=float))
    b = np.zeros(W.shape[0]) if b is None else np.asarray(b, dtype=float).reshape(-1)
    M = W[None]
    return LinearRelaxation([M], [M], b[None], b[None], diagonal=False, exact=True)


def _exact_diag(coefs: Sequence[np.ndarray], d: int) -> LinearRelaxation:
    cs = [np.broadcast_to(np.asarray(c, dtype=float), (1, d)) for c in coefs]
    z = np.zeros((1, d))
    return LinearRelaxation(cs, cs, z, z, diagonal=True, exact=True)


def _exact_dense(mats: Sequence[np.ndarray]) -> LinearRelaxation:
    ms = [m[None] for m in mats]
    z = np.zeros((1, mats[0].shape[0]))
    return LinearRelaxation(ms, ms, z, z, diagonal=False, exact=True)


# ---------------------------------------------------------------------------
# smooth elementwise functions


@dataclass(frozen=True)
class Smooth:
    f: Callable
    df: Callable
    # critical points of f(x) - a x, i.e. solutions of f'(x) = a, restricted to near [l, u]
    crit: Callable


def _sin_crit(a, l, u):
    c = np.arccos(np.clip(a, -1.0, 1.0))
    ok = np.abs(a) <= 1.0
    out = []
    for base in (c, -c):
        k = np.ceil((l - base) / TWO_PI)
        out.append(np.where(ok, base + TWO_PI * k, np.nan))
    return out


def _tanh_crit(a, l, u):
    ok = (a > 0) & (a <= 1)
    r = np.sqrt(np.clip(1.0 - a, 0.0, 1.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(ok & (r < 1), np.arctanh(np.minimum(r, 1 - 1e-17)), np.nan)
    return [x, -x]


def _sigmoid_crit(a, l, u):
    ok = (a > 0) & (a <= 0.25)
    r = np.sqrt(np.clip(1.0 - 4.0 * a, 0.0, 1.0))
    s = 0.5 * (1.0 + r)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(ok & (s < 1), np.log(s / (1.0 - s)), np.nan)
    return [x, -x]


SIN = Smooth(np.sin, np.cos, _sin_crit)
TANH = Smooth(np.tanh, lambda x: 1.0 - np.tanh(x) ** 2, _tanh_crit)
SIGMOID = Smooth(sigmoid, lambda x: sigmoid(x) * (1.0 - sigmoid(x)), _sigmoid_crit)


def tight_bias(fn: Smooth, a, l, u, upper: bool):
    """Smallest b with a x + b >= f(x) on [l, u] (largest with <= when upper is False)."""
    best = None
    cands = [l, u] + [c for c in fn.crit(a, l, u)]
    for c in cands:
        inside = np.isfinite(c) & (c >= l) & (c <= u)
        cc = np.where(inside, c, l)
        v = fn.f(cc) - a * cc
        v = np.where(inside, v, -np.inf if upper else np.inf)
        best = v if best is None else (np.maximum(best, v) if upper else np.minimum(best, v))
    return best


def _bisect_tangent(fn: Smooth, lo, hi, anchor, mask, increasing: bool):
    """Tangency point t in [lo, hi] whose tangent passes through (anchor, f(anchor)).

    h(t) = f(t) + f'(t)(anchor - t) - f(anchor) is monotone on the bracket; returns
    (t, found) where found is False when the bracket holds no sign change.
    """
    fa = fn.f(anchor)

    def h(t):
        return fn.f(t) + fn.df(t) * (anchor - t) - fa

    lo, hi = lo.copy(), hi.copy()
    hl, hh = h(lo), h(hi)
    if not increasing:
        hl, hh = -hl, -hh
    found = mask & (hl <= 0) & (hh >= 0)
    while True:
        width = np.where(found, hi - lo, 0.0)
        if not np.any(width > BISECT_TOL):
            break
        mid = 0.5 * (lo + hi)
        hm = h(mid) if increasing else -h(mid)
        go_right = hm < 0
        lo = np.where(found & go_right, mid, lo)
        hi = np.where(found & ~go_right, mid, hi)
    return 0.5 * (lo + hi), found


def _pick(fn: Smooth, slopes: list, l, u, upper: bool):
    """Among candidate slopes, return the tight line closest to f at the midpoint."""
    m = 0.5 * (l + u)
    best_a = best_b = best_v = None
    for a in slopes:
        b = tight_bias(fn, a, l, u, upper)
        v = a * m + b
        if best_a is None:
            best_a, best_b, best_v = a, b, v
            continue
        better = v < best_v if upper else v > best_v
        best_a = np.where(better, a, best_a)
        best_b = np.where(better, b, best_b)
        best_v = np.where(better, v, best_v)
    return best_a, best_b


def _smooth_lines(fn: Smooth, l, u, concave, convex, infl, right_concave):
    """Generic rule shared by sin, tanh and sigmoid.

    concave/convex: masks of boxes lying in one curvature region.  Elsewhere the
    interval is mixed; `infl` is its single inflection point (nan when there are
    several) and `right_concave` tells the curvature just right of it.
    """
    width = u - l
    safe_w = np.where(width > 0, width, 1.0)
    secant = np.where(width > 0, (fn.f(u) - fn.f(l)) / safe_w, fn.df(l))
    mid_tan = fn.df(0.5 * (l + u))

    # pure regions: secant on one side, midpoint tangent on the other
    lo_a = np.where(concave, secant, mid_tan)
    up_a = np.where(concave, mid_tan, secant)

    mixed = ~(concave | convex)
    if np.any(mixed):
        single = mixed & np.isfinite(infl)
        p = np.where(single, infl, l)
        rc = single & right_concave
        rv = single & ~right_concave
        # right side concave: upper tangent right of p through (l, f(l)), lower tangent left of p through (u, f(u))
        # right side convex: the mirror image
        t_up_r, f_up_r = _bisect_tangent(fn, p, u, l, rc, increasing=True)
        t_lo_l, f_lo_l = _bisect_tangent(fn, l, p, u, rc, increasing=True)
        t_lo_r, f_lo_r = _bisect_tangent(fn, p, u, l, rv, increasing=False)
        t_up_l, f_up_l = _bisect_tangent(fn, l, p, u, rv, increasing=False)
        up_tan = np.where(rc & f_up_r, fn.df(t_up_r), np.where(rv & f_up_l, fn.df(t_up_l), secant))
        lo_tan = np.where(rc & f_lo_l, fn.df(t_lo_l), np.where(rv & f_lo_r, fn.df(t_lo_r), secant))
        zero = np.zeros_like(l)
        base = [secant, fn.df(l), fn.df(u), mid_tan, zero]
        up_m, ub_m = _pick(fn, [up_tan] + base, l, u, upper=True)
        lo_m, lb_m = _pick(fn, [lo_tan] + base, l, u, upper=False)
        up_a = np.where(mixed, up_m, up_a)
        lo_a = np.where(mixed, lo_m, lo_a)

    up_b = tight_bias(fn, up_a, l, u, upper=True) + PAD
    lo_b = tight_bias(fn, lo_a, l, u, upper=False) - PAD

    degenerate = width <= 0
    if np.any(degenerate):
        fl = fn.f(l)
        up_a = np.where(degenerate, 0.0, up_a)
        lo_a = np.where(degenerate, 0.0, lo_a)
        up_b = np.where(degenerate, fl, up_b)
        lo_b = np.where(degenerate, fl, lo_b)
    return lo_a, lo_b, up_a, up_b


def relax_sin(l, u) -> LinearRelaxation:
    l, u = _as2d(l), _as2d(u)
    wide = (u - l) >= TWO_PI
    lw = np.where(wide, 0.0, l)
    uw = np.where(wide, 1.0, u)
    k = np.floor(lw / np.pi)
    seg_end = (k + 1) * np.pi
    pure = uw <= seg_end
    even = np.mod(k, 2) == 0
    concave = pure & even
    convex = pure & ~even
    single = ~pure & (uw <= seg_end + np.pi)
    infl = np.where(single, seg_end, np.nan)
    # segment right of seg_end is concave when k + 1 is even
    right_concave = np.mod(k + 1, 2) == 0
    lo_a, lo_b, up_a, up_b = _smooth_lines(SIN, lw, uw, concave, convex, infl, right_concave)
    lo_a = np.where(wide, 0.0, lo_a)
    up_a = np.where(wide, 0.0, up_a)
    lo_b = np.where(wide, -1.0, lo_b)
    up_b = np.where(wide, 1.0, up_b)
    return _elementwise(lo_a, lo_b, up_a, up_b)


def relax_cos(l, u) -> LinearRelaxation:
    """cos x = sin(x + pi/2); shift the sine planes back."""
    l, u = _as2d(l), _as2d(u)
    shift = 0.5 * np.pi
    r = relax_sin(l + shift, u + shift)
    lo_a, up_a = r.lower[0], r.upper[0]
    lo_b = r.lower_bias + lo_a * shift
    up_b = r.upper_bias + up_a * shift
    # the shifted endpoints carry rounding error; pad only where the lines are not exact constants
    degenerate = (u - l) <= 0
    lo_b = np.where(degenerate, np.cos(l), lo_b - np.where(lo_a != 0, PAD, 0.0))
    up_b = np.where(degenerate, np.cos(l), up_b + np.where(up_a != 0, PAD, 0.0))
    return _elementwise(lo_a, lo_b, up_a, up_b)


def _relax_sshape(fn: Smooth, l, u) -> LinearRelaxation:
    l, u = _as2d(l), _as2d(u)
    concave = l >= 0
    convex = u <= 0
    infl = np.zeros_like(l)
    right_concave = np.ones_like(l, dtype=bool)
    return _elementwise(*_smooth_lines(fn, l, u, concave, convex, infl, right_concave))


def relax_tanh(l, u) -> LinearRelaxation:
    return _relax_sshape(TANH, l, u)


def relax_sigmoid(l, u) -> LinearRelaxation:
    return _relax_sshape(SIGMOID, l, u)


def relax_sshape(kind: Op | str, l, u) -> LinearRelaxation:
    kind = Op(kind)
    if kind is Op.TANH:
        return relax_tanh(l, u)
    if kind is Op.SIGMOID:
        return relax_sigmoid(l, u)
    raise ValueError(f"not an S-shaped activation: {kind.value}")


# ---------------------------------------------------------------------------
# dispatch


class UnsupportedOperator(ValueError):
    pass


def relax_node(node: Node, pre: Sequence[tuple[np.ndarray, np.ndarray]], params: RelaxParams | None = None) -> LinearRelaxation:
    """Relaxation of `node` given (lower, upper) preactivation arrays of shape (B, d_j) per parent."""
    params = params or RelaxParams()
    op, pl, d = node.op, node.payload, node.dim
    if op is Op.AFFINE:
        return relax_affine(pl["W"], pl.get("b"))
    if op is Op.ADD:
        return _exact_diag([np.ones(d), np.ones(d)], d)
    if op is Op.SUB:
        return _exact_diag([np.ones(d), -np.ones(d)], d)
    if op is Op.NEG:
        return _exact_diag([-np.ones(d)], d)
    if op is Op.SCALE:
        return _exact_diag([np.full(d, float(pl["k"]))], d)
    if op is Op.CONCAT:
        mats, k = [], 0
        for lo, _ in pre:
            p = lo.shape[-1]
            M = np.zeros((d, p))
            M[k : k + p] = np.eye(p)
            mats.append(M)
            k += p
        return _exact_dense(mats)
    if op is Op.SLICE:
        p = pre[0][0].shape[-1]
        M = np.zeros((d, p))
        M[np.arange(d), np.arange(int(pl["lo"]), int(pl["hi"]))] = 1.0
        return _exact_dense([M])
    if op is Op.SUM:
        return _exact_dense([np.ones((1, pre[0][0].shape[-1]))])
    if op is Op.RELU:
        alpha = params.alpha.get(node.id)
        return relax_relu(*pre[0], alpha=alpha)
    if op is Op.HEAVISIDE:
        return relax_heaviside(*pre[0])
    if op is Op.SQUARE:
        return relax_square(*pre[0])
    if op is Op.MUL:
        (lx, ux), (ly, uy) = pre
        return relax_mul(lx, ux, ly, uy, params.mul_lower, params.mul_upper)
    if op is Op.SIN:
        return relax_sin(*pre[0])
    if op is Op.COS:
        return relax_cos(*pre[0])
    if op is Op.TANH:
        return relax_tanh(*pre[0])
    if op is Op.SIGMOID:
        return relax_sigmoid(*pre[0])
    raise UnsupportedOperator(f"no linear relaxation for operator {op.value!r} (node {node.id!r})")
