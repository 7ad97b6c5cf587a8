"""Backward linear bound propagation, interval propagation and concretization.

All routines are batched over boxes: ``lower``/``upper`` arrays have shape
(B, n) over the concatenated input vector, and results carry the same leading
batch axis.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import NONLINEAR, Box, Graph, Op
from .relax import RelaxParams, relax_node

IBP = "ibp"
CROWN = "crown"


@dataclass
class AffineBound:
    """A_l x + b_l <= F(x) <= A_u x + b_u on the box [lower, upper].

    Arrays may carry a leading batch axis: A_* (B, q, n), b_* (B, q), box (B, n).
    """

    A_l: np.ndarray
    b_l: np.ndarray
    A_u: np.ndarray
    b_u: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __getitem__(self, i) -> "AffineBound":
        return AffineBound(self.A_l[i], self.b_l[i], self.A_u[i], self.b_u[i], self.lower[i], self.upper[i])

    @property
    def box(self) -> Box:
        return Box(self.lower, self.upper)


@dataclass
class ScalarBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __getitem__(self, i) -> "ScalarBounds":
        return ScalarBounds(self.lower[i], self.upper[i])


class MissingBoundsError(KeyError):
    pass


def concretize_lower(A, b, lower, upper):
    """min over the box of A x + b, row-wise; A (..., q, n), box (..., n)."""
    pos, neg = np.maximum(A, 0.0), np.minimum(A, 0.0)
    return np.einsum("...qn,...n->...q", pos, lower) + np.einsum("...qn,...n->...q", neg, upper) + b


def concretize_upper(A, b, lower, upper):
    pos, neg = np.maximum(A, 0.0), np.minimum(A, 0.0)
    return np.einsum("...qn,...n->...q", pos, upper) + np.einsum("...qn,...n->...q", neg, lower) + b


def concretize(bound: AffineBound) -> ScalarBounds:
    return ScalarBounds(
        concretize_lower(bound.A_l, bound.b_l, bound.lower, bound.upper),
        concretize_upper(bound.A_u, bound.b_u, bound.lower, bound.upper),
    )


# ---------------------------------------------------------------------------
# interval arithmetic


def _sin_range(l, u):
    lo = np.minimum(np.sin(l), np.sin(u))
    hi = np.maximum(np.sin(l), np.sin(u))
    # a peak pi/2 + 2 pi k or trough -pi/2 + 2 pi k inside [l, u]
    peak = np.ceil((l - 0.5 * np.pi) / (2 * np.pi)) * 2 * np.pi + 0.5 * np.pi
    trough = np.ceil((l + 0.5 * np.pi) / (2 * np.pi)) * 2 * np.pi - 0.5 * np.pi
    hi = np.where(peak <= u, 1.0, hi)
    lo = np.where(trough <= u, -1.0, lo)
    return lo, hi


def interval_op(node, args: Sequence[tuple[np.ndarray, np.ndarray]]):
    """Interval image of one node given parent intervals of shape (B, d_j)."""
    op, pl = node.op, node.payload
    if op is Op.AFFINE:
        (l, u), W = args[0], np.asarray(pl["W"])
        c, r = 0.5 * (l + u), 0.5 * (u - l)
        mid = c @ W.T + np.asarray(pl.get("b", 0.0))
        rad = r @ np.abs(W).T
        return mid - rad, mid + rad
    if op is Op.ADD:
        (a, b), (c, d) = args
        return a + c, b + d
    if op is Op.SUB:
        (a, b), (c, d) = args
        return a - d, b - c
    if op is Op.NEG:
        l, u = args[0]
        return -u, -l
    if op is Op.SCALE:
        k = float(pl["k"])
        l, u = args[0]
        return (k * l, k * u) if k >= 0 else (k * u, k * l)
    if op is Op.MUL:
        (a, b), (c, d) = args
        prods = np.stack([a * c, a * d, b * c, b * d])
        return prods.min(axis=0), prods.max(axis=0)
    if op is Op.SQUARE:
        l, u = args[0]
        lo = np.where(l >= 0, l * l, np.where(u <= 0, u * u, 0.0))
        return lo, np.maximum(l * l, u * u)
    if op in (Op.RELU, Op.TANH, Op.SIGMOID, Op.HEAVISIDE):
        from .graph import UNARY_FN

        l, u = args[0]
        return UNARY_FN[op](l), UNARY_FN[op](u)
    if op is Op.SIN:
        return _sin_range(*args[0])
    if op is Op.COS:
        l, u = args[0]
        return _sin_range(l + 0.5 * np.pi, u + 0.5 * np.pi)
    if op is Op.CONCAT:
        return np.concatenate([a for a, _ in args], axis=1), np.concatenate([b for _, b in args], axis=1)
    if op is Op.SLICE:
        l, u = args[0]
        s = slice(int(pl["lo"]), int(pl["hi"]))
        return l[:, s], u[:, s]
    if op is Op.SUM:
        l, u = args[0]
        return l.sum(axis=1, keepdims=True), u.sum(axis=1, keepdims=True)
    raise ValueError(f"no interval rule for {op.value}")


def _as_batch(lower, upper):
    lower = np.atleast_2d(np.asarray(lower, dtype=float))
    upper = np.atleast_2d(np.asarray(upper, dtype=float))
    return lower, upper


def _input_intervals(graph: Graph, lower, upper) -> dict:
    return {i: (lower[:, s], upper[:, s]) for i, s in graph.input_slices().items()}


def ibp(graph: Graph, lower, upper, nodes: set[str] | None = None) -> dict:
    """Forward interval propagation; returns node id -> (lo, hi) arrays of shape (B, d)."""
    lower, upper = _as_batch(lower, upper)
    B = lower.shape[0]
    cache = _input_intervals(graph, lower, upper)
    for nid in graph.order:
        node = graph[nid]
        if nodes is not None and nid not in nodes:
            continue
        if node.op is Op.INPUT:
            continue
        if node.op is Op.CONSTANT:
            c = np.broadcast_to(np.asarray(node.payload["value"], dtype=float), (B, node.dim))
            cache[nid] = (c, c)
        else:
            cache[nid] = interval_op(node, [cache[p] for p in node.parents])
    return cache


# ---------------------------------------------------------------------------
# backward propagation


def _needs_bounds(graph: Graph, targets: set[str]) -> list[str]:
    """Nodes (in topological order) whose intervals are needed to relax the ancestors of `targets`."""
    anc: set[str] = set()
    for t in targets:
        anc |= graph.ancestors(t)
    need = set()
    for nid in anc:
        node = graph[nid]
        if node.op in NONLINEAR:
            need.update(node.parents)
    return [nid for nid in graph.order if nid in need]


def backward_bounds(
    graph: Graph,
    lower,
    upper,
    target: str | None = None,
    cache: dict | None = None,
    params: RelaxParams | None = None,
    C: np.ndarray | None = None,
    need_lower: bool = True,
    need_upper: bool = True,
) -> AffineBound:
    """Global affine bounds of C @ h_target over each box.

    ``cache`` must hold intervals for every parent of a nonlinear ancestor of
    the target.  ``C`` (q x d_target) defaults to the identity.  Traversal pops a
    node once all of its children inside the target's ancestor set have pushed
    their coefficients into it (out-degree counting).
    """
    params = params or RelaxParams()
    lower, upper = _as_batch(lower, upper)
    B, n = lower.shape
    target = graph.output_id if target is None else target
    cache = {} if cache is None else cache
    d_t = graph[target].dim
    C = np.eye(d_t) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    q = C.shape[0]

    anc = graph.ancestors(target)
    deg = {nid: 0 for nid in anc}
    for nid in anc:
        for p in graph[nid].parents:
            deg[p] += 1

    passes = []
    if need_lower:
        passes.append(True)
    if need_upper:
        passes.append(False)
    slices = graph.input_slices()
    result = {}
    relax_cache: dict[str, object] = {}
    for is_lower in passes:
        A = {target: np.broadcast_to(C, (B, q, d_t)).copy()}
        d = np.zeros((B, q))
        A_in = np.zeros((B, q, n))
        remaining = dict(deg)
        queue = deque([target])
        while queue:
            nid = queue.popleft()
            node = graph[nid]
            Ai = A.pop(nid, None)
            if node.op is Op.INPUT:
                if Ai is not None:
                    A_in[:, :, slices[nid]] += Ai
                continue
            if Ai is not None:
                if node.op is Op.CONSTANT:
                    d += Ai @ np.asarray(node.payload["value"], dtype=float)
                else:
                    rel = relax_cache.get(nid)
                    if rel is None:
                        pre = []
                        for p in node.parents:
                            if graph[p].op is Op.INPUT:
                                s = slices[p]
                                pre.append((lower[:, s], upper[:, s]))
                            elif p in cache:
                                pre.append(cache[p])
                            elif node.op in NONLINEAR:
                                raise MissingBoundsError(f"no preactivation bounds for node {p!r} (parent of {nid!r})")
                            else:
                                pd = graph[p].dim
                                pre.append((np.zeros((B, pd)), np.zeros((B, pd))))
                        rel = relax_node(node, pre, params)
                        relax_cache[nid] = rel
                    lams, bias = rel.backprop(Ai, is_lower)
                    d += bias
                    for p, lam in zip(node.parents, lams):
                        if p in A:
                            A[p] = A[p] + lam
                        else:
                            A[p] = lam
            for p in node.parents:
                remaining[p] -= 1
                if remaining[p] == 0:
                    queue.append(p)
        result[is_lower] = (A_in, d)

    nan_A, nan_b = np.full((B, q, n), np.nan), np.full((B, q), np.nan)
    A_l, b_l = result.get(True, (nan_A, nan_b))
    A_u, b_u = result.get(False, (nan_A, nan_b))
    return AffineBound(A_l, b_l, A_u, b_u, lower, upper)


def compute_preactivations(
    graph: Graph,
    lower,
    upper,
    params: RelaxParams | None = None,
    mode: str = CROWN,
    targets: Sequence[str] | None = None,
) -> dict:
    """Intervals for every node whose bounds some nonlinear node needs.

    IBP mode propagates intervals forward.  CROWN mode bounds each needed node
    by backward propagation on its own sub-graph, in topological order so that
    deeper nodes reuse the intervals of shallower ones; each result is also
    intersected with the IBP interval, which keeps it sound and never looser.
    """
    lower, upper = _as_batch(lower, upper)
    targets = [graph.output_id] if targets is None else list(targets)
    need = _needs_bounds(graph, set(targets))
    interval = ibp(graph, lower, upper)
    if mode == IBP:
        return {k: v for k, v in interval.items() if k in need or graph[k].op is Op.CONSTANT}
    if mode != CROWN:
        raise ValueError(f"unknown bounding mode {mode!r}")
    cache: dict = {}
    for nid in need:
        node = graph[nid]
        if node.op is Op.INPUT:
            continue
        if node.op is Op.CONSTANT:
            cache[nid] = interval[nid]
            continue
        bound = backward_bounds(graph, lower, upper, target=nid, cache=cache, params=params)
        lo = concretize_lower(bound.A_l, bound.b_l, lower, upper)
        hi = concretize_upper(bound.A_u, bound.b_u, lower, upper)
        ilo, ihi = interval[nid]
        cache[nid] = (np.maximum(lo, ilo), np.minimum(hi, ihi))
    return cache


def output_bounds(
    graph: Graph,
    lower,
    upper,
    params: RelaxParams | None = None,
    mode: str = CROWN,
    C: np.ndarray | None = None,
) -> tuple[ScalarBounds, AffineBound | None]:
    """Concrete bounds of C @ F over each box plus the affine relaxation (None in IBP mode).

    Inputs without a batch axis give results without one.
    """
    single = np.asarray(lower).ndim == 1
    lower, upper = _as_batch(lower, upper)
    if mode == IBP:
        iv = ibp(graph, lower, upper)
        lo, hi = iv[graph.output_id]
        if C is not None:
            C = np.atleast_2d(np.asarray(C, dtype=float))
            pos, neg = np.maximum(C, 0), np.minimum(C, 0)
            lo, hi = lo @ pos.T + hi @ neg.T, hi @ pos.T + lo @ neg.T
        sb = ScalarBounds(lo, hi)
        return (sb[0] if single else sb), None
    cache = compute_preactivations(graph, lower, upper, params, mode)
    bound = backward_bounds(graph, lower, upper, cache=cache, params=params, C=C)
    sb = concretize(bound)
    # the concrete interval is also clipped to the interval-arithmetic one, so
    # it is never looser; the affine relaxation itself is left untouched
    ib, _ = output_bounds(graph, lower, upper, mode=IBP, C=C)
    sb = ScalarBounds(np.maximum(sb.lower, ib.lower), np.minimum(sb.upper, ib.upper))
    if single:
        return sb[0], bound[0]
    return sb, bound


def bounds_on_box(graph: Graph, box: Box, params=None, mode: str = CROWN, C=None):
    return output_bounds(graph, box.lower, box.upper, params, mode, C)
