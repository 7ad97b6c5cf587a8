"""Gradient graphs and exact point gradients.

`augment_with_jacobian` rewrites a scalar-output graph into one whose output is
``[F(x), dF/dx]``, with every adjoint expressed by ordinary operators, so the
same bounding machinery applies to the gradient.  `point_gradient` is plain
batched reverse mode on numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Graph, GraphBuilder, Op, forward, heaviside


class UnsupportedDerivative(ValueError):
    pass


@dataclass(frozen=True)
class AugmentedGraph:
    graph: Graph
    value_slice: slice
    grad_slice: slice


def _copy_into(builder: GraphBuilder, graph: Graph) -> None:
    for nid in graph.order:
        node = graph[nid]
        if node.op is Op.INPUT:
            builder.input(nid, node.dim)
        else:
            builder.add(node.op, node.parents, id=nid, **dict(node.payload))


def _active(graph: Graph) -> set[str]:
    """Nodes that lie on some input -> output path; only these need adjoints."""
    dep = graph.depends_on_input()
    anc = graph.ancestors(graph.output_id) | {graph.output_id}
    return {nid for nid in anc if dep[nid]}


def augment_with_jacobian(graph: Graph) -> AugmentedGraph:
    if graph.output_dim != 1:
        raise ValueError(f"gradient augmentation needs a scalar output, got dim {graph.output_dim}")
    b = GraphBuilder(f"{graph.name}+grad", prefix="jac/")
    _copy_into(b, graph)
    active = _active(graph)
    adj: dict[str, list[str]] = {nid: [] for nid in active}

    def push(nid: str, g: str) -> None:
        if nid in active:
            adj[nid].append(g)

    def total(nid: str) -> str:
        parts = adj[nid]
        acc = parts[0]
        for p in parts[1:]:
            acc = b.add_(acc, p)
        return acc

    if graph.output_id in active:
        adj[graph.output_id].append(b.constant([1.0]))
    for nid in reversed(graph.order):
        if nid not in active or not adj[nid]:
            continue
        node = graph[nid]
        op = node.op
        if op is Op.INPUT:
            continue
        g = total(nid)
        ps = node.parents
        if op is Op.AFFINE:
            W = np.asarray(node.payload["W"], dtype=float)
            push(ps[0], b.affine(g, W.T))
        elif op is Op.ADD:
            push(ps[0], g)
            push(ps[1], g)
        elif op is Op.SUB:
            push(ps[0], g)
            if ps[1] in active:
                push(ps[1], b.neg(g))
        elif op is Op.NEG:
            push(ps[0], b.neg(g))
        elif op is Op.SCALE:
            push(ps[0], b.scale(g, node.payload["k"]))
        elif op is Op.MUL:
            a, c = ps
            if a in active:
                push(a, b.mul(g, c))
            if c in active:
                push(c, b.mul(g, a))
        elif op is Op.SQUARE:
            push(ps[0], b.mul(g, b.scale(ps[0], 2.0)))
        elif op is Op.RELU:
            push(ps[0], b.mul(g, b.unary(Op.HEAVISIDE, ps[0])))
        elif op is Op.TANH:
            d = b.affine(b.unary(Op.SQUARE, nid), -np.eye(node.dim), np.ones(node.dim))
            push(ps[0], b.mul(g, d))
        elif op is Op.SIGMOID:
            d = b.sub(nid, b.unary(Op.SQUARE, nid))
            push(ps[0], b.mul(g, d))
        elif op is Op.SIN:
            push(ps[0], b.mul(g, b.unary(Op.COS, ps[0])))
        elif op is Op.COS:
            push(ps[0], b.mul(g, b.neg(b.unary(Op.SIN, ps[0]))))
        elif op is Op.CONCAT:
            off = 0
            for p in ps:
                d = graph[p].dim
                if p in active:
                    push(p, b.slice(g, off, off + d))
                off += d
        elif op is Op.SLICE:
            d = graph[ps[0]].dim
            lo, hi = int(node.payload["lo"]), int(node.payload["hi"])
            E = np.zeros((d, hi - lo))
            E[lo:hi] = np.eye(hi - lo)
            push(ps[0], b.affine(g, E))
        elif op is Op.SUM:
            push(ps[0], b.affine(g, np.ones((graph[ps[0]].dim, 1))))
        else:
            raise UnsupportedDerivative(f"no derivative rule for operator {op.value!r} (node {nid!r})")

    grads = []
    for i in graph.input_ids:
        if i in active and adj[i]:
            grads.append(total(i))
        else:
            grads.append(b.constant(np.zeros(graph[i].dim)))
    n = graph.input_dim
    out = b.add(Op.CONCAT, [graph.output_id, *grads], id="jac/output")
    return AugmentedGraph(b.build(out), slice(0, 1), slice(1, 1 + n))


def _local_grad(op: Op, args: list[np.ndarray], out: np.ndarray, g: np.ndarray, payload: dict) -> list:
    if op is Op.AFFINE:
        return [g @ np.asarray(payload["W"], dtype=float)]
    if op is Op.ADD:
        return [g, g]
    if op is Op.SUB:
        return [g, -g]
    if op is Op.NEG:
        return [-g]
    if op is Op.SCALE:
        return [float(payload["k"]) * g]
    if op is Op.MUL:
        return [g * args[1], g * args[0]]
    if op is Op.SQUARE:
        return [2.0 * args[0] * g]
    if op is Op.RELU:
        return [g * heaviside(args[0])]
    if op is Op.TANH:
        return [g * (1.0 - out * out)]
    if op is Op.SIGMOID:
        return [g * out * (1.0 - out)]
    if op is Op.SIN:
        return [g * np.cos(args[0])]
    if op is Op.COS:
        return [-g * np.sin(args[0])]
    if op is Op.HEAVISIDE:
        return [np.zeros_like(g)]
    if op is Op.CONCAT:
        res, off = [], 0
        for a in args:
            res.append(g[:, off : off + a.shape[1]])
            off += a.shape[1]
        return res
    if op is Op.SLICE:
        full = np.zeros_like(args[0])
        full[:, int(payload["lo"]) : int(payload["hi"])] = g
        return [full]
    if op is Op.SUM:
        return [np.broadcast_to(g, args[0].shape).copy()]
    raise UnsupportedDerivative(f"no derivative rule for operator {op.value!r}")


def point_gradient(graph: Graph, x, cotangent=None) -> np.ndarray:
    """cotangentᵀ dF/dx at x, by reverse mode.

    x is (n,) or (N, n); the cotangent defaults to 1 for scalar outputs and may
    be (q,) or (N, q).  ReLU and Heaviside use the zero derivative at kinks.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    N = X.shape[0]
    vals = forward(graph, X)
    if cotangent is None:
        if graph.output_dim != 1:
            raise ValueError("a cotangent is required for vector-output graphs")
        cotangent = np.ones(1)
    ct = np.broadcast_to(np.asarray(cotangent, dtype=float), (N, graph.output_dim))
    adj: dict[str, np.ndarray] = {graph.output_id: ct.copy()}
    for nid in reversed(graph.order):
        node = graph[nid]
        if nid not in adj or node.op in (Op.INPUT, Op.CONSTANT):
            continue
        args = [vals[p] for p in node.parents]
        for p, gp in zip(node.parents, _local_grad(node.op, args, vals[nid], adj[nid], node.payload)):
            adj[p] = adj[p] + gp if p in adj else np.array(gp, dtype=float)
    grads = [adj.get(i, np.zeros((N, graph[i].dim))) for i in graph.input_ids]
    G = np.concatenate(grads, axis=1)
    return G[0] if single else G

