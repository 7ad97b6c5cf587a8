"""Computation graphs over flat vectors: data model, validation, evaluation, file I/O.

A graph is a DAG of typed operator nodes.  Every node emits a flat vector; the
graph has one output node and one or more input nodes whose vectors are
concatenated, in declaration order, into the single input vector seen by the
bounding and search code.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

FORMAT_VERSION = 1


class Op(str, enum.Enum):
    INPUT = "input"
    CONSTANT = "constant"
    AFFINE = "affine"
    ADD = "add"
    SUB = "sub"
    NEG = "neg"
    MUL = "mul"
    SCALE = "scale"
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    SIN = "sin"
    COS = "cos"
    SQUARE = "square"
    CONCAT = "concat"
    SLICE = "slice"
    SUM = "sum"
    # derivative of ReLU; introduced by jacobian augmentation
    HEAVISIDE = "heaviside"


# number of parents; None means variadic (at least one)
ARITY: dict[Op, int | None] = {
    Op.INPUT: 0,
    Op.CONSTANT: 0,
    Op.AFFINE: 1,
    Op.ADD: 2,
    Op.SUB: 2,
    Op.NEG: 1,
    Op.MUL: 2,
    Op.SCALE: 1,
    Op.RELU: 1,
    Op.TANH: 1,
    Op.SIGMOID: 1,
    Op.SIN: 1,
    Op.COS: 1,
    Op.SQUARE: 1,
    Op.CONCAT: None,
    Op.SLICE: 1,
    Op.SUM: 1,
    Op.HEAVISIDE: 1,
}

ELEMENTWISE = frozenset(
    {Op.RELU, Op.TANH, Op.SIGMOID, Op.SIN, Op.COS, Op.SQUARE, Op.HEAVISIDE}
)
NONLINEAR = ELEMENTWISE | {Op.MUL}


class GraphError(ValueError):
    """Raised when a graph is used before it validates."""


class GraphFormatError(ValueError):
    """Raised when a graph file cannot be parsed."""


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return float(_sigmoid(x.reshape(1))[0])
    return _sigmoid(x)


def heaviside(x):
    return (np.asarray(x) > 0).astype(float)


UNARY_FN = {
    Op.RELU: lambda v: np.maximum(v, 0.0),
    Op.TANH: np.tanh,
    Op.SIGMOID: sigmoid,
    Op.SIN: np.sin,
    Op.COS: np.cos,
    Op.SQUARE: np.square,
    Op.HEAVISIDE: heaviside,
    Op.NEG: np.negative,
}


@dataclass(frozen=True, eq=False)
class Node:
    id: str
    op: Op
    parents: tuple[str, ...] = ()
    dim: int = 1
    payload: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "op", Op(self.op))
        object.__setattr__(self, "parents", tuple(self.parents))


@dataclass
class ValidationReport:
    ok: bool
    order: list[str]
    violations: list[str]

    def __bool__(self):
        return self.ok


@dataclass(frozen=True)
class Box:
    """Axis-aligned box over the concatenated input vector."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError(f"box bounds must be flat vectors of equal length, got {lo.shape} and {hi.shape}")
        if np.any(~(lo <= hi)):
            raise ValueError("box lower bound exceeds upper bound")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol))

    def volume(self) -> float:
        w = self.width
        return float(np.prod(w[w > 0])) if np.any(w > 0) else 0.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lower + rng.random((n, self.dim)) * self.width

    @classmethod
    def product(cls, *boxes: "Box") -> "Box":
        return cls(np.concatenate([b.lower for b in boxes]), np.concatenate([b.upper for b in boxes]))

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


def infer_dim(op: Op, payload: dict, parent_dims: Sequence[int]) -> int:
    """Output dimension implied by the operator, its payload and its parents."""
    if op is Op.INPUT:
        return int(payload["dim"])
    if op is Op.CONSTANT:
        return int(np.asarray(payload["value"]).reshape(-1).shape[0])
    if op is Op.AFFINE:
        W = np.asarray(payload["W"])
        if W.ndim != 2 or W.shape[1] != parent_dims[0]:
            raise ValueError(f"affine weight shape {W.shape} does not accept parent dim {parent_dims[0]}")
        b = payload.get("b")
        if b is not None and np.asarray(b).reshape(-1).shape[0] != W.shape[0]:
            raise ValueError("affine bias length does not match weight rows")
        return W.shape[0]
    if op in (Op.ADD, Op.SUB, Op.MUL):
        if parent_dims[0] != parent_dims[1]:
            raise ValueError(f"{op.value} needs equal parent dims, got {parent_dims}")
        return parent_dims[0]
    if op is Op.CONCAT:
        return int(sum(parent_dims))
    if op is Op.SLICE:
        lo, hi = int(payload["lo"]), int(payload["hi"])
        if not 0 <= lo < hi <= parent_dims[0]:
            raise ValueError(f"slice [{lo}, {hi}) out of range for dim {parent_dims[0]}")
        return hi - lo
    if op is Op.SUM:
        return 1
    return parent_dims[0]


class Graph:
    """Immutable DAG of operator nodes with a single output."""

    def __init__(self, nodes: Sequence[Node], input_ids: Sequence[str], output_id: str, name: str = "graph"):
        self.nodes: tuple[Node, ...] = tuple(nodes)
        self.input_ids: tuple[str, ...] = tuple(input_ids)
        self.output_id = output_id
        self.name = name
        self._by_id = {n.id: n for n in self.nodes}
        self._report: ValidationReport | None = None

    def __getitem__(self, node_id: str) -> Node:
        return self._by_id[node_id]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._by_id

    def __len__(self):
        return len(self.nodes)

    @property
    def order(self) -> list[str]:
        """Cached topological order; raises GraphError on invalid graphs."""
        if self._report is None:
            self._report = validate(self)
        if not self._report.ok:
            raise GraphError(f"graph {self.name!r} is invalid: " + "; ".join(self._report.violations))
        return self._report.order

    @property
    def input_dims(self) -> list[int]:
        return [self[i].dim for i in self.input_ids]

    @property
    def input_dim(self) -> int:
        return int(sum(self.input_dims))

    @property
    def output_dim(self) -> int:
        return self[self.output_id].dim

    def input_slices(self) -> dict[str, slice]:
        out, k = {}, 0
        for i in self.input_ids:
            d = self[i].dim
            out[i] = slice(k, k + d)
            k += d
        return out

    def children(self) -> dict[str, list[str]]:
        ch: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for p in n.parents:
                if p in ch:
                    ch[p].append(n.id)
        return ch

    def ancestors(self, node_id: str) -> set[str]:
        seen = {node_id}
        stack = [node_id]
        while stack:
            for p in self[stack.pop()].parents:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen

    def depends_on_input(self) -> dict[str, bool]:
        dep: dict[str, bool] = {}
        for nid in self.order:
            n = self[nid]
            dep[nid] = n.op is Op.INPUT or any(dep[p] for p in n.parents)
        return dep


def validate(graph: Graph) -> ValidationReport:
    violations: list[str] = []
    ids = [n.id for n in graph.nodes]
    seen: set[str] = set()
    for nid in ids:
        if nid in seen:
            violations.append(f"duplicate node id {nid!r}")
        seen.add(nid)
    by_id = {n.id: n for n in graph.nodes}

    for n in graph.nodes:
        arity = ARITY[n.op]
        if arity is None:
            if len(n.parents) < 1:
                violations.append(f"node {n.id!r}: {n.op.value} needs at least one parent")
        elif len(n.parents) != arity:
            violations.append(f"node {n.id!r}: {n.op.value} needs {arity} parent(s), got {len(n.parents)}")
        for p in n.parents:
            if p == n.id:
                violations.append(f"node {n.id!r}: cycle (self-loop)")
            elif p not in by_id:
                violations.append(f"node {n.id!r}: dangling parent {p!r}")

    for i in graph.input_ids:
        if i not in by_id or by_id[i].op is not Op.INPUT:
            violations.append(f"declared input {i!r} is not an input node")
    for n in graph.nodes:
        if n.op is Op.INPUT and n.id not in graph.input_ids:
            violations.append(f"input node {n.id!r} is not declared in inputs")
    if graph.output_id not in by_id:
        violations.append(f"output {graph.output_id!r} is not a node")
    if not graph.input_ids:
        violations.append("graph declares no inputs")

    # Kahn's algorithm over well-formed edges
    indeg = {nid: 0 for nid in by_id}
    kids: dict[str, list[str]] = {nid: [] for nid in by_id}
    for n in graph.nodes:
        for p in n.parents:
            if p in by_id and p != n.id:
                indeg[n.id] += 1
                kids[p].append(n.id)
    queue = [nid for nid in ids if indeg.get(nid) == 0]
    order: list[str] = []
    while queue:
        nid = queue.pop(0)
        order.append(nid)
        for c in kids[nid]:
            indeg[c] -= 1
            if indeg[c] == 0:
                queue.append(c)
    if len(order) != len(by_id):
        stuck = sorted(set(by_id) - set(order))
        violations.append(f"cycle through nodes {stuck}")

    if not violations:
        for nid in order:
            n = by_id[nid]
            try:
                d = infer_dim(n.op, {**n.payload, "dim": n.dim}, [by_id[p].dim for p in n.parents])
            except (ValueError, KeyError, IndexError) as exc:
                violations.append(f"node {nid!r}: {exc}")
                continue
            if d != n.dim:
                violations.append(f"node {nid!r}: declared dim {n.dim} but shape inference gives {d}")
    return ValidationReport(ok=not violations, order=order if not violations else [], violations=violations)


def _split_inputs(graph: Graph, x) -> tuple[dict[str, np.ndarray], bool]:
    if isinstance(x, dict):
        vals = {k: np.asarray(v, dtype=float) for k, v in x.items()}
        single = next(iter(vals.values())).ndim == 1
        return {k: np.atleast_2d(v) for k, v in vals.items()}, single
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != graph.input_dim:
        raise ValueError(f"input has {X.shape[1]} coordinates, graph expects {graph.input_dim}")
    return {i: X[:, s] for i, s in graph.input_slices().items()}, single


def apply_op(node: Node, args: list[np.ndarray]) -> np.ndarray:
    """Apply one node's primitive map to batched parent values (each N x d)."""
    op, pl = node.op, node.payload
    if op is Op.AFFINE:
        out = args[0] @ np.asarray(pl["W"]).T
        if pl.get("b") is not None:
            out = out + np.asarray(pl["b"])
        return out
    if op is Op.ADD:
        return args[0] + args[1]
    if op is Op.SUB:
        return args[0] - args[1]
    if op is Op.MUL:
        return args[0] * args[1]
    if op is Op.SCALE:
        return float(pl["k"]) * args[0]
    if op is Op.CONCAT:
        return np.concatenate(args, axis=1)
    if op is Op.SLICE:
        return args[0][:, int(pl["lo"]) : int(pl["hi"])]
    if op is Op.SUM:
        return args[0].sum(axis=1, keepdims=True)
    return UNARY_FN[op](args[0])


def forward(graph: Graph, x) -> dict[str, np.ndarray]:
    """Batched forward pass returning every node's value (N x d_i)."""
    inputs, _ = _split_inputs(graph, x)
    n = next(iter(inputs.values())).shape[0]
    vals: dict[str, np.ndarray] = {}
    for nid in graph.order:
        node = graph[nid]
        if node.op is Op.INPUT:
            vals[nid] = inputs[nid]
        elif node.op is Op.CONSTANT:
            vals[nid] = np.broadcast_to(np.asarray(node.payload["value"], dtype=float).reshape(1, -1), (n, node.dim))
        else:
            vals[nid] = apply_op(node, [vals[p] for p in node.parents])
    return vals


def evaluate(graph: Graph, x) -> np.ndarray:
    """Exact value of the output node at a point (n,) or a batch (N, n)."""
    _, single = _split_inputs(graph, x)
    out = np.array(forward(graph, x)[graph.output_id], dtype=float)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# building


class GraphBuilder:
    """Incremental construction helper; ids are auto-generated unless given."""

    def __init__(self, name: str = "graph", prefix: str = ""):
        self.name = name
        self.prefix = prefix
        self.nodes: list[Node] = []
        self.inputs: list[str] = []
        self._dims: dict[str, int] = {}
        self._count = 0

    def _id(self, hint: str) -> str:
        self._count += 1
        return f"{self.prefix}{hint}{self._count}"

    def dim(self, nid: str) -> int:
        return self._dims[nid]

    def add(self, op: Op | str, parents: Sequence[str] = (), id: str | None = None, **payload) -> str:
        op = Op(op)
        nid = id or self._id(op.value)
        if nid in self._dims:
            raise ValueError(f"duplicate node id {nid!r}")
        if "W" in payload:
            payload["W"] = np.atleast_2d(np.asarray(payload["W"], dtype=float))
        if payload.get("b") is not None:
            payload["b"] = np.asarray(payload["b"], dtype=float).reshape(-1)
        if "value" in payload:
            payload["value"] = np.asarray(payload["value"], dtype=float).reshape(-1)
        d = infer_dim(op, payload, [self._dims[p] for p in parents])
        payload.pop("dim", None)
        self.nodes.append(Node(nid, op, tuple(parents), d, payload))
        self._dims[nid] = d
        return nid

    def input(self, id: str, dim: int) -> str:
        self.add(Op.INPUT, (), id=id, dim=dim)
        self.inputs.append(id)
        return id

    def constant(self, value, id: str | None = None) -> str:
        return self.add(Op.CONSTANT, (), id=id, value=value)

    def affine(self, x: str, W, b=None, id: str | None = None) -> str:
        W = np.atleast_2d(np.asarray(W, dtype=float))
        b = np.zeros(W.shape[0]) if b is None else b
        return self.add(Op.AFFINE, (x,), id=id, W=W, b=b)

    def add_(self, a: str, b: str, id: str | None = None) -> str:
        return self.add(Op.ADD, (a, b), id=id)

    def sub(self, a: str, b: str, id: str | None = None) -> str:
        return self.add(Op.SUB, (a, b), id=id)

    def neg(self, a: str, id: str | None = None) -> str:
        return self.add(Op.NEG, (a,), id=id)

    def mul(self, a: str, b: str, id: str | None = None) -> str:
        return self.add(Op.MUL, (a, b), id=id)

    def scale(self, a: str, k: float, id: str | None = None) -> str:
        return self.add(Op.SCALE, (a,), id=id, k=float(k))

    def unary(self, op: Op | str, a: str, id: str | None = None) -> str:
        return self.add(op, (a,), id=id)

    def concat(self, parts: Sequence[str], id: str | None = None) -> str:
        parts = list(parts)
        if len(parts) == 1 and id is None:
            return parts[0]
        return self.add(Op.CONCAT, parts, id=id)

    def slice(self, a: str, lo: int, hi: int, id: str | None = None) -> str:
        return self.add(Op.SLICE, (a,), id=id, lo=int(lo), hi=int(hi))

    def sum(self, a: str, id: str | None = None) -> str:
        return self.add(Op.SUM, (a,), id=id)

    def inline(self, fragment: Graph, args: Sequence[str], tag: str | None = None) -> str:
        """Copy `fragment` into this builder, wiring its inputs to `args`; returns its output id."""
        args = list(args)
        if len(args) != len(fragment.input_ids):
            raise ValueError(f"fragment {fragment.name!r} takes {len(fragment.input_ids)} inputs, got {len(args)}")
        for a, i in zip(args, fragment.input_ids):
            if self._dims[a] != fragment[i].dim:
                raise ValueError(
                    f"fragment {fragment.name!r} input {i!r} has dim {fragment[i].dim}, wired node {a!r} has {self._dims[a]}"
                )
        self._count += 1
        tag = f"{self.prefix}{tag or fragment.name}{self._count}/"
        mapping = dict(zip(fragment.input_ids, args))
        for nid in fragment.order:
            node = fragment[nid]
            if node.op is Op.INPUT:
                continue
            new = self.add(node.op, [mapping[p] for p in node.parents], id=tag + nid, **dict(node.payload))
            mapping[nid] = new
        return mapping[fragment.output_id]

    def build(self, output: str, name: str | None = None) -> Graph:
        g = Graph(list(self.nodes), list(self.inputs), output, name or self.name)
        g.order  # noqa: B018 - validate eagerly
        return g


# ---------------------------------------------------------------------------
# file format


def _payload_to_json(node: Node) -> dict:
    pl = node.payload
    out: dict[str, Any] = {}
    if node.op is Op.AFFINE:
        out["W"] = np.asarray(pl["W"]).tolist()
        out["b"] = np.asarray(pl.get("b", np.zeros(node.dim))).tolist()
    elif node.op is Op.CONSTANT:
        out["value"] = np.asarray(pl["value"]).tolist()
    elif node.op is Op.SCALE:
        out["k"] = float(pl["k"])
    elif node.op is Op.SLICE:
        out["lo"], out["hi"] = int(pl["lo"]), int(pl["hi"])
    return out


def graph_to_dict(graph: Graph) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "name": graph.name,
        "inputs": [{"id": i, "dim": graph[i].dim} for i in graph.input_ids],
        "nodes": [
            {"id": n.id, "op": n.op.value, "parents": list(n.parents), **_payload_to_json(n)}
            for n in graph.nodes
            if n.op is not Op.INPUT
        ],
        "output": graph.output_id,
    }


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise GraphFormatError(f"{where}: missing field {key!r}")
    return obj[key]


def _numeric(value, where: str, ndim: int) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise GraphFormatError(f"{where}: not a numeric array ({exc})") from None
    if arr.ndim != ndim:
        raise GraphFormatError(f"{where}: expected a rank-{ndim} array, got rank {arr.ndim}")
    return arr


def graph_from_dict(doc: dict, source: str = "<graph>") -> Graph:
    if not isinstance(doc, dict):
        raise GraphFormatError(f"{source}: top level must be an object")
    version = _require(doc, "format_version", source)
    if version != FORMAT_VERSION:
        raise GraphFormatError(f"{source}: unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    nodes: list[Node] = []
    dims: dict[str, int] = {}
    input_ids = []
    for k, spec in enumerate(_require(doc, "inputs", source)):
        where = f"{source}: inputs[{k}]"
        nid, d = str(_require(spec, "id", where)), _require(spec, "dim", where)
        if not isinstance(d, int) or d < 1:
            raise GraphFormatError(f"{where}: field 'dim' must be a positive integer")
        nodes.append(Node(nid, Op.INPUT, (), d, {}))
        dims[nid] = d
        input_ids.append(nid)
    for k, spec in enumerate(_require(doc, "nodes", source)):
        where = f"{source}: nodes[{k}]"
        nid = str(_require(spec, "id", where))
        tag = _require(spec, "op", where)
        try:
            op = Op(tag)
        except ValueError:
            raise GraphFormatError(f"{where}: unknown operator tag {tag!r}") from None
        if op is Op.INPUT:
            raise GraphFormatError(f"{where}: input nodes belong in the 'inputs' section")
        parents = [str(p) for p in spec.get("parents", [])]
        payload: dict[str, Any] = {}
        if op is Op.AFFINE:
            payload["W"] = _numeric(_require(spec, "W", where), f"{where}.W", 2)
            payload["b"] = _numeric(spec.get("b", [0.0] * payload["W"].shape[0]), f"{where}.b", 1)
        elif op is Op.CONSTANT:
            payload["value"] = _numeric(_require(spec, "value", where), f"{where}.value", 1)
        elif op is Op.SCALE:
            payload["k"] = float(_numeric(_require(spec, "k", where), f"{where}.k", 0))
        elif op is Op.SLICE:
            payload["lo"], payload["hi"] = int(_require(spec, "lo", where)), int(_require(spec, "hi", where))
        pdims = []
        for p in parents:
            if p not in dims:
                raise GraphFormatError(f"{where}: parent {p!r} is undefined or declared later")
            pdims.append(dims[p])
        try:
            d = infer_dim(op, payload, pdims)
        except (ValueError, KeyError, IndexError) as exc:
            raise GraphFormatError(f"{where}: {exc}") from None
        nodes.append(Node(nid, op, tuple(parents), d, payload))
        dims[nid] = d
    g = Graph(nodes, input_ids, str(_require(doc, "output", source)), str(doc.get("name", "graph")))
    report = validate(g)
    if not report.ok:
        raise GraphFormatError(f"{source}: " + "; ".join(report.violations))
    g._report = report
    return g


def dumps_graph(graph: Graph) -> str:
    return json.dumps(graph_to_dict(graph), indent=1) + "\n"


def loads_graph(text: str, source: str = "<graph>") -> Graph:
    if not text.strip():
        raise GraphFormatError(f"{source}: empty document")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return graph_from_dict(doc, source)


def save_graph(graph: Graph, path) -> None:
    Path(path).write_text(dumps_graph(graph))


def load_graph(path) -> Graph:
    path = Path(path)
    return loads_graph(path.read_text(), str(path))
