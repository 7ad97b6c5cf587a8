"""CNF specifications over graph outputs.

A spec is a conjunction of clauses; a clause is a disjunction of strict linear
atoms ``cᵀy + d > 0`` on the graph output y.  The property holds at x when
every clause has positive margin (the max of its atom values) at y = F(x).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import Box, Graph, evaluate

SPEC_FORMAT_VERSION = 1
_SENSES = {">": 1.0, "greater": 1.0, "<": -1.0, "less": -1.0}


class SpecError(ValueError):
    pass


class OutOfBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Atom:
    """coeffsᵀy + bias > 0 (sense "greater") or < 0 (sense "less")."""

    coeffs: tuple
    bias: float
    sense: str = "greater"

    def __post_init__(self):
        c = tuple(float(v) for v in np.asarray(self.coeffs, dtype=float).reshape(-1))
        if not c or not any(v != 0.0 for v in c):
            raise SpecError("atom coefficients are all zero")
        if self.sense not in _SENSES:
            raise SpecError(f"unknown atom sense {self.sense!r}")
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "sense", "greater" if _SENSES[self.sense] > 0 else "less")

    def normalized(self) -> "Atom":
        if self.sense == "greater":
            return self
        return Atom(tuple(-v for v in self.coeffs), -self.bias, "greater")

    def value(self, y) -> np.ndarray:
        s = _SENSES[self.sense]
        return s * (np.asarray(y, dtype=float) @ np.asarray(self.coeffs) + self.bias)

    def holds(self, y) -> np.ndarray:
        return self.value(y) > 0


@dataclass(frozen=True)
class Clause:
    atoms: tuple

    def __post_init__(self):
        if not self.atoms:
            raise SpecError("empty clause")
        seen, out = set(), []
        for a in self.atoms:
            a = a.normalized()
            key = (a.coeffs, a.bias)
            if key not in seen:
                seen.add(key)
                out.append(a)
        dims = {len(a.coeffs) for a in out}
        if len(dims) != 1:
            raise SpecError(f"atoms of one clause disagree on the output dimension: {sorted(dims)}")
        object.__setattr__(self, "atoms", tuple(out))

    @property
    def dim(self) -> int:
        return len(self.atoms[0].coeffs)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([a.coeffs for a in self.atoms])

    @property
    def biases(self) -> np.ndarray:
        return np.array([a.bias for a in self.atoms])


@dataclass(frozen=True)
class SpecCNF:
    clauses: tuple
    input_box: Box
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.clauses:
            raise SpecError("a spec needs at least one clause")
        dims = {c.dim for c in self.clauses}
        if len(dims) != 1:
            raise SpecError(f"clauses disagree on the output dimension: {sorted(dims)}")
        object.__setattr__(self, "clauses", tuple(self.clauses))

    @property
    def output_dim(self) -> int:
        return self.clauses[0].dim

    def check_graph(self, graph: Graph) -> None:
        if graph.output_dim != self.output_dim:
            raise SpecError(
                f"spec atoms have {self.output_dim} coefficients but graph {graph.name!r} has output dim {graph.output_dim}"
            )
        if graph.input_dim != self.input_box.dim:
            raise SpecError(
                f"spec box has dim {self.input_box.dim} but graph {graph.name!r} has input dim {graph.input_dim}"
            )


def atom(coeffs, bias=0.0, sense: str = ">") -> Atom:
    return Atom(tuple(np.asarray(coeffs, dtype=float).reshape(-1)), bias, sense)


def unit(i: int, q: int, scale: float = 1.0) -> np.ndarray:
    e = np.zeros(q)
    e[i] = scale
    return e


def face_atoms(idx: Sequence[int], lower, upper, q: int, inside: bool = True) -> list[Atom]:
    """The 2n face atoms of y[idx] ∈ (lower, upper); with inside=False, of the complement."""
    out = []
    for i, l, u in zip(idx, np.asarray(lower, float).reshape(-1), np.asarray(upper, float).reshape(-1)):
        if inside:
            out.append(atom(unit(i, q), -l))
            out.append(atom(unit(i, q, -1.0), u))
        else:
            out.append(atom(unit(i, q, -1.0), l))
            out.append(atom(unit(i, q), -u))
    return out


def distribute(disjuncts: Sequence[Sequence[Atom]], extra: Sequence[Atom] = ()) -> list[Clause]:
    """CNF of (∧ d_1) ∨ (∧ d_2) ∨ ... ∨ (∨ extra) by distribution."""
    return [Clause(tuple(choice) + tuple(extra)) for choice in itertools.product(*disjuncts)]


def clause_margin(clause: Clause, y) -> np.ndarray:
    """max over atoms of cᵀy + d; positive means the clause holds."""
    y = np.asarray(y, dtype=float)
    return (y @ clause.matrix.T + clause.biases).max(axis=-1)


def spec_margins(spec: SpecCNF, y) -> np.ndarray:
    """Clause margins stacked on the last axis: (..., n_clauses)."""
    return np.stack([clause_margin(c, y) for c in spec.clauses], axis=-1)


@dataclass(frozen=True)
class CheckResult:
    satisfied: bool
    clause_index: int | None
    margins: np.ndarray

    @property
    def violated(self) -> bool:
        return not self.satisfied


def check_point(spec: SpecCNF, graph: Graph, x) -> CheckResult:
    """Exact evaluation of every clause at x; reports the first violated clause."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if not spec.input_box.contains(x):
        raise OutOfBoxError(f"point {x.tolist()} lies outside the spec box")
    y = evaluate(graph, x)
    m = spec_margins(spec, y)
    bad = np.flatnonzero(~(m > 0))
    if bad.size:
        return CheckResult(False, int(bad[0]), m)
    return CheckResult(True, None, m)


# ---------------------------------------------------------------------------
# file format


def _atom_to_dict(a: Atom) -> dict:
    return {"coeffs": list(a.coeffs), "bias": a.bias, "sense": ">"}


def spec_to_dict(spec: SpecCNF) -> dict:
    doc = {
        "format_version": SPEC_FORMAT_VERSION,
        "box": spec.input_box.to_dict(),
        "output_dim": spec.output_dim,
        "clauses": [[_atom_to_dict(a) for a in c.atoms] for c in spec.clauses],
    }
    if spec.meta:
        doc["meta"] = spec.meta
    return doc


def _parse_atom(item: dict, where: str) -> Atom:
    if "coeffs" not in item:
        raise SpecError(f"{where}: atom is missing 'coeffs'")
    try:
        return atom(item["coeffs"], item.get("bias", 0.0), item.get("sense", ">"))
    except SpecError as e:
        raise SpecError(f"{where}: {e}") from None
    except (TypeError, ValueError) as e:
        raise SpecError(f"{where}: bad atom ({e})") from None


def _parse_membership(item: dict, where: str, q: int | None) -> tuple[list[int], np.ndarray, np.ndarray]:
    lo = np.asarray(item.get("lower"), dtype=float).reshape(-1)
    hi = np.asarray(item.get("upper"), dtype=float).reshape(-1)
    idx = item.get("outputs", list(range(len(lo))))
    if not (len(lo) == len(hi) == len(idx)):
        raise SpecError(f"{where}: membership lower/upper/outputs lengths differ")
    if q is None:
        raise SpecError(f"{where}: membership needs 'output_dim' in the spec document")
    if any(i < 0 or i >= q for i in idx):
        raise SpecError(f"{where}: membership output index out of range for output dim {q}")
    return list(idx), lo, hi


def spec_from_dict(doc: dict, source: str = "<spec>") -> SpecCNF:
    if not isinstance(doc, dict):
        raise SpecError(f"{source}: spec document must be an object")
    if doc.get("format_version") != SPEC_FORMAT_VERSION:
        raise SpecError(f"{source}: unsupported format_version {doc.get('format_version')!r}")
    try:
        box = Box(doc["box"]["lower"], doc["box"]["upper"])
    except KeyError as e:
        raise SpecError(f"{source}: box is missing {e}") from None
    except (TypeError, ValueError) as e:
        raise SpecError(f"{source}: bad box ({e})") from None
    q = doc.get("output_dim")
    raw = doc.get("clauses")
    if not isinstance(raw, list) or not raw:
        raise SpecError(f"{source}: 'clauses' must be a nonempty list")
    clauses: list[Clause] = []
    for ci, items in enumerate(raw):
        where = f"{source}: clause {ci}"
        if not isinstance(items, list) or not items:
            raise SpecError(f"{where}: must be a nonempty list")
        atoms: list[Atom] = []
        members: list[list[Atom]] = []
        for ai, item in enumerate(items):
            w = f"{where}, item {ai}"
            if not isinstance(item, dict):
                raise SpecError(f"{w}: must be an object")
            if "member" in item:
                idx, lo, hi = _parse_membership(item["member"], w, q)
                members.append(face_atoms(idx, lo, hi, q))
            elif "outside" in item:
                idx, lo, hi = _parse_membership(item["outside"], w, q)
                atoms.extend(face_atoms(idx, lo, hi, q, inside=False))
            else:
                atoms.append(_parse_atom(item, w))
        try:
            clauses.extend(distribute(members, atoms) if members else [Clause(tuple(atoms))])
        except SpecError as e:
            raise SpecError(f"{where}: {e}") from None
    try:
        return SpecCNF(tuple(clauses), box, dict(doc.get("meta", {})))
    except SpecError as e:
        raise SpecError(f"{source}: {e}") from None


def dumps_spec(spec: SpecCNF) -> str:
    return json.dumps(spec_to_dict(spec), indent=1)


def loads_spec(text: str, source: str = "<spec>", graph: Graph | None = None) -> SpecCNF:
    if not text.strip():
        raise SpecError(f"{source}: empty document")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SpecError(f"{source}: line {e.lineno} column {e.colno}: {e.msg}") from None
    spec = spec_from_dict(doc, source)
    if graph is not None:
        spec.check_graph(graph)
    return spec


def save_spec(spec: SpecCNF, path) -> None:
    Path(path).write_text(dumps_spec(spec) + "\n")


def parse_spec(path, graph: Graph | None = None) -> SpecCNF:
    path = Path(path)
    return loads_spec(path.read_text(), str(path), graph)


__all__ = [
    "Atom",
    "Clause",
    "SpecCNF",
    "SpecError",
    "OutOfBoxError",
    "CheckResult",
    "atom",
    "face_atoms",
    "distribute",
    "clause_margin",
    "spec_margins",
    "check_point",
    "parse_spec",
    "loads_spec",
    "dumps_spec",
    "save_spec",
    "spec_to_dict",
    "spec_from_dict",
]
