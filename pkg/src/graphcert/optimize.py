"""Certified global minimization of a linear functional of the graph output over a box."""

from __future__ import annotations

import heapq
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .bab import NAIVE, SMART, STALL_TOL, _bisect, _Pool, bound_clauses, split_dim
from .boundprop import CROWN, IBP, backward_bounds, compute_preactivations, concretize_lower, ibp
from .falsify import PGDConfig, pgd_minimize_batch
from .graph import Box, Graph
from .relax import RelaxParams
from .spec import Clause, SpecCNF, atom

OPTIMAL = "optimal-within-gap"
EXHAUSTED = "budget-exhausted"
INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class OptConfig:
    gap_tol: float = 1e-3
    timeout: float = 360.0
    max_domains: int = 200_000
    batch: int = 32
    branching: str = SMART
    pgd: PGDConfig = field(default_factory=lambda: PGDConfig(restarts=2, steps=50, batch=32))
    sub_pgd: PGDConfig = field(default_factory=lambda: PGDConfig(restarts=1, steps=20, batch=4))
    min_width: float = 1e-9
    mode: str = CROWN
    workers: int = 1

    def __post_init__(self):
        if not self.gap_tol >= 0:
            raise ValueError("gap_tol must be non-negative")
        if not (self.timeout > 0 and self.max_domains > 0 and self.batch > 0 and self.workers > 0):
            raise ValueError("OptConfig budgets must be positive")
        if self.branching not in (NAIVE, SMART):
            raise ValueError(f"unknown branching strategy {self.branching!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptResult:
    """``certified_bound`` is a certified lower bound for minimization and an upper bound for maximization."""

    x_best: np.ndarray | None
    primal_value: float
    certified_bound: float
    gap: float
    status: str
    stats: dict
    trace: list = field(default_factory=list)
    sense: str = "min"

    @property
    def certified_lower(self) -> float:
        if self.sense != "min":
            raise AttributeError("a maximization result carries a certified upper bound")
        return self.certified_bound

    @property
    def certified_upper(self) -> float:
        if self.sense != "max":
            raise AttributeError("a minimization result carries a certified lower bound")
        return self.certified_bound

    def to_dict(self) -> dict:
        return {
            "sense": self.sense,
            "status": self.status,
            "x_best": None if self.x_best is None else np.asarray(self.x_best).tolist(),
            "primal_value": _num(self.primal_value),
            "certified_bound": _num(self.certified_bound),
            "gap": _num(self.gap),
            "stats": self.stats,
        }


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else str(v)


def _objective_bounds(graph, row, lowers, uppers, params, mode):
    """Lower bound of rowᵀF on each box and the matching input coefficients."""
    C = row[None, :]
    lo_i, hi_i = ibp(graph, lowers, uppers)[graph.output_id]
    ibp_lb = lo_i @ np.maximum(C, 0).T + hi_i @ np.minimum(C, 0).T
    if mode == IBP:
        return ibp_lb[:, 0], np.zeros_like(lowers)
    cache = compute_preactivations(graph, lowers, uppers, params, mode)
    bound = backward_bounds(graph, lowers, uppers, cache=cache, params=params, C=C, need_upper=False)
    lb = np.maximum(concretize_lower(bound.A_l, bound.b_l, lowers, uppers), ibp_lb)
    return lb[:, 0], bound.A_l[:, 0]


def _negated_atoms(constraints: SpecCNF) -> tuple[SpecCNF, list[np.ndarray]]:
    """One single-atom clause per constraint atom, negated, plus the clause -> rows map."""
    clauses, groups, k = [], [], 0
    for c in constraints.clauses:
        rows = []
        for a in c.atoms:
            clauses.append(Clause((atom(np.negative(a.coeffs), -a.bias),)))
            rows.append(k)
            k += 1
        groups.append(np.array(rows))
    return SpecCNF(tuple(clauses), constraints.input_box), groups


def _infeasible(graph, neg: SpecCNF, groups, lowers, uppers, params, mode) -> np.ndarray:
    """True where some constraint clause is certified false on the whole box."""
    lb = bound_clauses(graph, neg, lowers, uppers, params, mode).lower
    out = np.zeros(lowers.shape[0], dtype=bool)
    for rows in groups:
        # every atom of the clause is <= 0 everywhere, so the strict clause fails
        out |= (lb[:, rows] >= 0).all(axis=1)
    return out


def minimize(
    graph: Graph,
    objective_row,
    box: Box,
    constraints: SpecCNF | None = None,
    cfg: OptConfig | None = None,
    params: RelaxParams | None = None,
) -> OptResult:
    """Best-first branch and bound with incumbent pruning.

    The certified lower bound is the minimum bound over live boxes; a child
    inherits max(own bound, parent bound), so it never decreases.
    """
    cfg = cfg or OptConfig()
    row = np.asarray(objective_row, dtype=float).reshape(-1)
    if row.shape[0] != graph.output_dim:
        raise ValueError(f"objective row has {row.shape[0]} entries, graph output dim is {graph.output_dim}")
    if box.dim != graph.input_dim:
        raise ValueError(f"box dim {box.dim} does not match graph input dim {graph.input_dim}")
    if constraints is not None and constraints.output_dim != graph.output_dim:
        raise ValueError("constraint spec output dim does not match the graph")
    t0 = time.monotonic()
    neg, groups = _negated_atoms(constraints) if constraints is not None else (None, None)

    xs, fs = pgd_minimize_batch(graph, row, box.lower[None], box.upper[None], cfg.pgd, constraints, [None])
    inc_x = None if not np.isfinite(fs[0]) else xs[0].copy()
    inc = float(fs[0])

    pool = _Pool(cfg.workers)
    # heap entries: (bound, id, lower, upper, depth)
    heap: list = [(-np.inf, 0, box.lower.copy(), box.upper.copy(), 0)]
    frozen: list[float] = []
    next_id = 1
    trace: list = []
    stats = {"domains_visited": 0, "pruned_bound": 0, "pruned_infeasible": 0, "max_depth": 0, "iterations": 0}
    status = None
    last_lower = -np.inf
    try:
        while True:
            live = ([heap[0][0]] if heap else []) + frozen
            certified = min(live) if live else (inc if inc_x is not None else np.inf)
            certified = max(certified, last_lower)
            last_lower = certified
            trace.append((certified, inc))
            if not heap and not frozen:
                status = OPTIMAL if inc_x is not None else INFEASIBLE
                break
            if inc_x is not None and inc - certified <= cfg.gap_tol:
                status = OPTIMAL
                break
            if not heap:
                status = EXHAUSTED
                break
            if stats["domains_visited"] >= cfg.max_domains or time.monotonic() - t0 > cfg.timeout:
                status = EXHAUSTED
                break
            take = min(cfg.batch, len(heap), cfg.max_domains - stats["domains_visited"])
            batch = [heapq.heappop(heap) for _ in range(take)]
            stats["domains_visited"] += take
            stats["iterations"] += 1
            L = np.stack([b[2] for b in batch])
            U = np.stack([b[3] for b in batch])
            parent = np.array([b[0] for b in batch])
            ids = [b[1] for b in batch]

            def work(sl):
                lb, A = _objective_bounds(graph, row, L[sl], U[sl], params, cfg.mode)
                bad = (
                    _infeasible(graph, neg, groups, L[sl], U[sl], params, cfg.mode)
                    if neg is not None
                    else np.zeros(L[sl].shape[0], dtype=bool)
                )
                X, f = pgd_minimize_batch(graph, row, L[sl], U[sl], cfg.sub_pgd, constraints, ids[sl])
                return lb, A, bad, X, f

            parts = pool.map_batch(work, take)
            raw = np.concatenate([p[0] for p in parts])
            lb = np.maximum(raw, parent)
            A = np.concatenate([p[1] for p in parts])
            bad = np.concatenate([p[2] for p in parts])
            X = np.concatenate([p[3] for p in parts])
            f = np.concatenate([p[4] for p in parts])

            j = int(np.argmin(f))
            if f[j] < inc:
                inc, inc_x = float(f[j]), X[j].copy()

            for i, (_, _, lo, hi, depth) in enumerate(batch):
                if bad[i]:
                    stats["pruned_infeasible"] += 1
                    continue
                if inc_x is not None and lb[i] > inc:
                    stats["pruned_bound"] += 1
                    continue
                w = hi - lo
                if w.max() <= cfg.min_width:
                    frozen.append(float(lb[i]))
                    continue
                stalled = depth > 0 and not raw[i] > parent[i] + STALL_TOL
                k = split_dim(lo, hi, A[i], NAIVE if stalled else cfg.branching)
                for clo, chi in _bisect(lo, hi, k):
                    heapq.heappush(heap, (float(lb[i]), next_id, clo, chi, depth + 1))
                    next_id += 1
                stats["max_depth"] = max(stats["max_depth"], depth + 1)
            # incumbent improvements can retire boxes already in the heap
            if inc_x is not None:
                keep = [h for h in heap if not h[0] > inc]
                stats["pruned_bound"] += len(heap) - len(keep)
                if len(keep) != len(heap):
                    heap = keep
                    heapq.heapify(heap)
    finally:
        pool.close()

    certified = trace[-1][0]
    if status == INFEASIBLE:
        return OptResult(None, np.inf, np.inf, np.inf, INFEASIBLE, stats, trace)
    gap = max(inc - certified, 0.0) if inc_x is not None else np.inf
    return OptResult(inc_x, inc, certified, gap, status, stats, trace)


def maximize(
    graph: Graph,
    objective_row,
    box: Box,
    constraints: SpecCNF | None = None,
    cfg: OptConfig | None = None,
    params: RelaxParams | None = None,
) -> OptResult:
    res = minimize(graph, -np.asarray(objective_row, dtype=float), box, constraints, cfg, params)
    trace = [(-lo, -p) for lo, p in res.trace]
    return OptResult(res.x_best, -res.primal_value, -res.certified_bound, res.gap, res.status, res.stats, trace, "max")
