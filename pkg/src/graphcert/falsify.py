"""Projected gradient search for counterexamples and for good primal points."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Box, Graph, evaluate
from .jacobian import point_gradient
from .spec import SpecCNF, check_point, spec_margins

DECAY = 0.98


@dataclass(frozen=True)
class PGDConfig:
    restarts: int = 5
    steps: int = 100
    step_size: float = 0.1  # fraction of the box width per coordinate
    batch: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("restarts", "steps", "batch"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"PGDConfig.{name} must be positive")
        if not self.step_size > 0:
            raise ValueError("PGDConfig.step_size must be positive")


@dataclass(frozen=True)
class Counterexample:
    x: np.ndarray
    clause_index: int
    margin: float

    def to_dict(self) -> dict:
        return {"x": np.asarray(self.x).tolist(), "clause_index": int(self.clause_index), "margin": float(self.margin)}


def make_rng(seed: int, domain_id: int | None = None) -> np.random.Generator:
    # per-domain streams keep results independent of how domains are batched
    return np.random.default_rng(seed if domain_id is None else [seed, domain_id])


def _worst_clause_cotangent(spec: SpecCNF, Y: np.ndarray):
    """Per candidate: clause margins, the worst clause, and d(worst margin)/dy."""
    M = spec_margins(spec, Y)
    worst = M.argmin(axis=1)
    ct = np.zeros_like(Y)
    for c, clause in enumerate(spec.clauses):
        rows = np.flatnonzero(worst == c)
        if rows.size == 0:
            continue
        vals = Y[rows] @ clause.matrix.T + clause.biases
        ct[rows] = clause.matrix[vals.argmax(axis=1)]
    return M, ct


def _first_violation(spec: SpecCNF, graph: Graph, X: np.ndarray, M: np.ndarray) -> Counterexample | None:
    bad = ~(M > 0)
    if not bad.any():
        return None
    # smallest (clause index, candidate index) first
    for c in range(M.shape[1]):
        for i in np.flatnonzero(bad[:, c]):
            res = check_point(spec, graph, X[i])
            if res.violated:
                k = res.clause_index
                return Counterexample(X[i].copy(), k, float(res.margins[k]))
    return None


def pgd_batch(
    graph: Graph,
    spec: SpecCNF,
    lowers: np.ndarray,
    uppers: np.ndarray,
    cfg: PGDConfig,
    domain_ids=None,
) -> list[Counterexample | None]:
    """Run the search independently in each of D boxes at once (one stacked candidate array).

    Returns one entry per box; each box draws from its own seeded stream so the
    outcome for a box does not depend on which other boxes share the batch.
    """
    lowers = np.atleast_2d(np.asarray(lowers, dtype=float))
    uppers = np.atleast_2d(np.asarray(uppers, dtype=float))
    D, n = lowers.shape
    ids = [None] * D if domain_ids is None else list(domain_ids)
    rngs = [make_rng(cfg.seed, i) for i in ids]
    lo = np.repeat(lowers, cfg.batch, axis=0)
    hi = np.repeat(uppers, cfg.batch, axis=0)
    w = hi - lo
    owner = np.repeat(np.arange(D), cfg.batch)
    found: list[Counterexample | None] = [None] * D
    live = np.ones(D, dtype=bool)
    for _ in range(cfg.restarts):
        X = np.clip(lo + np.concatenate([r.random((cfg.batch, n)) for r in rngs]) * w, lo, hi)
        step = cfg.step_size
        for t in range(cfg.steps + 1):
            rows = np.flatnonzero(live[owner])
            if rows.size == 0:
                return found
            Y = evaluate(graph, X[rows])
            M, ct = _worst_clause_cotangent(spec, Y)
            hit = ~(M > 0).all(axis=1)
            if hit.any():
                for d in np.unique(owner[rows[hit]]):
                    sel = owner[rows] == d
                    cex = _first_violation(spec, graph, X[rows[sel]], M[sel])
                    if cex is not None:
                        found[d] = cex
                        live[d] = False
            if t == cfg.steps:
                break
            G = point_gradient(graph, X[rows], ct)
            X[rows] = np.clip(X[rows] - step * w[rows] * np.sign(G), lo[rows], hi[rows])
            step *= DECAY
    return found


def pgd_search(
    graph: Graph,
    spec: SpecCNF,
    box: Box | None = None,
    cfg: PGDConfig | None = None,
    domain_id: int | None = None,
) -> Counterexample | None:
    """Sign-gradient descent on the worst clause margin, projected onto the box.

    Every candidate is checked by exact evaluation after each step; only
    confirmed violations are returned.
    """
    cfg = cfg or PGDConfig()
    box = spec.input_box if box is None else box
    return pgd_batch(graph, spec, box.lower[None], box.upper[None], cfg, [domain_id])[0]


def pgd_minimize_batch(
    graph: Graph,
    row,
    lowers: np.ndarray,
    uppers: np.ndarray,
    cfg: PGDConfig,
    constraints: SpecCNF | None = None,
    domain_ids=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per box, the best feasible point found for min rowᵀF(x) and its value.

    Returns (X_best (D, n), f_best (D,)); boxes without a feasible candidate
    get f = inf and a NaN point.  The box centre is always a candidate.
    """
    lowers = np.atleast_2d(np.asarray(lowers, dtype=float))
    uppers = np.atleast_2d(np.asarray(uppers, dtype=float))
    row = np.asarray(row, dtype=float).reshape(-1)
    D, n = lowers.shape
    ids = [None] * D if domain_ids is None else list(domain_ids)
    rngs = [make_rng(cfg.seed, i) for i in ids]
    lo = np.repeat(lowers, cfg.batch, axis=0)
    hi = np.repeat(uppers, cfg.batch, axis=0)
    w = hi - lo
    best_x = np.full((D, n), np.nan)
    best = np.full(D, np.inf)
    first = np.arange(D) * cfg.batch

    def consider(X):
        Y = evaluate(graph, X)
        f = Y @ row
        if constraints is not None:
            f = np.where((spec_margins(constraints, Y) > 0).all(axis=1), f, np.inf)
        f = f.reshape(D, cfg.batch)
        i = f.argmin(axis=1)
        fi = f[np.arange(D), i]
        better = fi < best
        best[better] = fi[better]
        best_x[better] = X[(first + i)[better]]

    for r in range(cfg.restarts):
        X = np.clip(lo + np.concatenate([g.random((cfg.batch, n)) for g in rngs]) * w, lo, hi)
        if r == 0:
            X[first] = 0.5 * (lowers + uppers)
        step = cfg.step_size
        for t in range(cfg.steps + 1):
            consider(X)
            if t == cfg.steps:
                break
            G = point_gradient(graph, X, row)
            X = np.clip(X - step * w * np.sign(G), lo, hi)
            step *= DECAY
    return best_x, best


def pgd_minimize(
    graph: Graph,
    row,
    box: Box,
    cfg: PGDConfig | None = None,
    constraints: SpecCNF | None = None,
    domain_id: int | None = None,
) -> tuple[np.ndarray | None, float]:
    """Best feasible point found for min rowᵀF(x) over the box (None, inf if none)."""
    cfg = cfg or PGDConfig()
    X, f = pgd_minimize_batch(graph, row, box.lower[None], box.upper[None], cfg, constraints, [domain_id])
    return (None, np.inf) if not np.isfinite(f[0]) else (X[0], float(f[0]))
