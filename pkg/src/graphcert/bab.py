"""Three-stage verifier: PGD falsification, one bounding pass, then input-domain branch and bound."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .boundprop import CROWN, IBP, backward_bounds, compute_preactivations, concretize_lower, ibp
from .falsify import Counterexample, PGDConfig, pgd_batch, pgd_search
from .graph import Box, Graph
from .relax import RelaxParams
from .spec import Clause, SpecCNF

NAIVE = "naive"
SMART = "smart"
VERIFIED = "verified"
FALSIFIED = "falsified"
UNKNOWN = "unknown"

# a smart split that raises the worst pending bound by no more than this is a stall
STALL_TOL = 1e-12


@dataclass(frozen=True)
class VerifyConfig:
    timeout: float = 360.0
    max_domains: int = 200_000
    batch: int = 64
    branching: str = SMART
    pgd: PGDConfig = field(default_factory=PGDConfig)
    sub_pgd: PGDConfig = field(default_factory=lambda: PGDConfig(restarts=1, steps=30, batch=8))
    tolerance: float = 1e-9
    min_width: float = 1e-9
    mode: str = CROWN
    workers: int = 1

    def __post_init__(self):
        if self.branching not in (NAIVE, SMART):
            raise ValueError(f"unknown branching strategy {self.branching!r}")
        if self.mode not in (CROWN, IBP):
            raise ValueError(f"unknown bounding mode {self.mode!r}")
        if not (self.timeout > 0 and self.max_domains > 0 and self.batch > 0 and self.workers > 0):
            raise ValueError("VerifyConfig budgets must be positive")
        if not self.tolerance >= 0:
            raise ValueError("tolerance must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Subdomain:
    lower: np.ndarray
    upper: np.ndarray
    depth: int
    pending: np.ndarray  # bool per clause
    id: int
    bound: float = -np.inf  # worst pending clause bound of the parent

    @property
    def box(self) -> Box:
        return Box(self.lower, self.upper)

    def volume(self, mask=None) -> float:
        """Lebesgue measure over the dims selected by `mask` (default: all with positive width)."""
        w = self.upper - self.lower
        if mask is None:
            mask = w > 0
        return float(np.prod(w[mask])) if np.any(mask) else 0.0


@dataclass
class VerifyResult:
    status: str
    counterexample: Counterexample | None
    stats: dict

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "counterexample": None if self.counterexample is None else self.counterexample.to_dict(),
            "stats": self.stats,
        }


# ---------------------------------------------------------------------------
# bounding


@dataclass
class ClauseBounds:
    """Per-box clause lower bounds and, for each clause, the coefficients of its best atom."""

    lower: np.ndarray  # (B, C)
    coeffs: np.ndarray  # (B, C, n)


def _atom_rows(spec: SpecCNF):
    C = np.concatenate([c.matrix for c in spec.clauses])
    d = np.concatenate([c.biases for c in spec.clauses])
    owner = np.concatenate([np.full(len(c.atoms), i) for i, c in enumerate(spec.clauses)])
    return C, d, owner


def bound_clauses(graph: Graph, spec: SpecCNF, lowers, uppers, params=None, mode: str = CROWN) -> ClauseBounds:
    """Lower bounds of every clause's margin over each box in the batch.

    All atoms are bounded in one backward pass with C stacking the atom rows;
    a clause's bound is the max over its atoms.
    """
    lowers = np.atleast_2d(np.asarray(lowers, dtype=float))
    uppers = np.atleast_2d(np.asarray(uppers, dtype=float))
    Bn, n = lowers.shape
    C, d, owner = _atom_rows(spec)
    iv = ibp(graph, lowers, uppers)
    lo_i, hi_i = iv[graph.output_id]
    pos, neg = np.maximum(C, 0), np.minimum(C, 0)
    ibp_lb = lo_i @ pos.T + hi_i @ neg.T
    if mode == IBP:
        A = np.zeros((Bn, C.shape[0], n))
        lb = ibp_lb
    else:
        cache = compute_preactivations(graph, lowers, uppers, params, mode)
        bound = backward_bounds(graph, lowers, uppers, cache=cache, params=params, C=C, need_upper=False)
        A = bound.A_l
        lb = np.maximum(concretize_lower(A, bound.b_l, lowers, uppers), ibp_lb)
    lb = lb + d
    nc = len(spec.clauses)
    out = np.full((Bn, nc), -np.inf)
    coeffs = np.zeros((Bn, nc, n))
    for c in range(nc):
        rows = np.flatnonzero(owner == c)
        k = rows[lb[:, rows].argmax(axis=1)]
        out[:, c] = lb[np.arange(Bn), k]
        coeffs[:, c] = A[np.arange(Bn), k]
    return ClauseBounds(out, coeffs)


def clause_lower_bound(graph: Graph, clause: Clause, box: Box, params=None, mode: str = CROWN) -> float:
    spec = SpecCNF((clause,), box)
    return float(bound_clauses(graph, spec, box.lower, box.upper, params, mode).lower[0, 0])


# ---------------------------------------------------------------------------
# branching


def split(box: Box, coeffs=None, strategy: str = NAIVE, dim: int | None = None) -> tuple[Box, Box]:
    """Bisect the box along one coordinate; children share the midpoint exactly."""
    k = split_dim(box.lower, box.upper, coeffs, strategy) if dim is None else dim
    (l1, u1), (l2, u2) = _bisect(box.lower, box.upper, k)
    return Box(l1, u1), Box(l2, u2)


def split_dim(lower, upper, coeffs=None, strategy: str = NAIVE) -> int:
    w = np.asarray(upper, dtype=float) - np.asarray(lower, dtype=float)
    if not np.any(w > 0):
        raise ValueError("cannot split a zero-width box")
    if strategy == SMART and coeffs is not None:
        score = np.abs(np.asarray(coeffs, dtype=float)) * w
        if np.any(score > 0):
            return int(np.argmax(score))
    elif strategy not in (NAIVE, SMART):
        raise ValueError(f"unknown branching strategy {strategy!r}")
    return int(np.argmax(w))


def _bisect(lower, upper, k):
    mid = 0.5 * (lower[k] + upper[k])
    u1 = np.array(upper, dtype=float)
    l2 = np.array(lower, dtype=float)
    u1[k] = mid
    l2[k] = mid
    return (np.array(lower, dtype=float), u1), (l2, np.array(upper, dtype=float))


# ---------------------------------------------------------------------------
# main loop


def _chunks(n: int, k: int) -> list[slice]:
    k = max(1, min(k, n))
    edges = np.linspace(0, n, k + 1).round().astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


class _Pool:
    """Splits a batch into contiguous chunks, runs them on threads and reassembles in order."""

    def __init__(self, workers: int):
        self.workers = workers
        self.ex = ThreadPoolExecutor(workers) if workers > 1 else None

    def map_batch(self, fn, n: int):
        parts = _chunks(n, self.workers)
        if self.ex is None or len(parts) == 1:
            return [fn(s) for s in parts]
        return list(self.ex.map(fn, parts))

    def close(self):
        if self.ex is not None:
            self.ex.shutdown()


def verify(
    graph: Graph,
    spec: SpecCNF,
    cfg: VerifyConfig | None = None,
    params: RelaxParams | None = None,
    callback: Callable[[dict], None] | None = None,
) -> VerifyResult:
    """Verified if every clause is certified on a partition of the spec box.

    ``callback`` (for tests) receives after each batch a dict with the certified
    boxes so far, the stack, the unresolved boxes and the root box.
    """
    cfg = cfg or VerifyConfig()
    spec.check_graph(graph)
    t0 = time.monotonic()
    root = spec.input_box
    live_dims = root.width > 0  # sub-box volume is measured over the root's live dims
    nc = len(spec.clauses)
    stats = {"domains_visited": 0, "splits": 0, "max_depth": 0, "worst_bound": None, "certified_volume": 0.0,
             "root_volume": root.volume(), "unresolved": 0, "stage": "pgd"}

    cex = pgd_search(graph, spec, root, cfg.pgd)
    if cex is not None:
        stats["worst_bound"] = cex.margin
        return VerifyResult(FALSIFIED, cex, stats)

    pool = _Pool(cfg.workers)
    next_id = 1
    stack = [Subdomain(root.lower.copy(), root.upper.copy(), 0, np.ones(nc, dtype=bool), 0)]
    certified: list[Subdomain] = []
    unresolved: list[Subdomain] = []
    worst_certified = np.inf
    status = None
    stats["stage"] = "bounds"
    try:
        while stack:
            if stats["domains_visited"] >= cfg.max_domains or time.monotonic() - t0 > cfg.timeout:
                status = UNKNOWN
                break
            take = min(cfg.batch, len(stack), cfg.max_domains - stats["domains_visited"])
            batch = [stack.pop() for _ in range(take)]
            stats["domains_visited"] += len(batch)
            L = np.stack([s.lower for s in batch])
            U = np.stack([s.upper for s in batch])

            def bound_part(sl):
                return bound_clauses(graph, spec, L[sl], U[sl], params, cfg.mode)

            parts = pool.map_batch(bound_part, len(batch))
            lb = np.concatenate([p.lower for p in parts])
            coeffs = np.concatenate([p.coeffs for p in parts])

            before = np.stack([s.pending for s in batch])
            newly = before & (lb > cfg.tolerance)
            if newly.any():
                worst_certified = min(worst_certified, float(lb[newly].min()))
            open_idx = []
            parent_bound = {}
            for i, s in enumerate(batch):
                s.pending = before[i] & ~newly[i]
                if not s.pending.any():
                    certified.append(s)
                    stats["certified_volume"] += s.volume(live_dims)
                else:
                    parent_bound[i] = s.bound
                    s.bound = float(lb[i][s.pending].min())
                    open_idx.append(i)
            if not open_idx:
                if callback:
                    callback({"certified": certified, "stack": stack, "unresolved": unresolved, "root": root})
                continue

            if stats["domains_visited"] > 1:
                stats["stage"] = "bab"
            # fine-grained falsification on boxes still pending
            ids = [batch[i].id for i in open_idx]

            def pgd_part(sl):
                return pgd_batch(graph, spec, L[open_idx][sl], U[open_idx][sl], cfg.sub_pgd, ids[sl])

            found = [c for part in pool.map_batch(pgd_part, len(open_idx)) for c in part]
            hit = next((c for c in found if c is not None), None)
            if hit is not None:
                status = FALSIFIED
                cex = hit
                break

            children = []
            for i in open_idx:
                s = batch[i]
                w = s.upper - s.lower
                if w.max() <= cfg.min_width:
                    unresolved.append(s)
                    continue
                if cfg.branching == SMART and (s.depth == 0 or s.bound > parent_bound[i] + STALL_TOL):
                    c = int(np.flatnonzero(s.pending)[np.argmin(lb[i][s.pending])])
                    k = split_dim(s.lower, s.upper, coeffs[i, c], SMART)
                else:
                    # the last split did not move the bound: the coefficients do not
                    # see where the slack is, so halve the widest side instead
                    k = split_dim(s.lower, s.upper, None, NAIVE)
                (l1, u1), (l2, u2) = _bisect(s.lower, s.upper, k)
                children.append(Subdomain(l2, u2, s.depth + 1, s.pending.copy(), next_id, s.bound))
                children.append(Subdomain(l1, u1, s.depth + 1, s.pending.copy(), next_id + 1, s.bound))
                next_id += 2
                stats["splits"] += 1
                stats["max_depth"] = max(stats["max_depth"], s.depth + 1)
            # keep the original batch order on the stack so the lowest child is popped first
            stack.extend(reversed(children))
            if callback:
                callback({"certified": certified, "stack": stack, "unresolved": unresolved, "root": root})
    finally:
        pool.close()

    if status is None:
        status = VERIFIED if not unresolved else UNKNOWN
    if status == FALSIFIED:
        stats["worst_bound"] = cex.margin
        return VerifyResult(FALSIFIED, cex, stats)
    stats["unresolved"] = len(unresolved) + len(stack)
    if status == VERIFIED:
        stats["worst_bound"] = None if worst_certified == np.inf else worst_certified
    else:
        live = [s.bound for s in stack + unresolved]
        stats["worst_bound"] = min(live) if live else None
    return VerifyResult(status, None, stats)
