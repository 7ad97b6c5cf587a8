"""Control certificates as (graph, CNF spec) pairs, plus interval reachability.

Each builder composes the user's fragments (dynamics, controller, certificate
and friends) into one graph whose output coordinates are the quantities the
certificate talks about, and writes the certificate's implication as CNF over
those coordinates.  Non-strict inequalities of the form ``q <= 0`` become the
strict tolerance atom ``-q + tol > 0``; escape conditions (``V >= rho``,
``x not in B``) are written strictly, which only makes them harder to satisfy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boundprop import CROWN, ScalarBounds, output_bounds
from .graph import Box, Graph, GraphBuilder, Op, graph_from_dict, graph_to_dict
from .jacobian import augment_with_jacobian
from .spec import Clause, SpecCNF, atom, distribute, face_atoms, unit

BUNDLE_FORMAT_VERSION = 1
ROLES = ("dynamics", "controller", "certificate", "disturbance_cost", "metric", "input_gain")


class CompositionError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, step: int, width: float, tube: list):
        super().__init__(f"reachable box width {width:.6g} exceeds the ceiling at step {step}")
        self.step = step
        self.width = width
        self.tube = tube


@dataclass
class SystemBundle:
    """Named graph fragments.

    dynamics: f(x), f(x, u) with a controller, or f(x, w) with a disturbance;
    controller: pi(x); certificate: V(x) or h(x); disturbance_cost: psi(w);
    metric: the n(n+1)/2 upper-triangular entries of M(x), row-major;
    input_gain: g(x) flattened row-major (n*m) for control-affine systems.
    """

    dynamics: Graph
    controller: Graph | None = None
    certificate: Graph | None = None
    disturbance_cost: Graph | None = None
    metric: Graph | None = None
    input_gain: Graph | None = None
    name: str = "system"
    meta: dict = field(default_factory=dict)

    @property
    def state_dim(self) -> int:
        return self.dynamics[self.dynamics.input_ids[0]].dim

    def fragment(self, role: str) -> Graph:
        g = getattr(self, role)
        if g is None:
            raise CompositionError(f"bundle {self.name!r} has no {role} fragment")
        return g

    def check(self) -> None:
        n = self.state_dim
        dyn = self.dynamics
        if self.controller is not None:
            if len(dyn.input_ids) != 2:
                raise CompositionError("with a controller the dynamics must take (x, u)")
            if self.controller.input_dim != n:
                raise CompositionError(f"controller takes dim {self.controller.input_dim}, state dim is {n}")
            udim = dyn[dyn.input_ids[1]].dim
            if self.controller.output_dim != udim:
                raise CompositionError(
                    f"controller output dim {self.controller.output_dim} != dynamics control dim {udim}"
                )
        for role in ("certificate", "metric", "input_gain"):
            g = getattr(self, role)
            if g is not None and g.input_dim != n:
                raise CompositionError(f"{role} takes dim {g.input_dim}, state dim is {n}")
        if self.certificate is not None and self.certificate.output_dim != 1:
            raise CompositionError("certificate must be scalar-valued")

    def step_into(self, b: GraphBuilder, x: str, w: str | None = None) -> str:
        """Inline one closed-loop step g(x) (or f(x, w)) into a builder; returns the output id."""
        self.check()
        dyn = self.dynamics
        if self.controller is not None:
            u = b.inline(self.controller, [x], tag="pi")
            return b.inline(dyn, [x, u], tag="f")
        if w is not None:
            if len(dyn.input_ids) != 2:
                raise CompositionError("disturbed dynamics must take (x, w)")
            return b.inline(dyn, [x, w], tag="f")
        if len(dyn.input_ids) != 1:
            raise CompositionError("dynamics takes extra inputs but no controller is given")
        return b.inline(dyn, [x], tag="f")

    def closed_loop(self) -> Graph:
        b = GraphBuilder(f"{self.name}/closed_loop")
        x = b.input("x", self.state_dim)
        return b.build(self.step_into(b, x))


# ---------------------------------------------------------------------------
# bundle file format


def bundle_to_dict(bundle: SystemBundle) -> dict:
    frags = {r: graph_to_dict(getattr(bundle, r)) for r in ROLES if getattr(bundle, r) is not None}
    doc = {"format_version": BUNDLE_FORMAT_VERSION, "name": bundle.name, "fragments": frags}
    if bundle.meta:
        doc["meta"] = bundle.meta
    return doc


def bundle_from_dict(doc: dict, source: str = "<bundle>") -> SystemBundle:
    if not isinstance(doc, dict) or doc.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise CompositionError(f"{source}: not a version {BUNDLE_FORMAT_VERSION} bundle document")
    frags = doc.get("fragments")
    if not isinstance(frags, dict) or "dynamics" not in frags:
        raise CompositionError(f"{source}: bundle needs a 'fragments' object with a 'dynamics' entry")
    unknown = set(frags) - set(ROLES)
    if unknown:
        raise CompositionError(f"{source}: unknown fragment roles {sorted(unknown)}")
    graphs = {r: graph_from_dict(g, f"{source}:{r}") for r, g in frags.items()}
    bundle = SystemBundle(name=doc.get("name", "system"), meta=dict(doc.get("meta", {})), **graphs)
    bundle.check()
    return bundle


def save_bundle(bundle: SystemBundle, path) -> None:
    Path(path).write_text(json.dumps(bundle_to_dict(bundle), indent=1) + "\n")


def load_bundle(path) -> SystemBundle:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CompositionError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    return bundle_from_dict(doc, str(path))


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class LevelParams:
    rho: float | None = None
    c1: float | None = None
    c2: float | None = None
    kappa: float | None = None
    alpha: float | None = None
    nu: float | None = None
    epsilon: float | None = None
    rate: float | None = None
    tol: float = 1e-6

    def need(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ValueError(f"missing parameters: {', '.join(missing)}")
        if "rho" in names and not self.rho > 0:
            raise ValueError("rho must be positive")
        if "c1" in names and not 0 < self.c1 < self.c2:
            raise ValueError("need 0 < c1 < c2")
        if "alpha" in names and not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if "epsilon" in names and not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if "rate" in names and not 0 < self.rate < 1:
            raise ValueError("contraction rate must lie in (0, 1)")
        if "nu" in names and not self.nu > 0:
            raise ValueError("nu must be positive")
        if not self.tol >= 0:
            raise ValueError("tol must be non-negative")

    def need_discrete_kappa(self) -> None:
        self.need("kappa")
        if not 0 < self.kappa < 1:
            raise ValueError("discrete-time kappa must lie in (0, 1)")

    def need_continuous_kappa(self) -> None:
        self.need("kappa")
        if not self.kappa > 0:
            raise ValueError("continuous-time kappa must be positive")


# ---------------------------------------------------------------------------
# reachability


def reach_step(bundle: SystemBundle, box: Box, mode: str = CROWN, graph: Graph | None = None) -> ScalarBounds:
    g = bundle.closed_loop() if graph is None else graph
    sb, _ = output_bounds(g, box.lower, box.upper, mode=mode)
    return sb


def reach_tube(bundle: SystemBundle, box: Box, steps: int, ceiling: float = 1e3, mode: str = CROWN) -> list[ScalarBounds]:
    """Boxes X_1..X_k with X_{t+1} ⊇ g(X_t); raises DivergenceError past the width ceiling."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    g = bundle.closed_loop()
    tube: list[ScalarBounds] = []
    cur = box
    for t in range(1, steps + 1):
        sb = reach_step(bundle, cur, mode, g)
        width = float(np.max(sb.upper - sb.lower))
        if not np.isfinite(width) or width > ceiling:
            raise DivergenceError(t, width, tube)
        tube.append(sb)
        cur = Box(sb.lower, sb.upper)
    return tube


# ---------------------------------------------------------------------------
# certificate builders


def _tol_atom(i: int, q: int, tol: float):
    """y_i <= 0 written as -y_i + tol > 0."""
    return atom(unit(i, q, -1.0), tol)


def build_discrete_lyapunov(bundle: SystemBundle, box: Box, params: LevelParams) -> tuple[Graph, SpecCNF]:
    """(F <= 0 and g(x) in B) or V(x) >= rho, with F = V(g(x)) - (1 - kappa) V(x).

    Output layout: [F, g(x)_1..n, V(x)].
    """
    params.need("rho")
    params.need_discrete_kappa()
    V = bundle.fragment("certificate")
    n = bundle.state_dim
    if box.dim != n:
        raise CompositionError(f"box dim {box.dim} does not match state dim {n}")
    b = GraphBuilder(f"{bundle.name}/lyap_discrete")
    x = b.input("x", n)
    gx = bundle.step_into(b, x)
    vx = b.inline(V, [x], tag="V")
    vg = b.inline(V, [gx], tag="V")
    F = b.sub(vg, b.scale(vx, 1.0 - params.kappa))
    out = b.concat([F, gx, vx], id="out")
    q = n + 2
    esc = atom(unit(n + 1, q), -params.rho)
    conj = [_tol_atom(0, q, params.tol)] + face_atoms(range(1, n + 1), box.lower, box.upper, q)
    clauses = distribute([conj], [esc])
    spec = SpecCNF(tuple(clauses), box, {"kind": "lyap-discrete", "outputs": ["F", *[f"g{i}" for i in range(n)], "V"]})
    return b.build(out), spec


def build_robust_roa(
    bundle: SystemBundle, box_x: Box, box_w: Box, params: LevelParams
) -> tuple[Graph, SpecCNF]:
    """(F_V <= 0 and f(x,w) in B) or V(x) > rho or psi(w) > nu.

    F_V = V(f(x, w)) - (1 - kappa) V(x) - psi(w); input is (x, w) over B x B^w.
    Output layout: [F_V, f_1..n, V(x), psi(w)].
    """
    params.need("rho", "nu")
    params.need_discrete_kappa()
    if params.nu / params.kappa > params.rho:
        raise ValueError(f"need nu/kappa <= rho, got {params.nu / params.kappa:.6g} > {params.rho:.6g}")
    V = bundle.fragment("certificate")
    psi = bundle.fragment("disturbance_cost")
    dyn = bundle.dynamics
    if len(dyn.input_ids) != 2:
        raise CompositionError("robust ROA needs dynamics f(x, w)")
    n = bundle.state_dim
    nw = dyn[dyn.input_ids[1]].dim
    if box_x.dim != n or box_w.dim != nw:
        raise CompositionError("state/disturbance boxes do not match the dynamics")
    b = GraphBuilder(f"{bundle.name}/robust_roa")
    x = b.input("x", n)
    w = b.input("w", nw)
    fx = b.inline(dyn, [x, w], tag="f")
    vx = b.inline(V, [x], tag="V")
    vf = b.inline(V, [fx], tag="V")
    pw = b.inline(psi, [w], tag="psi")
    F = b.sub(b.sub(vf, b.scale(vx, 1.0 - params.kappa)), pw)
    out = b.concat([F, fx, vx, pw], id="out")
    q = n + 3
    esc = [atom(unit(n + 1, q), -params.rho), atom(unit(n + 2, q), -params.nu)]
    conj = [_tol_atom(0, q, params.tol)] + face_atoms(range(1, n + 1), box_x.lower, box_x.upper, q)
    clauses = distribute([conj], esc)
    spec = SpecCNF(tuple(clauses), Box.product(box_x, box_w), {"kind": "robust-roa"})
    return b.build(out), spec


def build_continuous_lyapunov(bundle: SystemBundle, box: Box, params: LevelParams) -> tuple[Graph, SpecCNF]:
    """Shell decrease plus inward flow on the box faces inside {V <= c2}.

    Clause 1: F <= 0 or V > c2 or V < c1, with F = grad V . f + kappa V.
    Per face (i, side): G <= 0 or x not on the face or V > c2, where G = f . n_out.
    Output layout: [F, V, x_1..n, f_1..n].  G for a face is +-f_i.
    """
    params.need("c1", "c2")
    params.need_continuous_kappa()
    V = bundle.fragment("certificate")
    n = bundle.state_dim
    if box.dim != n:
        raise CompositionError(f"box dim {box.dim} does not match state dim {n}")
    aug = augment_with_jacobian(V)
    b = GraphBuilder(f"{bundle.name}/lyap_continuous")
    x = b.input("x", n)
    fx = bundle.step_into(b, x)
    vg = b.inline(aug.graph, [x], tag="Vgrad")
    v = b.slice(vg, 0, 1)
    dv = b.slice(vg, 1, 1 + n)
    F = b.add_(b.sum(b.mul(dv, fx)), b.scale(v, params.kappa))
    out = b.concat([F, v, x, fx], id="out")
    q = 2 + 2 * n
    above = atom(unit(1, q), -params.c2)
    clauses = [Clause((_tol_atom(0, q, params.tol), above, atom(unit(1, q, -1.0), params.c1)))]
    for i in range(n):
        xi, fi = 2 + i, 2 + n + i
        # lower face x_i = l_i, outward normal -e_i: G = -f_i
        clauses.append(Clause((atom(unit(fi, q), params.tol), atom(unit(xi, q), -box.lower[i]), above)))
        # upper face x_i = u_i, outward normal +e_i: G = f_i
        clauses.append(Clause((atom(unit(fi, q, -1.0), params.tol), atom(unit(xi, q, -1.0), box.upper[i]), above)))
    spec = SpecCNF(tuple(clauses), box, {"kind": "lyap-continuous"})
    return b.build(out), spec


def _quadratic_form(b: GraphBuilder, m_entries: str, d: str, n: int) -> str:
    """dᵀ M d with M given by its row-major upper-triangular entries."""
    terms = []
    for i in range(n):
        di = b.slice(d, i, i + 1)
        for j in range(i, n):
            if i == j:
                terms.append(b.unary(Op.SQUARE, di))
            else:
                terms.append(b.scale(b.mul(di, b.slice(d, j, j + 1)), 2.0))
    z = b.concat(terms)
    return b.sum(b.mul(m_entries, z))


def build_contraction(bundle: SystemBundle, box: Box, params: LevelParams) -> tuple[Graph, SpecCNF]:
    """G(x, d) <= 0 or x + d outside B or V(x) >= rho or V(x + d) >= rho, over B x [-eps, eps]^n.

    G = Δᵀ M(f(x)) Δ - rate² dᵀ M(x) d with Δ = f(x + d) - f(x).
    Output layout: [G, V(x), V(x + d), (x + d)_1..n].
    """
    params.need("rho", "epsilon", "rate")
    V = bundle.fragment("certificate")
    M = bundle.fragment("metric")
    n = bundle.state_dim
    if M.output_dim != n * (n + 1) // 2:
        raise CompositionError(f"metric must emit n(n+1)/2 = {n * (n + 1) // 2} entries, got {M.output_dim}")
    if box.dim != n:
        raise CompositionError(f"box dim {box.dim} does not match state dim {n}")
    b = GraphBuilder(f"{bundle.name}/contraction")
    x = b.input("x", n)
    d = b.input("delta", n)
    y = b.add_(x, d)
    fx = bundle.step_into(b, x)
    fy = bundle.step_into(b, y)
    diff = b.sub(fy, fx)
    m_f = b.inline(M, [fx], tag="M")
    m_x = b.inline(M, [x], tag="M")
    G = b.sub(_quadratic_form(b, m_f, diff, n), b.scale(_quadratic_form(b, m_x, d, n), params.rate**2))
    vx = b.inline(V, [x], tag="V")
    vy = b.inline(V, [y], tag="V")
    out = b.concat([G, vx, vy, y], id="out")
    q = 3 + n
    atoms = [_tol_atom(0, q, params.tol)]
    atoms += face_atoms(range(3, 3 + n), box.lower, box.upper, q, inside=False)
    atoms += [atom(unit(1, q), -params.rho), atom(unit(2, q), -params.rho)]
    eps = np.full(n, float(params.epsilon))
    spec = SpecCNF((Clause(tuple(atoms)),), Box.product(box, Box(-eps, eps)), {"kind": "contraction"})
    return b.build(out), spec


def build_barrier(bundle: SystemBundle, box: Box, params: LevelParams, vertices) -> tuple[Graph, SpecCNF]:
    """max_v [grad h . (f + g u_v)] + alpha h >= 0  or  h < 0, on the box D.

    dynamics is the drift f(x); input_gain is g(x) flattened row-major (n*m),
    absent meaning g = 0.  Output layout: [B_1..B_K, h].
    """
    params.need("alpha")
    verts = [np.atleast_1d(np.asarray(v, dtype=float)) for v in vertices]
    if not verts:
        raise ValueError("the control polytope needs at least one vertex")
    h = bundle.fragment("certificate")
    n = bundle.state_dim
    m = verts[0].shape[0]
    if any(v.shape != (m,) for v in verts):
        raise ValueError("vertices must all have the same dimension")
    if len(bundle.dynamics.input_ids) != 1:
        raise CompositionError("barrier drift must take only x")
    if box.dim != n:
        raise CompositionError(f"box dim {box.dim} does not match state dim {n}")
    aug = augment_with_jacobian(h)
    b = GraphBuilder(f"{bundle.name}/barrier")
    x = b.input("x", n)
    fx = b.inline(bundle.dynamics, [x], tag="f")
    hg = b.inline(aug.graph, [x], tag="hgrad")
    hv = b.slice(hg, 0, 1)
    dh = b.slice(hg, 1, 1 + n)
    gx = None
    if bundle.input_gain is not None:
        if bundle.input_gain.output_dim != n * m:
            raise CompositionError(f"input gain must emit n*m = {n * m} entries, got {bundle.input_gain.output_dim}")
        gx = b.inline(bundle.input_gain, [x], tag="g")
    outs = []
    for v in verts:
        flow = fx
        if gx is not None:
            W = np.zeros((n, n * m))
            for i in range(n):
                W[i, i * m : (i + 1) * m] = v
            flow = b.add_(fx, b.affine(gx, W))
        outs.append(b.add_(b.sum(b.mul(dh, flow)), b.scale(hv, params.alpha)))
    out = b.concat([*outs, hv], id="out")
    K = len(verts)
    q = K + 1
    atoms = [atom(unit(k, q), params.tol) for k in range(K)] + [atom(unit(K, q, -1.0), 0.0)]
    spec = SpecCNF((Clause(tuple(atoms)),), box, {"kind": "barrier"})
    return b.build(out), spec


KINDS = ("lyap-discrete", "lyap-continuous", "robust-roa", "contraction", "barrier")


def build_certificate(kind: str, bundle: SystemBundle, box: Box, params: LevelParams, box_w: Box | None = None, vertices=None):
    """Dispatch to the builder named by `kind`."""
    if kind == "lyap-discrete":
        return build_discrete_lyapunov(bundle, box, params)
    if kind == "lyap-continuous":
        return build_continuous_lyapunov(bundle, box, params)
    if kind == "robust-roa":
        if box_w is None:
            raise ValueError("robust-roa needs a disturbance box")
        return build_robust_roa(bundle, box, box_w, params)
    if kind == "contraction":
        return build_contraction(bundle, box, params)
    if kind == "barrier":
        return build_barrier(bundle, box, params, [] if vertices is None else vertices)
    raise ValueError(f"unknown certificate kind {kind!r}; expected one of {', '.join(KINDS)}")
