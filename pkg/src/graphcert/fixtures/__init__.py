"""Desk-scale corpus: small graphs, control systems and brute-force oracles.

Everything here is built in code from fixed seeds; `scripts/make_fixtures.py`
writes the same objects to ``data/`` as JSON so the CLI can be exercised on
files.  The oracles only call `graph.evaluate`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..control import LevelParams, SystemBundle, build_certificate
from ..graph import Box, Graph, GraphBuilder, Op, evaluate
from ..spec import Clause, SpecCNF, atom, spec_margins

DATA_DIR = Path(__file__).parent / "data"


class OracleDimensionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# graphs


def toy_graph() -> Graph:
    """f(x) = ReLU(2x - 1) + 3, five nodes."""
    b = GraphBuilder("toy")
    x = b.input("x", 1)
    s = b.scale(x, 2.0, id="scale")
    a = b.affine(s, [[1.0]], [-1.0], id="pre")
    r = b.unary(Op.RELU, a, id="relu")
    return b.build(b.affine(r, [[1.0]], [3.0], id="out"))


def unary_graph(op: str | Op, name: str | None = None) -> Graph:
    b = GraphBuilder(name or f"{Op(op).value}_x")
    x = b.input("x", 1)
    return b.build(b.unary(op, x, id="y"))


def square_minus_one() -> Graph:
    b = GraphBuilder("square_minus_one")
    x = b.input("x", 1)
    return b.build(b.affine(b.unary(Op.SQUARE, x), [[1.0]], [-1.0], id="y"))


def linear_map(k: float = 0.5, n: int = 1) -> Graph:
    b = GraphBuilder(f"linear_{k}")
    x = b.input("x", n)
    return b.build(b.affine(x, k * np.eye(n), np.zeros(n), id="y"))


def mlp(sizes: Sequence[int], act: str = "relu", seed: int = 0, scale: float = 1.0, name: str | None = None) -> Graph:
    """Fully connected net with `act` between layers and a linear last layer."""
    rng = np.random.default_rng(seed)
    b = GraphBuilder(name or f"mlp_{act}_{seed}")
    h = b.input("x", sizes[0])
    for i, (a, c) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = rng.normal(size=(c, a)) * scale / np.sqrt(a)
        h = b.affine(h, W, rng.normal(size=c) * 0.3 * scale, id=f"fc{i}")
        if i < len(sizes) - 2:
            h = b.unary(act, h, id=f"{act}{i}")
    return b.build(h)


def two_layer_relu(seed: int = 0) -> Graph:
    return mlp([2, 8, 8, 1], "relu", seed, name="two_layer_relu")


def two_layer_tanh(seed: int = 0) -> Graph:
    return mlp([2, 8, 8, 1], "tanh", seed, name="two_layer_tanh")


def residual_net(seed: int = 7, dt: float = 0.1) -> Graph:
    """x + dt * NN(x) with NN a 1-16-16-1 ReLU net."""
    rng = np.random.default_rng(seed)
    b = GraphBuilder("residual_net")
    x = b.input("x", 1)
    h = b.unary(Op.RELU, b.affine(x, rng.normal(size=(16, 1)), rng.normal(size=16) * 0.3, id="fc0"), id="relu0")
    h = b.unary(Op.RELU, b.affine(h, rng.normal(size=(16, 16)) / 4.0, rng.normal(size=16) * 0.3, id="fc1"), id="relu1")
    nn = b.affine(h, rng.normal(size=(1, 16)) / 4.0, [0.0], id="fc2")
    return b.build(b.add_(x, b.scale(nn, dt, id="dt"), id="next"))


def mpc_graph(x_current=(1.2, 0.5)) -> Graph:
    """One step of a nonlinear model from a fixed state; input u, outputs the next state (2)."""
    b = GraphBuilder("mpc")
    u = b.input("u", 1)
    x0, x1 = x_current
    lin = b.affine(u, [[0.3], [-0.8]], [x0, x1 - 0.7], id="lin")
    wobble = b.affine(b.unary(Op.SIN, u, id="sin_u"), [[0.1], [0.0]], id="wobble")
    quad = b.affine(b.unary(Op.SQUARE, u, id="u2"), [[0.0], [0.1]], id="quad")
    return b.build(b.add_(b.add_(lin, wobble), quad, id="next"))


MPC_OBJECTIVE = np.array([1.0, 0.5])
MPC_BOX = Box([-5.0], [5.0])


def mpc_constraints() -> SpecCNF:
    """Next-state constraint y1 > 0.5; it cuts the unconstrained minimizer u = 0 out."""
    return SpecCNF((Clause((atom([0.0, 1.0], -0.5),)),), MPC_BOX)


def random_graph(
    seed: int,
    depth: int = 2,
    width: int = 4,
    ops: Sequence[str | Op] = (Op.AFFINE, Op.RELU),
    in_dim: int = 2,
    out_dim: int = 1,
    scale: float = 1.0,
) -> Graph:
    """Random layered graph using only the allowed operators (Affine is always used between layers)."""
    if depth < 1 or width < 1 or in_dim < 1 or out_dim < 1:
        raise ValueError("random_graph budgets must be positive")
    ops = [Op(o) for o in ops]
    nonlin = [o for o in ops if o not in (Op.AFFINE, Op.CONCAT, Op.SLICE, Op.SUM, Op.INPUT, Op.CONSTANT)]
    rng = np.random.default_rng(seed)
    b = GraphBuilder(f"random_{seed}")
    h = b.input("x", in_dim)
    for layer in range(depth):
        d = b.dim(h)
        W = rng.normal(size=(width, d)) * scale / np.sqrt(d)
        z = b.affine(h, W, rng.normal(size=width) * 0.3 * scale)
        if not nonlin:
            h = z
            continue
        op = nonlin[int(rng.integers(len(nonlin)))]
        if op in (Op.MUL, Op.ADD, Op.SUB):
            z2 = b.affine(h, rng.normal(size=(width, d)) * scale / np.sqrt(d), rng.normal(size=width) * 0.3)
            h = b.add(op, [z, z2])
        elif op is Op.SCALE:
            h = b.scale(z, float(rng.uniform(-2, 2)))
        elif op is Op.NEG:
            h = b.neg(z)
        else:
            h = b.unary(op, z)
        if Op.SUM in ops and layer == depth - 1:
            h = b.concat([h, b.sum(h)])
    d = b.dim(h)
    out = b.affine(h, rng.normal(size=(out_dim, d)) / np.sqrt(d), rng.normal(size=out_dim) * 0.3)
    return b.build(out)


def branching_instance() -> tuple[Graph, SpecCNF]:
    """2-D ReLU net, much more sensitive to x0 than x1 on a box that is longer along x1.

    Spec y > -4.453, 0.02 below the grid minimum (-4.4330); unresolved by the
    first bounding pass.
    """
    rng = np.random.default_rng(3)
    b = GraphBuilder("anisotropic_relu")
    x = b.input("x", 2)
    W = rng.normal(size=(16, 2)) * np.array([3.0, 0.3])
    h = b.unary(Op.RELU, b.affine(x, W, rng.normal(size=16) * 0.5))
    h = b.unary(Op.RELU, b.affine(h, rng.normal(size=(16, 16)) / 4, rng.normal(size=16) * 0.3))
    g = b.build(b.affine(h, rng.normal(size=(1, 16)) / 4, [0.0]))
    return g, SpecCNF((Clause((atom([1.0], 4.453),)),), Box([-1.0, -3.0], [1.0, 3.0]))


VERIFY_OPS = (("affine", "relu"), ("affine", "tanh"), ("affine", "sin"), ("affine", "sigmoid", "square"), ("affine", "mul"))


def verification_corpus(n: int = 40, seed: int = 2024) -> list[tuple[str, Graph, SpecCNF, bool]]:
    """Generated 1-2D specs with labels from the grid oracle.

    Thresholds sit 5% of the sampled output range below the grid minimum
    (expected true) or 10% above it (false); every third instance also gets an
    upper-bound clause, and every fifth a disjunctive clause.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        in_dim = 1 + i % 2
        ops = VERIFY_OPS[i % len(VERIFY_OPS)]
        g = random_graph(seed + i, depth=2, width=6, ops=ops, in_dim=in_dim)
        c = rng.uniform(-1, 1, size=in_dim)
        box = Box(c - 1.0, c + 1.0)
        res = grid_oracle(g, box, objective=[1.0], resolution=2000, random=2000)
        hi = -grid_oracle(g, box, objective=[-1.0], resolution=2000, random=2000).minimum
        lo = res.minimum
        spread = max(hi - lo, 1e-3)
        holds = i % 4 in (0, 1)
        t = lo - 0.05 * spread if holds else lo + 0.1 * spread
        clauses = [Clause((atom([1.0], -t),))]
        if i % 3 == 0:
            clauses.append(Clause((atom([-1.0], hi + 0.05 * spread),)))
        if i % 5 == 0:
            clauses.append(Clause((atom([1.0], -(hi + spread)), atom([-1.0], hi + 0.05 * spread))))
        out.append((f"gen{i}_{'-'.join(ops[1:])}_{in_dim}d", g, SpecCNF(tuple(clauses), box), holds))
    return out


# ---------------------------------------------------------------------------
# control systems


def _quadratic_V(L: np.ndarray, name: str = "V") -> Graph:
    """V(x) = |L x|^2."""
    b = GraphBuilder(name)
    x = b.input("x", L.shape[1])
    return b.build(b.sum(b.unary(Op.SQUARE, b.affine(x, L))))


def _fragment(name: str, n_in, build) -> Graph:
    b = GraphBuilder(name)
    if isinstance(n_in, int):
        ins = [b.input("x", n_in)]
    else:
        ins = [b.input(i, d) for i, d in n_in]
    return b.build(build(b, *ins))


@dataclass
class ControlFixture:
    name: str
    bundle: SystemBundle
    box: Box
    params: LevelParams
    kind: str
    expected: str
    extra: dict = field(default_factory=dict)


def scalar_discrete(kappa: float = 0.5) -> ControlFixture:
    """(a) g(x) = 0.5 x, V = x^2, B = [-1, 1], rho = 1."""
    dyn = _fragment("g", 1, lambda b, x: b.scale(x, 0.5))
    V = _quadratic_V(np.eye(1))
    exp = "verified" if kappa <= 0.75 else "falsified"
    return ControlFixture(
        f"scalar_discrete_k{kappa}", SystemBundle(dyn, certificate=V, name="scalar"), Box([-1.0], [1.0]),
        LevelParams(rho=1.0, kappa=kappa), "lyap-discrete", exp,
    )


LINEAR_A = np.array([[0.9, 0.2], [0.0, 0.8]])


def lyapunov_P(A: np.ndarray = LINEAR_A, iters: int = 2000) -> np.ndarray:
    """Fixed point of P <- AᵀPA + I (converges for spectral radius < 1)."""
    P = np.eye(A.shape[0])
    for _ in range(iters):
        P_new = A.T @ P @ A + np.eye(A.shape[0])
        if np.max(np.abs(P_new - P)) < 1e-14:
            return P_new
        P = P_new
    return P


def linear_2d() -> ControlFixture:
    """(b) x+ = A x with spectral radius 0.9, V = xᵀPx.

    AᵀPA - P = -I gives V(Ax) = V(x) - |x|^2 <= (1 - 1/λmax(P)) V(x), so any
    kappa < 1/λmax(P) works; half of it is used.  rho = λmin(P) (0.9/|A|)^2
    keeps the sublevel set inside a ball that A maps into the unit box.
    """
    A = LINEAR_A
    P = lyapunov_P(A)
    ev = np.linalg.eigvalsh(P)
    L = np.linalg.cholesky(P).T
    kappa = 0.5 / ev[-1]
    rho = ev[0] * (0.9 / np.linalg.norm(A, 2)) ** 2
    dyn = _fragment("A", 2, lambda b, x: b.affine(x, A))
    return ControlFixture(
        "linear_2d", SystemBundle(dyn, certificate=_quadratic_V(L), name="linear2d"), Box([-1.0, -1.0], [1.0, 1.0]),
        LevelParams(rho=float(rho), kappa=float(kappa)), "lyap-discrete", "verified", {"A": A, "P": P},
    )


def continuous_scalar(sign: float = -1.0) -> ControlFixture:
    """(c) xdot = sign x + 0.1 sin x, V = x^2, B = [-2, 2], c1 = 0.01, c2 = 3, kappa = 1."""

    def f(b, x):
        return b.add_(b.scale(x, sign), b.scale(b.unary(Op.SIN, x), 0.1))

    dyn = _fragment("f", 1, f)
    return ControlFixture(
        "continuous_scalar" + ("" if sign < 0 else "_flipped"),
        SystemBundle(dyn, certificate=_quadratic_V(np.eye(1)), name="cont_scalar"),
        Box([-2.0], [2.0]), LevelParams(c1=0.01, c2=3.0, kappa=1.0), "lyap-continuous",
        "verified" if sign < 0 else "falsified",
    )


def contraction_scalar(rate: float = 0.6) -> ControlFixture:
    """g(x) = 0.5 x, M = 1, V = x^2 with rho = 1 on B = [-1, 1], eps = 0.1."""
    dyn = _fragment("g", 1, lambda b, x: b.scale(x, 0.5))
    M = _fragment("M", 1, lambda b, x: b.affine(x, [[0.0]], [1.0]))
    return ControlFixture(
        f"contraction_r{rate}", SystemBundle(dyn, certificate=_quadratic_V(np.eye(1)), metric=M, name="contract"),
        Box([-1.0], [1.0]), LevelParams(rho=1.0, epsilon=0.1, rate=rate), "contraction",
        "verified" if rate ** 2 > 0.25 else "falsified",
    )


def barrier_scalar(vertices=((-1.0,), (1.0,))) -> ControlFixture:
    """xdot = u, h = 1 - x^2, D = [-1.5, 1.5], alpha = 1."""
    f = _fragment("f", 1, lambda b, x: b.affine(x, [[0.0]]))
    g = _fragment("g", 1, lambda b, x: b.affine(x, [[0.0]], [1.0]))
    h = _fragment("h", 1, lambda b, x: b.affine(b.unary(Op.SQUARE, x), [[-1.0]], [1.0]))
    return ControlFixture(
        f"barrier_scalar_v{len(vertices)}", SystemBundle(f, certificate=h, input_gain=g, name="barrier"), Box([-1.5], [1.5]),
        LevelParams(alpha=1.0), "barrier", "verified", {"vertices": [list(v) for v in vertices]},
    )


def robust_scalar(psi_scale: float = 4.0) -> ControlFixture:
    """g(x, w) = 0.5 x + w, V = x^2, psi = c w^2, B = [-1, 1], B^w = [-0.1, 0.1], nu = 0.04, kappa = 0.5.

    With c = 4: F_V = -(0.5x - w)^2 - 2 w^2 <= 0 and |g| <= 0.6, so it verifies.
    With c = 1: F_V = -0.25 x^2 + x w > 0 at e.g. x = w = 0.1 where V < 1, psi < nu.
    """
    dyn = _fragment("g", [("x", 1), ("w", 1)], lambda b, x, w: b.add_(b.scale(x, 0.5), w))
    psi = _fragment("psi", 1, lambda b, w: b.affine(b.unary(Op.SQUARE, w), [[psi_scale]]))
    return ControlFixture(
        f"robust_psi{psi_scale}", SystemBundle(dyn, certificate=_quadratic_V(np.eye(1)), disturbance_cost=psi, name="robust"),
        Box([-1.0], [1.0]), LevelParams(rho=1.0, kappa=0.5, nu=0.04), "robust-roa",
        "verified" if psi_scale >= 4.0 else "falsified", {"box_w": Box([-0.1], [0.1])},
    )


def reach_bundle() -> SystemBundle:
    return SystemBundle(residual_net(), name="residual")


# ---------------------------------------------------------------------------
# oracles


@dataclass
class OracleResult:
    violation: np.ndarray | None = None
    clause_index: int | None = None
    minimum: float | None = None
    argmin: np.ndarray | None = None
    points: int = 0


def _grid(box: Box, resolution: int) -> np.ndarray:
    n = box.dim
    per = max(2, int(round(resolution ** (1.0 / n))))
    axes = [np.linspace(l, u, per if u > l else 1) for l, u in zip(box.lower, box.upper)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, n)


def oracle_points(box: Box, resolution: int = 10_000, random: int = 10_000, seed: int = 12345) -> np.ndarray:
    if box.dim > 3:
        raise OracleDimensionError(f"grid oracle supports input dim <= 3, got {box.dim}")
    rng = np.random.default_rng(seed)
    return np.concatenate([_grid(box, resolution), box.sample(rng, random)])


def grid_oracle(
    graph: Graph,
    box: Box,
    spec: SpecCNF | None = None,
    objective=None,
    resolution: int = 10_000,
    random: int = 10_000,
    constraints: SpecCNF | None = None,
    chunk: int = 50_000,
) -> OracleResult:
    """Exhaustive evaluation on a uniform grid plus random points.

    With a spec: the first violating point (most negative margin), or none.
    With an objective row: the smallest value over (feasible) points.
    """
    X = oracle_points(box, resolution, random)
    Y = np.concatenate([evaluate(graph, X[i : i + chunk]) for i in range(0, len(X), chunk)])
    res = OracleResult(points=len(X))
    if spec is not None:
        M = spec_margins(spec, Y)
        worst = M.min(axis=1)
        i = int(np.argmin(worst))
        if not worst[i] > 0:
            res.violation = X[i]
            res.clause_index = int(np.argmin(M[i]))
    if objective is not None:
        f = Y @ np.asarray(objective, dtype=float)
        if constraints is not None:
            f = np.where((spec_margins(constraints, Y) > 0).all(axis=1), f, np.inf)
        i = int(np.argmin(f))
        res.minimum = float(f[i])
        res.argmin = X[i]
    return res


def build_fixture(fix: ControlFixture):
    """(graph, spec) for a control fixture."""
    return build_certificate(
        fix.kind, fix.bundle, fix.box, fix.params, box_w=fix.extra.get("box_w"), vertices=fix.extra.get("vertices")
    )


def control_corpus() -> list[ControlFixture]:
    return [
        scalar_discrete(0.5),
        scalar_discrete(0.9),
        linear_2d(),
        continuous_scalar(-1.0),
        continuous_scalar(1.0),
        contraction_scalar(0.6),
        contraction_scalar(0.4),
        barrier_scalar(),
        barrier_scalar(((0.0,),)),
        robust_scalar(4.0),
        robust_scalar(1.0),
    ]


def selftest(cfg=None) -> dict:
    """Run the embedded corpus; every entry records expected vs obtained."""
    from ..bab import NAIVE, SMART, VerifyConfig, verify
    from ..boundprop import output_bounds

    cfg = cfg or VerifyConfig()
    checks = []
    sb, _ = output_bounds(toy_graph(), [-1.0], [1.0], mode=cfg.mode)
    ok = abs(float(sb.lower[0]) - 3.0) <= 1e-9 and abs(float(sb.upper[0]) - 4.0) <= 1e-9
    checks.append({"name": "toy_bounds", "expected": [3.0, 4.0], "obtained": [float(sb.lower[0]), float(sb.upper[0])], "passed": ok})
    for fix in control_corpus():
        graph, spec = build_fixture(fix)
        r = verify(graph, spec, cfg)
        checks.append({"name": fix.name, "kind": fix.kind, "expected": fix.expected, "obtained": r.status,
                       "domains": r.stats["domains_visited"], "passed": r.status == fix.expected})
    graph, spec = branching_instance()
    counts = {}
    for strategy in (NAIVE, SMART):
        r = verify(graph, spec, replace(cfg, branching=strategy))
        counts[strategy] = r.stats["domains_visited"] if r.status == "verified" else None
    ratio = counts[SMART] / counts[NAIVE] if None not in counts.values() else None
    checks.append({"name": "branching_efficacy", "naive": counts[NAIVE], "smart": counts[SMART], "ratio": ratio,
                   "passed": ratio is not None and ratio <= 1.0})
    checks.append(check_data_files())
    return {"passed": all(c["passed"] for c in checks), "checks": checks}


def check_data_files(data_dir: Path = DATA_DIR) -> dict:
    """Every shipped fixture file parses with the matching loader."""
    from ..control import load_bundle
    from ..graph import load_graph
    from ..spec import parse_spec

    loaders = {".graph.json": load_graph, ".spec.json": parse_spec, ".bundle.json": load_bundle}
    files, errors = 0, []
    for path in sorted(data_dir.glob("*.json")):
        for suffix, load in loaders.items():
            if path.name.endswith(suffix):
                files += 1
                try:
                    load(path)
                except ValueError as e:
                    errors.append(str(e))
    return {"name": "data_files", "files": files, "errors": errors, "passed": files > 0 and not errors}
