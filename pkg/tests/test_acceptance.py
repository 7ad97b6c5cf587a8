"""Acceptance criteria AC1-AC13, each at its stated tolerance and time budget.

The terminal summary prints one PASS/FAIL line per criterion (see conftest).
"""

import itertools
import time

import numpy as np
import pytest

from _sweep import KINDS, worst_violation
from graphcert.bab import FALSIFIED, NAIVE, SMART, UNKNOWN, VERIFIED, VerifyConfig, bound_clauses, verify
from graphcert.boundprop import CROWN, IBP, bounds_on_box
from graphcert.control import SystemBundle, reach_tube
from graphcert.fixtures import (
    MPC_BOX,
    MPC_OBJECTIVE,
    barrier_scalar,
    branching_instance,
    build_fixture,
    contraction_scalar,
    continuous_scalar,
    control_corpus,
    grid_oracle,
    linear_2d,
    linear_map,
    mlp,
    mpc_constraints,
    mpc_graph,
    random_graph,
    reach_bundle,
    scalar_discrete,
    toy_graph,
    two_layer_tanh,
    unary_graph,
    verification_corpus,
)
from graphcert.graph import Box, GraphBuilder, Op, evaluate
from graphcert.jacobian import augment_with_jacobian
from graphcert.optimize import OPTIMAL, OptConfig, minimize
from graphcert.spec import check_point

criterion = pytest.mark.criterion


def timed(fn, *args, **kw):
    t = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t


# ---------------------------------------------------------------------------


@criterion("AC1", "relaxation soundness sweep: 200 boxes x 1e4 samples per operator, slack 1e-9, < 60 s")
def test_ac1_relaxation_soundness():
    t = time.perf_counter()
    worst = {k: worst_violation(k, boxes=200, m=10_000, seed=1) for k in KINDS}
    elapsed = time.perf_counter() - t
    print(f"\nAC1 worst violation per operator: {worst}  ({elapsed:.1f} s)")
    assert all(v <= 1e-9 for v in worst.values()), worst
    assert elapsed < 60


@criterion("AC2", "toy graph ReLU(2x-1)+3 on [-1,1] bounds equal [3,4] to 1e-9, < 1 s")
@pytest.mark.parametrize("mode", [CROWN, IBP])
def test_ac2_toy_graph(mode):
    (sb, _), dt = timed(bounds_on_box, toy_graph(), Box([-1.0], [1.0]), mode=mode)
    assert abs(sb.lower[0] - 3.0) <= 1e-9 and abs(sb.upper[0] - 4.0) <= 1e-9
    assert dt < 1.0


@criterion("AC3", "affine exactness: 50 affine-only graphs match vertex enumeration to 1e-9")
def test_ac3_affine_exactness():
    rng = np.random.default_rng(3)
    for seed in range(50):
        n = 1 + seed % 4
        g = random_graph(seed, depth=1 + seed % 3, width=5, ops=("affine",), in_dim=n, out_dim=2)
        c = rng.normal(size=n)
        box = Box(c - rng.uniform(0, 2, n), c + rng.uniform(0, 2, n))
        V = np.array(list(itertools.product(*zip(box.lower, box.upper))))
        Y = evaluate(g, V)
        sb, _ = bounds_on_box(g, box, mode=CROWN)
        np.testing.assert_allclose(sb.lower, Y.min(0), atol=1e-9, rtol=0)
        np.testing.assert_allclose(sb.upper, Y.max(0), atol=1e-9, rtol=0)


@criterion("AC4", "CROWN intervals within IBP intervals on 50 random ReLU/tanh graphs (1e-9)")
def test_ac4_crown_within_ibp():
    rng = np.random.default_rng(4)
    for seed in range(50):
        ops = ("affine", "relu") if seed % 2 else ("affine", "tanh")
        g = random_graph(100 + seed, depth=3, width=8, ops=ops, in_dim=3, out_dim=2)
        c = rng.normal(size=3)
        r = rng.uniform(0.05, 2.0)
        box = Box(c - r, c + r)
        cr, _ = bounds_on_box(g, box, mode=CROWN)
        ib, _ = bounds_on_box(g, box, mode=IBP)
        assert np.all(cr.lower >= ib.lower - 1e-9) and np.all(cr.upper <= ib.upper + 1e-9)


@criterion("AC5", "verifier vs grid oracle on 40 generated 1-2D specs; >= 30 resolved in 30 s each")
def test_ac5_verifier_vs_oracle():
    resolved = 0
    rows = []
    for name, g, spec, holds in verification_corpus(40):
        r, dt = timed(verify, g, spec, VerifyConfig(timeout=30))
        oracle = grid_oracle(g, spec.input_box, spec=spec)
        if r.status == VERIFIED:
            assert oracle.violation is None, f"{name}: verified but the grid oracle found {oracle.violation}"
        if r.status == FALSIFIED:
            cex = r.counterexample
            assert check_point(spec, g, cex.x).violated, f"{name}: counterexample not confirmed"
        if r.status != UNKNOWN and dt <= 30:
            resolved += 1
        rows.append((name, holds, r.status, round(dt, 2)))
    print(f"\nAC5 resolved {resolved}/40: {rows}")
    assert resolved >= 30


@criterion("AC6", "branching efficacy: smart uses <= naive subdomains on the fixed 2-D instance")
def test_ac6_branching_efficacy():
    g, spec = branching_instance()
    root = bound_clauses(g, spec, spec.input_box.lower, spec.input_box.upper).lower
    assert root.min() <= 0  # unresolved at the root
    counts = {}
    for b in (NAIVE, SMART):
        r = verify(g, spec, VerifyConfig(branching=b))
        assert r.status == VERIFIED
        counts[b] = r.stats["domains_visited"]
    print(f"\nAC6 subdomains naive={counts[NAIVE]} smart={counts[SMART]} ratio={counts[SMART] / counts[NAIVE]:.3f}")
    assert counts[SMART] <= 1.0 * counts[NAIVE]


@criterion("AC7", "discrete Lyapunov: scalar k=0.5 verified < 5 s, k=0.9 falsified, 2-D verified < 60 s")
def test_ac7_scalar_verified():
    g, spec = build_fixture(scalar_discrete(0.5))
    r, dt = timed(verify, g, spec)
    assert r.status == VERIFIED and dt < 5


@criterion("AC7", "discrete Lyapunov: scalar k=0.5 verified < 5 s, k=0.9 falsified, 2-D verified < 60 s")
def test_ac7_broken_kappa_falsified():
    g, spec = build_fixture(scalar_discrete(0.9))
    r = verify(g, spec)
    assert r.status == FALSIFIED
    x = float(r.counterexample.x[0])
    # re-evaluate the decrease condition V(g(x)) <= (1 - kappa) V(x) on {V < rho} without the graph
    V = lambda z: z * z  # noqa: E731
    assert -1.0 <= x <= 1.0 and V(x) < 1.0
    assert V(0.5 * x) - (1 - 0.9) * V(x) > -1e-6


@criterion("AC7", "discrete Lyapunov: scalar k=0.5 verified < 5 s, k=0.9 falsified, 2-D verified < 60 s")
def test_ac7_linear_2d_verified():
    g, spec = build_fixture(linear_2d())
    r, dt = timed(verify, g, spec)
    assert r.status == VERIFIED and dt < 60


@criterion("AC8", "continuous Lyapunov: fixture (c) verified incl. face clauses < 30 s; flipped falsified")
def test_ac8_continuous():
    g, spec = build_fixture(continuous_scalar(-1.0))
    assert len(spec.clauses) == 1 + 2 * 1
    r, dt = timed(verify, g, spec)
    assert r.status == VERIFIED and dt < 30
    g, spec = build_fixture(continuous_scalar(1.0))
    assert verify(g, spec).status == FALSIFIED


@criterion("AC9", "contraction verified at rate 0.6 / falsified at 0.4; barrier with {-1,1} verified < 10 s")
def test_ac9_contraction_and_barrier():
    g, spec = build_fixture(contraction_scalar(0.6))
    assert verify(g, spec).status == VERIFIED
    g, spec = build_fixture(contraction_scalar(0.4))
    assert verify(g, spec).status == FALSIFIED
    g, spec = build_fixture(barrier_scalar(((-1.0,), (1.0,))))
    r, dt = timed(verify, g, spec)
    assert r.status == VERIFIED and dt < 10


@criterion("AC10", "reach tube of 0.5x is [-+0.5, -+0.25, -+0.125]; residual tube contains 1e3 trajectories")
def test_ac10_reachability():
    tube = reach_tube(SystemBundle(linear_map(0.5)), Box([-1.0], [1.0]), 3)
    assert [(float(s.lower[0]), float(s.upper[0])) for s in tube] == [(-0.5, 0.5), (-0.25, 0.25), (-0.125, 0.125)]
    bundle = reach_bundle()
    box = Box([-1.0], [1.0])
    tube = reach_tube(bundle, box, 5)
    g = bundle.closed_loop()
    x = box.sample(np.random.default_rng(10), 1000)
    for s in tube:
        x = evaluate(g, x)
        assert np.all(x >= s.lower) and np.all(x <= s.upper)


@criterion("AC11", "optimizer: sin min gap <= 1e-3, primal within 1e-3 of -1 in < 10 s; prune-safe; MPC matches grid")
def test_ac11_optimizer():
    g = unary_graph("sin")
    box = Box([0.0], [2 * np.pi])
    r, dt = timed(minimize, g, [1.0], box, cfg=OptConfig(gap_tol=1e-3))
    assert r.status == OPTIMAL and r.gap <= 1e-3 and abs(r.primal_value + 1.0) <= 1e-3 and dt < 10
    X = box.sample(np.random.default_rng(11), 100_000)
    assert evaluate(g, X).min() >= r.certified_lower - 1e-7

    mg, cons = mpc_graph(), mpc_constraints()
    r = minimize(mg, MPC_OBJECTIVE, MPC_BOX, cons)
    oracle = grid_oracle(mg, MPC_BOX, objective=MPC_OBJECTIVE, constraints=cons)
    assert abs(r.primal_value - oracle.minimum) <= 1e-3
    Y = evaluate(mg, MPC_BOX.sample(np.random.default_rng(12), 100_000))
    feasible = Y[:, 1] > 0.5
    assert (Y[feasible] @ MPC_OBJECTIVE).min() >= r.certified_lower - 1e-7


def _mixed():
    b = GraphBuilder("mixed")
    x = b.input("x", 2)
    h = b.mul(b.unary(Op.COS, x), b.unary(Op.SIGMOID, b.affine(x, [[1.0, -0.5], [0.3, 0.8]])))
    return b.build(b.sum(b.unary(Op.SQUARE, h)))


SMOOTH = [unary_graph("sin"), two_layer_tanh(), mlp([2, 6, 1], "sigmoid", seed=5), _mixed()]


@criterion("AC12", "Jacobian: gradients match finite differences to 1e-5 relative; gradient bounds contain samples")
@pytest.mark.parametrize("g", SMOOTH, ids=lambda g: g.name)
def test_ac12_jacobian(g):
    aug = augment_with_jacobian(g)
    n = g.input_dim
    X = np.random.default_rng(12).uniform(-1.0, 1.0, size=(100, n))
    G = evaluate(aug.graph, X)[:, aug.grad_slice]
    h = 1e-5
    fd = np.stack(
        [(evaluate(g, X + h * e)[:, 0] - evaluate(g, X - h * e)[:, 0]) / (2 * h) for e in np.eye(n)], axis=1
    )
    rel = np.abs(G - fd) / np.maximum(np.abs(fd), 1.0)
    assert rel.max() <= 1e-5
    box = Box(np.full(n, -1.0), np.full(n, 1.0))
    sb, _ = bounds_on_box(aug.graph, box)
    S = evaluate(aug.graph, box.sample(np.random.default_rng(13), 10_000))[:, aug.grad_slice]
    assert np.all(sb.lower[aug.grad_slice] <= S.min(0) + 1e-9)
    assert np.all(S.max(0) <= sb.upper[aug.grad_slice] + 1e-9)


@criterion("AC13", "determinism: golden outputs byte-identical; 1-worker and 4-worker statuses agree")
def test_ac13_golden_byte_identical():
    from test_cli import GOLDEN_DIR, make_golden

    for name, argv in make_golden.GOLDEN.items():
        _, a = make_golden.render(argv)
        _, b = make_golden.render(argv)
        assert a == b == (GOLDEN_DIR / name).read_text(), name


@criterion("AC13", "determinism: golden outputs byte-identical; 1-worker and 4-worker statuses agree")
def test_ac13_worker_agreement():
    cases = [(f.name, *build_fixture(f)) for f in control_corpus()]
    cases += [(name, g, spec) for name, g, spec, _ in verification_corpus(40)]
    cases.append(("branching", *branching_instance()))
    for name, g, spec in cases:
        a = verify(g, spec, VerifyConfig(workers=1, timeout=30))
        b = verify(g, spec, VerifyConfig(workers=4, timeout=30))
        assert a.status == b.status, name
    for workers in (1, 4):
        r = minimize(mpc_graph(), MPC_OBJECTIVE, MPC_BOX, mpc_constraints(), OptConfig(workers=workers))
        assert r.status == OPTIMAL
