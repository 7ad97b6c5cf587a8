import numpy as np
import pytest

from graphcert.bab import FALSIFIED, VERIFIED, verify
from graphcert.control import (
    CompositionError,
    DivergenceError,
    LevelParams,
    SystemBundle,
    build_barrier,
    build_certificate,
    build_robust_roa,
    bundle_from_dict,
    bundle_to_dict,
    load_bundle,
    reach_tube,
    save_bundle,
)
from graphcert.fixtures import (
    barrier_scalar,
    build_fixture,
    continuous_scalar,
    linear_map,
    reach_bundle,
    robust_scalar,
    scalar_discrete,
)
from graphcert.graph import Box, GraphBuilder, evaluate


def test_scalar_tube_halves():
    tube = reach_tube(SystemBundle(linear_map(0.5)), Box([-1.0], [1.0]), 3)
    for s, r in zip(tube, (0.5, 0.25, 0.125)):
        assert s.lower[0] == pytest.approx(-r, abs=1e-12) and s.upper[0] == pytest.approx(r, abs=1e-12)


def test_tube_divergence():
    with pytest.raises(DivergenceError) as e:
        reach_tube(SystemBundle(linear_map(3.0)), Box([-1.0], [1.0]), 20, ceiling=100.0)
    assert e.value.step == 4 and len(e.value.tube) == 3  # width 2 * 3^4 = 162


def test_residual_tube_contains_simulations():
    b = reach_bundle()
    box = Box([-1.0], [1.0])
    tube = reach_tube(b, box, 4)
    g = b.closed_loop()
    x = box.sample(np.random.default_rng(0), 500)
    for s in tube:
        x = evaluate(g, x)
        assert np.all(s.lower <= x.min(0) + 1e-9) and np.all(x.max(0) <= s.upper + 1e-9)


def test_discrete_lyapunov_encoding_values():
    fix = scalar_discrete(0.5)
    g, spec = build_fixture(fix)
    y = evaluate(g, [0.8])
    # F = V(0.5 x) - 0.5 V(x), g(x), V(x)
    np.testing.assert_allclose(y, [0.16 - 0.32, 0.4, 0.64])
    assert len(spec.clauses) == 3  # F clause and two faces, each with the escape atom


def test_params_required():
    fix = scalar_discrete()
    with pytest.raises(ValueError, match="kappa"):
        build_certificate("lyap-discrete", fix.bundle, fix.box, LevelParams(rho=1.0))
    with pytest.raises(ValueError):
        build_certificate("lyap-discrete", fix.bundle, fix.box, LevelParams(rho=1.0, kappa=1.5))
    with pytest.raises(ValueError, match="unknown"):
        build_certificate("lyap-fancy", fix.bundle, fix.box, LevelParams())


def test_robust_level_condition():
    fix = robust_scalar()
    with pytest.raises(ValueError, match="nu/kappa"):
        build_robust_roa(fix.bundle, fix.box, fix.extra["box_w"], LevelParams(rho=0.01, kappa=0.5, nu=0.04))


def test_barrier_needs_vertices():
    fix = barrier_scalar()
    with pytest.raises(ValueError):
        build_barrier(fix.bundle, fix.box, fix.params, [])


def test_barrier_vertex_outputs():
    g, spec = build_fixture(barrier_scalar())
    # h = 1 - x^2, dh = -2x, flows u = -1 and u = 1
    np.testing.assert_allclose(evaluate(g, [0.5]), [1.0 + 0.75, -1.0 + 0.75, 0.75])


def test_continuous_encoding_clause_families():
    g, spec = build_fixture(continuous_scalar())
    assert len(spec.clauses) == 3
    y = evaluate(g, [1.0])
    f = -1.0 + 0.1 * np.sin(1.0)
    np.testing.assert_allclose(y, [2 * f + 1.0, 1.0, 1.0, f])


def test_controller_composition():
    b = GraphBuilder("f")
    x = b.input("x", 1)
    u = b.input("u", 1)
    dyn = b.build(b.add_(x, u))
    cb = GraphBuilder("pi")
    cx = cb.input("x", 1)
    pi = cb.build(cb.scale(cx, -0.5))
    bundle = SystemBundle(dyn, controller=pi)
    assert evaluate(bundle.closed_loop(), [2.0])[0] == pytest.approx(1.0)
    bad = SystemBundle(dyn, controller=linear_map(1.0, 2))
    with pytest.raises(CompositionError):
        bad.check()


def test_bundle_round_trip(tmp_path):
    fix = robust_scalar()
    path = tmp_path / "b.json"
    save_bundle(fix.bundle, path)
    again = load_bundle(path)
    assert bundle_to_dict(again) == bundle_to_dict(fix.bundle)
    with pytest.raises(CompositionError):
        bundle_from_dict({"format_version": 1, "fragments": {"certificate": {}}})


@pytest.mark.parametrize("fix", [scalar_discrete(0.5), scalar_discrete(0.9), continuous_scalar(-1.0), robust_scalar(1.0)], ids=lambda f: f.name)
def test_fixture_statuses(fix):
    g, spec = build_fixture(fix)
    assert verify(g, spec).status == fix.expected


def test_broken_kappa_counterexample_violates_condition():
    g, spec = build_fixture(scalar_discrete(0.9))
    r = verify(g, spec)
    assert r.status == FALSIFIED
    x = float(r.counterexample.x[0])
    # V(g(x)) - (1 - kappa) V(x) > 0 while V(x) < rho, checked without the graph
    assert (0.5 * x) ** 2 - 0.1 * x**2 >= -1e-6 and x**2 < 1.0
