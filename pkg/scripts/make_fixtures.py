"""Write the embedded corpus to src/graphcert/fixtures/data as JSON files.

Run from the repository root:  python scripts/make_fixtures.py
"""

import json

import numpy as np

from graphcert import fixtures as fx
from graphcert.control import save_bundle
from graphcert.graph import Box, save_graph
from graphcert.spec import Clause, SpecCNF, atom, save_spec


def _box_arg(box: Box) -> str:
    return " ".join(f"{l!r} {u!r}" for l, u in zip(box.lower.tolist(), box.upper.tolist()))


def main(out=fx.DATA_DIR):
    out.mkdir(parents=True, exist_ok=True)
    for old in out.glob("*.json"):
        old.unlink()

    save_graph(fx.toy_graph(), out / "toy.graph.json")
    save_graph(fx.unary_graph("sin"), out / "sin.graph.json")
    sq = fx.square_minus_one()
    save_graph(sq, out / "square.graph.json")
    save_spec(SpecCNF((Clause((atom([1.0]),)),), Box([1.1], [2.0])), out / "square_pos.spec.json")
    save_spec(SpecCNF((Clause((atom([1.0]),)),), Box([-2.0], [2.0])), out / "square_neg.spec.json")
    save_graph(fx.mpc_graph(), out / "mpc.graph.json")
    save_spec(fx.mpc_constraints(), out / "mpc_constraints.spec.json")
    g, spec = fx.branching_instance()
    save_graph(g, out / "branching.graph.json")
    save_spec(spec, out / "branching.spec.json")

    # certificate graphs for the scalar Lyapunov fixture and its broken variant
    for tag, kappa in (("lyap", 0.5), ("lyap_broken", 0.9)):
        g, spec = fx.build_fixture(fx.scalar_discrete(kappa))
        save_graph(g, out / f"{tag}.graph.json")
        save_spec(spec, out / f"{tag}.spec.json")

    entries = []
    for fix in fx.control_corpus():
        name = fix.name
        save_bundle(fix.bundle, out / f"{name}.bundle.json")
        args = ["--kind", fix.kind, "--system", f"{name}.bundle.json", "--box", _box_arg(fix.box)]
        for k in ("rho", "c1", "c2", "kappa", "alpha", "nu", "epsilon", "rate"):
            v = getattr(fix.params, k)
            if v is not None:
                args += [f"--{k}", repr(float(v))]
        if "box_w" in fix.extra:
            args += ["--box-w", _box_arg(fix.extra["box_w"])]
        if "vertices" in fix.extra:
            vname = f"vertices_{len(fix.extra['vertices'])}.json"
            (out / vname).write_text(json.dumps({"format_version": 1, "vertices": fix.extra["vertices"]}) + "\n")
            args += ["--vertices", vname]
        entries.append({"name": fix.name, "args": args, "expected": fix.expected})

    save_bundle(fx.reach_bundle(), out / "residual.bundle.json")
    save_bundle(fx.scalar_discrete().bundle, out / "scalar.bundle.json")
    entries.append({"name": "reach_scalar", "args": ["--kind", "reach", "--system", "scalar.bundle.json", "--box", "-1.0 1.0", "--steps", "3"], "expected": "ok"})

    manifest = {"format_version": 1, "certify": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    print(f"wrote {len(list(out.glob('*.json')))} files to {out}")


if __name__ == "__main__":
    np.set_printoptions(precision=17)
    main()
