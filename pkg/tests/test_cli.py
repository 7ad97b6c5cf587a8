import importlib.util
import io
import json
import shutil
from pathlib import Path

import pytest

from graphcert import cli
from graphcert.cli import FLAGS, build_parser, run
from graphcert.fixtures import DATA_DIR

ROOT = Path(__file__).resolve().parent.parent
GOLDEN_DIR = Path(__file__).parent / "golden"
_spec = importlib.util.spec_from_file_location("make_golden", ROOT / "scripts" / "make_golden.py")
make_golden = importlib.util.module_from_spec(_spec)
_spec.loader.exec_module(make_golden)


@pytest.fixture
def data(tmp_path, monkeypatch):
    for p in DATA_DIR.glob("*.json"):
        shutil.copy(p, tmp_path)
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(cli.CONFIG_ENV, raising=False)
    return tmp_path


def call(*argv, environ=None):
    out, err = io.StringIO(), io.StringIO()
    code = run(list(argv), stdout=out, stderr=err, environ=environ or {})
    doc = json.loads(out.getvalue()) if out.getvalue() else None
    return code, doc, err.getvalue()


def test_bounds_toy(data):
    code, doc, _ = call("bounds", "--graph", "toy.graph.json", "--box", "-1 1")
    assert code == 0
    assert doc["format_version"] == 1 and doc["mode"] == "bounds"
    assert doc["bounds"]["lower"] == [pytest.approx(3.0, abs=1e-9)]
    assert doc["bounds"]["upper"] == [pytest.approx(4.0, abs=1e-9)]
    assert "A_l" in doc["linear_bounds"]


def test_bounds_with_jacobian(data):
    code, doc, _ = call("bounds", "--graph", "sin.graph.json", "--box", "0 1", "--with-jacobian")
    assert code == 0
    assert doc["gradient"]["lower"][0] <= 0.5403023058681398 + 1e-9
    assert doc["gradient"]["upper"][0] >= 1.0 - 1e-9


def test_verify_exit_codes(data):
    code, doc, _ = call("verify", "--graph", "lyap.graph.json", "--spec", "lyap.spec.json", "--timeout", "30")
    assert code == 0 and doc["status"] == "verified" and doc["counterexample"] is None
    code, doc, _ = call("verify", "--graph", "lyap_broken.graph.json", "--spec", "lyap_broken.spec.json")
    assert code == 1 and doc["status"] == "falsified"
    assert set(doc["counterexample"]) == {"x", "clause_index", "margin"}


def test_verify_unknown_exit(data):
    code, doc, _ = call("verify", "--graph", "branching.graph.json", "--spec", "branching.spec.json", "--max-domains", "1")
    assert code == 2 and doc["status"] == "unknown"


def test_missing_spec_is_usage_error(data):
    code, doc, err = call("verify", "--graph", "lyap.graph.json")
    assert code == 3 and doc is None and "--spec" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["bounds", "--graph", "toy.graph.json", "--box", "-1"],
        ["bounds", "--graph", "toy.graph.json", "--box", "1 -1"],
        ["bounds", "--graph", "toy.graph.json", "--box", "-1 1 0 1"],
        ["bounds", "--graph", "toy.graph.json", "--box", "-1 1", "--mode", "magic"],
        ["minimize", "--graph", "sin.graph.json", "--objective", "1 2", "--box", "0 1"],
        ["certify", "--kind", "lyap-discrete", "--system", "scalar_discrete_k0.5.bundle.json", "--box", "-1 1"],
        ["frobnicate"],
        [],
    ],
)
def test_usage_errors(data, argv):
    code, doc, err = call(*argv)
    assert code == 3 and doc is None and err.startswith("error:")


def test_parse_errors(data):
    (data / "broken.graph.json").write_text('{"format_version": 1,\n "nodes": [')
    code, doc, err = call("bounds", "--graph", "broken.graph.json", "--box", "-1 1")
    assert code == 4 and doc is None and "line 2" in err
    code, _, _ = call("bounds", "--graph", "absent.json", "--box", "-1 1")
    assert code == 4


def test_minimize_and_maximize(data):
    code, doc, _ = call("minimize", "--graph", "sin.graph.json", "--objective", "1", "--box", "0 6.283185307179586")
    assert code == 0 and doc["status"] == "optimal-within-gap"
    assert doc["primal_value"] == pytest.approx(-1.0, abs=1e-6)
    code, doc, _ = call("maximize", "--graph", "sin.graph.json", "--objective", "1", "--box", "0 3.141592653589793")
    assert code == 0 and doc["sense"] == "max" and doc["primal_value"] == pytest.approx(1.0, abs=1e-6)


def test_minimize_budget_exit(data):
    code, doc, _ = call(
        "minimize", "--graph", "mpc.graph.json", "--objective", "1 0.5", "--constraints", "mpc_constraints.spec.json",
        "--max-domains", "1", "--batch", "1", "--gap-tol", "0",
    )
    assert code == 2 and doc["status"] == "budget-exhausted"


def test_certify_manifest(data):
    manifest = json.loads((data / "manifest.json").read_text())
    for entry in manifest["certify"]:
        code, doc, err = call("certify", *entry["args"])
        assert doc is not None, err
        assert doc["status"] == entry["expected"], entry["name"]
        expected_code = {"verified": 0, "ok": 0, "falsified": 1}[entry["expected"]]
        assert code == expected_code


def test_certify_reach_tube(data):
    code, doc, _ = call("certify", "--kind", "reach", "--system", "scalar.bundle.json", "--box", "-1 1", "--steps", "3")
    assert code == 0
    assert [(t["lower"][0], t["upper"][0]) for t in doc["tube"]] == [(-0.5, 0.5), (-0.25, 0.25), (-0.125, 0.125)]


def test_certify_reach_divergence(data):
    code, doc, _ = call(
        "certify", "--kind", "reach", "--system", "scalar.bundle.json", "--box", "-1 1", "--steps", "3", "--ceiling", "0.3"
    )
    assert code == 2 and doc["status"] == "diverged" and doc["stats"]["step"] == 1  # first box has width 1


def test_config_layering(data):
    cfg = data / "c.json"
    cfg.write_text(json.dumps({"format_version": 1, "timeout": 7.0, "seed": 4, "gap_tol": 0.5}))
    argv = ["verify", "--graph", "lyap.graph.json", "--spec", "lyap.spec.json"]
    _, doc, _ = call(*argv)
    assert doc["config"]["timeout"] == 360.0
    _, doc, _ = call(*argv, environ={cli.CONFIG_ENV: str(cfg)})
    assert doc["config"]["timeout"] == 7.0 and doc["config"]["seed"] == 4
    assert "config" in doc["inputs"]
    _, doc, _ = call(*argv, "--config", str(cfg), "--timeout", "9")
    assert doc["config"]["timeout"] == 9.0


def test_config_unknown_key(data):
    cfg = data / "c.json"
    cfg.write_text(json.dumps({"format_version": 1, "timeoot": 7.0}))
    code, _, err = call("verify", "--graph", "lyap.graph.json", "--spec", "lyap.spec.json", "--config", str(cfg))
    assert code == 3 and "timeoot" in err


def test_digests_track_content(data):
    argv = ("bounds", "--graph", "toy.graph.json", "--box", "-1 1")
    _, a, _ = call(*argv)
    _, b, _ = call(*argv)
    assert a["inputs"] == b["inputs"]
    doc = json.loads((data / "toy.graph.json").read_text())
    (data / "toy.graph.json").write_text(json.dumps(doc, indent=3))
    _, c, _ = call(*argv)
    assert c["inputs"]["graph"]["sha256"] != a["inputs"]["graph"]["sha256"]


def test_output_file(data):
    code, doc, _ = call("bounds", "--graph", "toy.graph.json", "--box", "-1 1", "--output", "out.json")
    assert code == 0 and doc is None
    assert json.loads((data / "out.json").read_text())["status"] == "ok"


def test_help_lists_every_flag(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for cmd, sp in sub.choices.items():
        text = sp.format_help()
        for f in FLAGS:
            if cmd in f.commands:
                assert f.name in text, (cmd, f.name)
                assert f.help.split(" (")[0] in " ".join(text.split())


@pytest.mark.parametrize("name", sorted(make_golden.GOLDEN))
def test_golden_files(name):
    code, text = make_golden.render(make_golden.GOLDEN[name])
    assert text == (GOLDEN_DIR / name).read_text()


def test_selftest_command(data):
    code, doc, _ = call("selftest")
    assert code == 0 and doc["status"] == "passed"
    names = {c["name"] for c in doc["checks"]}
    assert {"toy_bounds", "branching_efficacy", "data_files", "linear_2d"} <= names
