"""File-driven command-line frontend.

Configuration is layered: built-in defaults, then a JSON config file (from
``--config`` or the GRAPHCERT_CONFIG environment variable), then flags.  The
parser and its help text are both generated from FLAGS below.

Exit codes: 0 success / verified / optimal, 1 falsified / infeasible,
2 unknown / budget exhausted / diverged, 3 usage error, 4 unreadable input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .bab import FALSIFIED, NAIVE, SMART, UNKNOWN, VERIFIED, VerifyConfig, verify
from .boundprop import CROWN, IBP, output_bounds
from .control import KINDS, CompositionError, DivergenceError, LevelParams, build_certificate, load_bundle, reach_tube
from .falsify import PGDConfig
from .graph import Box, GraphError, GraphFormatError, load_graph
from .jacobian import UnsupportedDerivative, augment_with_jacobian
from .optimize import EXHAUSTED, INFEASIBLE, OPTIMAL, OptConfig, maximize, minimize
from .relax import UnsupportedOperator
from .spec import SpecError, parse_spec

RESULT_FORMAT_VERSION = 1
CONFIG_ENV = "GRAPHCERT_CONFIG"

EXIT_USAGE = 3
EXIT_PARSE = 4


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


@dataclass(frozen=True)
class Flag:
    name: str
    commands: tuple[str, ...]
    help: str
    type: type | None = str
    default: object = None
    choices: tuple | None = None
    required: bool = False
    configurable: bool = True  # may come from a config file

    @property
    def dest(self) -> str:
        return self.name.lstrip("-").replace("-", "_")


ALL = ("bounds", "verify", "minimize", "maximize", "certify", "selftest")
SEARCH = ("verify", "minimize", "maximize", "certify", "selftest")
OPT = ("minimize", "maximize")

FLAGS: tuple[Flag, ...] = (
    Flag("--config", ALL, f"JSON config file (default: ${CONFIG_ENV})", configurable=False),
    Flag("--output", ALL, "write the result document here instead of stdout", configurable=False),
    Flag("--graph", ("bounds", "verify", "minimize", "maximize"), "graph file", required=True, configurable=False),
    Flag("--spec", ("verify",), "CNF spec file (its box is the input domain)", required=True, configurable=False),
    Flag("--box", ("bounds", "minimize", "maximize", "certify"), 'input box as "l1 u1 l2 u2 ..."', configurable=False),
    Flag("--with-jacobian", ("bounds",), "also bound the input gradient of a scalar output", type=None, default=False),
    Flag("--mode", ALL, "bounding mode", default=CROWN, choices=(CROWN, IBP)),
    Flag("--objective", OPT, 'objective row "c1 c2 ..." over the graph outputs', required=True, configurable=False),
    Flag("--constraints", OPT, "CNF spec file the optimum must satisfy", configurable=False),
    Flag("--gap-tol", OPT, "stop once incumbent - certified bound is at most this", float, 1e-3),
    Flag("--timeout", SEARCH, "wall-clock budget in seconds, checked between batches", float, 360.0),
    Flag("--max-domains", SEARCH, "subdomain budget", int, 200_000),
    Flag("--batch", SEARCH, "subdomains bounded per batch", int, 64),
    Flag("--branching", SEARCH, "split-dimension rule", default=SMART, choices=(SMART, NAIVE)),
    Flag("--tolerance", ("verify", "certify", "selftest"), "a clause counts as certified when its lower bound exceeds this", float, 1e-9),
    Flag("--min-width", SEARCH, "boxes narrower than this are not split further", float, 1e-9),
    Flag("--pgd-restarts", SEARCH, "random restarts of the initial falsification search", int, 5),
    Flag("--pgd-steps", SEARCH, "gradient steps per restart", int, 100),
    Flag("--pgd-step-size", SEARCH, "initial step as a fraction of the box width", float, 0.1),
    Flag("--seed", SEARCH, "seed for every random stream", int, 0),
    Flag("--workers", SEARCH, "worker threads for batched bounding", int, 1),
    Flag("--kind", ("certify",), "certificate kind", required=True, choices=("reach",) + KINDS, configurable=False),
    Flag("--system", ("certify",), "system bundle file", required=True, configurable=False),
    Flag("--box-w", ("certify",), 'disturbance box "l1 u1 ..." (robust-roa)', configurable=False),
    Flag("--rho", ("certify",), "sublevel value", float),
    Flag("--kappa", ("certify",), "decrease rate", float),
    Flag("--c1", ("certify",), "inner shell level", float),
    Flag("--c2", ("certify",), "outer shell level", float),
    Flag("--alpha", ("certify",), "barrier class-K gain", float),
    Flag("--epsilon", ("certify",), "contraction neighbourhood radius", float),
    Flag("--rate", ("certify",), "contraction rate in (0, 1)", float),
    Flag("--nu", ("certify",), "disturbance cost level (robust-roa)", float),
    Flag("--tol", ("certify",), "slack in encoded non-strict inequalities", float, 1e-6),
    Flag("--vertices", ("certify",), "JSON file listing control polytope vertices (barrier)", configurable=False),
    Flag("--steps", ("certify",), "reachability horizon", int, 3),
    Flag("--ceiling", ("certify",), "reachable-box width treated as divergence", float, 1e3),
)

COMMAND_HELP = {
    "bounds": "bound the graph output over a box",
    "verify": "decide a CNF spec over its box",
    "minimize": "certified global minimum of a linear objective",
    "maximize": "certified global maximum of a linear objective",
    "certify": "check a control certificate for a system bundle",
    "selftest": "run the embedded fixture corpus",
}


def flags_for(command: str) -> list[Flag]:
    return [f for f in FLAGS if command in f.commands]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="graphcert", description="Bounds, verification and certified optimization on computation graphs.")
    p.add_argument("--version", action="version", version=f"graphcert {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for cmd, text in COMMAND_HELP.items():
        sp = sub.add_parser(cmd, help=text, description=text)
        for f in flags_for(cmd):
            extra = {}
            if f.default is not None:
                extra["help"] = f"{f.help} (default: {f.default})"
            if f.type is None:
                sp.add_argument(f.name, action="store_true", default=None, help=extra.get("help", f.help))
                continue
            # defaults are applied after config-file layering, so the parser keeps None
            sp.add_argument(
                f.name, type=f.type, choices=f.choices, default=None, help=extra.get("help", f.help), metavar=f.dest.upper()
            )
    return p


# ---------------------------------------------------------------------------
# configuration layering


def _read_config(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise InputError(f"{path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict) or doc.get("format_version") != 1:
        raise InputError(f"{path}: config must be an object with format_version 1")
    return {k: v for k, v in doc.items() if k != "format_version"}


def resolve(command: str, ns: argparse.Namespace, environ=None) -> dict:
    """Effective settings for a command: defaults < config file < flags."""
    environ = os.environ if environ is None else environ
    flags = flags_for(command)
    eff = {f.dest: f.default for f in flags}
    path = ns.config or environ.get(CONFIG_ENV)
    if path:
        known = {f.dest: f for f in flags if f.configurable}
        allowed = {f.dest for f in FLAGS if f.configurable}
        for key, value in _read_config(path).items():
            dest = key.replace("-", "_")
            if dest not in allowed:
                raise UsageError(f"{path}: unknown config key {key!r}")
            if dest not in known:
                continue  # meant for another command
            f = known[dest]
            try:
                value = f.type(value) if f.type is not None else bool(value)
            except (TypeError, ValueError):
                raise UsageError(f"{path}: bad value for {key!r}: {value!r}") from None
            if f.choices and value not in f.choices:
                raise UsageError(f"{path}: {key!r} must be one of {', '.join(map(str, f.choices))}")
            eff[dest] = value
    for f in flags:
        v = getattr(ns, f.dest, None)
        if v is not None:
            eff[f.dest] = v
    for f in flags:
        if f.required and eff[f.dest] is None:
            raise UsageError(f"graphcert {command}: the following argument is required: {f.name}")
    eff["config"] = path
    return eff


def _pgd(eff: dict) -> PGDConfig:
    return PGDConfig(eff["pgd_restarts"], eff["pgd_steps"], eff["pgd_step_size"], seed=eff["seed"])


def verify_config(eff: dict) -> VerifyConfig:
    sub = VerifyConfig().sub_pgd
    return VerifyConfig(
        timeout=eff["timeout"], max_domains=eff["max_domains"], batch=eff["batch"], branching=eff["branching"],
        pgd=_pgd(eff), sub_pgd=PGDConfig(sub.restarts, sub.steps, sub.step_size, sub.batch, eff["seed"]),
        tolerance=eff["tolerance"], min_width=eff["min_width"], mode=eff["mode"], workers=eff["workers"],
    )


def opt_config(eff: dict) -> OptConfig:
    base = OptConfig()
    pgd = PGDConfig(eff["pgd_restarts"], eff["pgd_steps"], eff["pgd_step_size"], base.pgd.batch, eff["seed"])
    sub = base.sub_pgd
    return OptConfig(
        gap_tol=eff["gap_tol"], timeout=eff["timeout"], max_domains=eff["max_domains"], batch=eff["batch"],
        branching=eff["branching"], pgd=pgd, sub_pgd=PGDConfig(sub.restarts, sub.steps, sub.step_size, sub.batch, eff["seed"]),
        min_width=eff["min_width"], mode=eff["mode"], workers=eff["workers"],
    )


# ---------------------------------------------------------------------------
# inputs


def parse_numbers(text: str, what: str) -> np.ndarray:
    try:
        vals = [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"{what}: expected whitespace-separated numbers, got {text!r}") from None
    if not vals:
        raise UsageError(f"{what}: empty")
    return np.array(vals)


def parse_box(text: str, what: str = "--box") -> Box:
    v = parse_numbers(text, what)
    if v.size % 2:
        raise UsageError(f'{what}: expected pairs "l1 u1 l2 u2 ...", got {v.size} numbers')
    try:
        return Box(v[0::2], v[1::2])
    except ValueError as e:
        raise UsageError(f"{what}: {e}") from None


class Inputs:
    """Loads input files and remembers their content digests."""

    def __init__(self):
        self.digests: dict[str, dict] = {}

    def _note(self, role: str, path: str) -> None:
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise InputError(f"{path}: {e.strerror}") from None
        self.digests[role] = {"path": str(path), "sha256": hashlib.sha256(data).hexdigest()}

    def graph(self, path, role="graph"):
        self._note(role, path)
        return load_graph(path)

    def spec(self, path, graph, role="spec"):
        self._note(role, path)
        return parse_spec(path, graph)

    def bundle(self, path, role="system"):
        self._note(role, path)
        return load_bundle(path)

    def vertices(self, path, role="vertices"):
        self._note(role, path)
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise InputError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
        if isinstance(doc, dict):
            doc = doc.get("vertices")
        if not isinstance(doc, list) or not doc:
            raise InputError(f"{path}: expected a non-empty vertex list")
        try:
            return [np.asarray(v, dtype=float).reshape(-1) for v in doc]
        except (TypeError, ValueError):
            raise InputError(f"{path}: vertices must be numeric arrays") from None


# ---------------------------------------------------------------------------
# result documents


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def result_document(command: str, inputs: Inputs, eff: dict, result: dict) -> dict:
    config = {k: v for k, v in eff.items() if k not in ("config", "output")}
    doc = {
        "format_version": RESULT_FORMAT_VERSION,
        "mode": command,
        "inputs": inputs.digests,
        "config": config,
    }
    doc.update(result)
    return _jsonable(doc)


def emit_result(doc: dict, path: str | None, stream=None) -> None:
    text = json.dumps(doc, indent=2) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        (stream or sys.stdout).write(text)


# ---------------------------------------------------------------------------
# commands


def _check_box(box: Box, dim: int, what: str = "--box") -> None:
    if box.dim != dim:
        raise UsageError(f"{what} has dimension {box.dim}, expected {dim}")


def cmd_bounds(eff, inputs):
    g = inputs.graph(eff["graph"])
    if eff["box"] is None:
        raise UsageError("graphcert bounds: the following argument is required: --box")
    box = parse_box(eff["box"])
    _check_box(box, g.input_dim)
    res: dict = {}
    target = g
    if eff["with_jacobian"]:
        aug = augment_with_jacobian(g)
        target = aug.graph
    sb, aff = output_bounds(target, box.lower, box.upper, mode=eff["mode"])
    if eff["with_jacobian"]:
        res["bounds"] = {"lower": sb.lower[aug.value_slice], "upper": sb.upper[aug.value_slice]}
        res["gradient"] = {"lower": sb.lower[aug.grad_slice], "upper": sb.upper[aug.grad_slice]}
    else:
        res["bounds"] = {"lower": sb.lower, "upper": sb.upper}
    if aff is not None:
        sl = aug.value_slice if eff["with_jacobian"] else slice(None)
        res["linear_bounds"] = {"A_l": aff.A_l[sl], "b_l": aff.b_l[sl], "A_u": aff.A_u[sl], "b_u": aff.b_u[sl]}
    res["status"] = "ok"
    return 0, res


VERIFY_EXIT = {VERIFIED: 0, FALSIFIED: 1, UNKNOWN: 2}


def cmd_verify(eff, inputs):
    g = inputs.graph(eff["graph"])
    spec = inputs.spec(eff["spec"], g)
    r = verify(g, spec, verify_config(eff))
    return VERIFY_EXIT[r.status], r.to_dict()


def cmd_optimize(eff, inputs, sense):
    g = inputs.graph(eff["graph"])
    row = parse_numbers(eff["objective"], "--objective")
    if row.size != g.output_dim:
        raise UsageError(f"--objective has {row.size} entries, graph output dim is {g.output_dim}")
    cons = inputs.spec(eff["constraints"], g, "constraints") if eff["constraints"] else None
    if eff["box"] is not None:
        box = parse_box(eff["box"])
    elif cons is not None:
        box = cons.input_box
    else:
        raise UsageError(f"graphcert {sense}: --box is required without --constraints")
    _check_box(box, g.input_dim)
    fn = minimize if sense == "minimize" else maximize
    r = fn(g, row, box, cons, opt_config(eff))
    code = {OPTIMAL: 0, INFEASIBLE: 1, EXHAUSTED: 2}[r.status]
    return code, r.to_dict()


CONCLUSIONS = {
    "lyap-discrete": "the sublevel set {V <= rho} within the box is forward invariant and V decreases along trajectories in it",
    "lyap-continuous": "trajectories starting in {V <= c1} stay in the box and V decreases exponentially on the shell c1 <= V <= c2",
    "robust-roa": "under disturbances with psi(w) <= nu the set {V <= rho} is invariant and contained in the box",
    "contraction": "distances between nearby trajectories in {V <= rho} shrink geometrically in the metric",
    "barrier": "the zero-superlevel set of h within the domain is forward invariant under some vertex control",
}


def cmd_certify(eff, inputs):
    bundle = inputs.bundle(eff["system"])
    if eff["box"] is None:
        raise UsageError("graphcert certify: the following argument is required: --box")
    box = parse_box(eff["box"])
    _check_box(box, bundle.state_dim)
    kind = eff["kind"]
    if kind == "reach":
        try:
            tube = reach_tube(bundle, box, eff["steps"], eff["ceiling"], eff["mode"])
        except DivergenceError as e:
            rows = [{"step": i + 1, "lower": s.lower, "upper": s.upper} for i, s in enumerate(e.tube)]
            return 2, {"status": "diverged", "tube": rows, "stats": {"step": e.step, "width": e.width}}
        rows = [{"step": i + 1, "lower": s.lower, "upper": s.upper} for i, s in enumerate(tube)]
        return 0, {"status": "ok", "tube": rows}
    params = LevelParams(
        **{k: eff[k] for k in ("rho", "c1", "c2", "kappa", "alpha", "nu", "epsilon", "rate")}, tol=eff["tol"]
    )
    box_w = parse_box(eff["box_w"], "--box-w") if eff["box_w"] else None
    vertices = inputs.vertices(eff["vertices"]) if eff["vertices"] else None
    try:
        graph, spec = build_certificate(kind, bundle, box, params, box_w=box_w, vertices=vertices)
    except (CompositionError, UnsupportedDerivative):
        raise
    except ValueError as e:
        raise UsageError(f"graphcert certify --kind {kind}: {e}") from None
    r = verify(graph, spec, verify_config(eff))
    res = r.to_dict()
    res["certificate"] = {"kind": kind, "clauses": len(spec.clauses), "conclusion": CONCLUSIONS[kind] if r.status == VERIFIED else None}
    return VERIFY_EXIT[r.status], res


def cmd_selftest(eff, inputs):
    from .fixtures import selftest

    report = selftest(verify_config(eff))
    return (0 if report["passed"] else 1), {"status": "passed" if report["passed"] else "failed", **report}


COMMANDS = {
    "bounds": cmd_bounds,
    "verify": cmd_verify,
    "minimize": lambda eff, inp: cmd_optimize(eff, inp, "minimize"),
    "maximize": lambda eff, inp: cmd_optimize(eff, inp, "maximize"),
    "certify": cmd_certify,
    "selftest": cmd_selftest,
}

INPUT_ERRORS = (InputError, GraphFormatError, GraphError, SpecError, CompositionError)


def run(argv=None, stdout=None, stderr=None, environ=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        ns = build_parser().parse_args(argv)
        eff = resolve(ns.command, ns, environ)
        inputs = Inputs()
        if eff["config"]:
            inputs._note("config", eff["config"])
        code, result = COMMANDS[ns.command](eff, inputs)
    except UsageError as e:
        print(f"error: {e}", file=stderr)
        return EXIT_USAGE
    except INPUT_ERRORS as e:
        print(f"error: {e}", file=stderr)
        return EXIT_PARSE
    except (UnsupportedOperator, UnsupportedDerivative) as e:
        print(f"error: {e}", file=stderr)
        return EXIT_PARSE
    except ValueError as e:
        # bad numeric settings (negative budgets and the like)
        print(f"error: {e}", file=stderr)
        return EXIT_USAGE
    emit_result(result_document(ns.command, inputs, eff, result), eff.get("output"), stdout)
    return code


def main() -> None:
    try:
        code = run()
    except SystemExit as e:  # --help / --version
        code = e.code if isinstance(e.code, int) else 0
    sys.exit(code)


if __name__ == "__main__":
    main()
