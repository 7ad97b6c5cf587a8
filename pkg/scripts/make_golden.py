"""Regenerate the CLI golden files in tests/golden (run from the repository root)."""

import io
import os
from pathlib import Path

from graphcert.cli import run
from graphcert.fixtures import DATA_DIR

GOLDEN = {
    "verify_lyap.json": ["verify", "--graph", "lyap.graph.json", "--spec", "lyap.spec.json", "--timeout", "30"],
    "verify_lyap_broken.json": ["verify", "--graph", "lyap_broken.graph.json", "--spec", "lyap_broken.spec.json"],
    "minimize_mpc.json": [
        "minimize", "--graph", "mpc.graph.json", "--objective", "1 0.5", "--constraints", "mpc_constraints.spec.json",
    ],
    "bounds_toy.json": ["bounds", "--graph", "toy.graph.json", "--box", "-1 1"],
}


def render(argv) -> tuple[int, str]:
    out = io.StringIO()
    cwd = os.getcwd()
    os.chdir(DATA_DIR)
    try:
        code = run(argv, stdout=out, environ={})
    finally:
        os.chdir(cwd)
    return code, out.getvalue()


def main():
    target = Path(__file__).resolve().parent.parent / "tests" / "golden"
    target.mkdir(exist_ok=True)
    for name, argv in GOLDEN.items():
        code, text = render(argv)
        (target / name).write_text(text)
        print(f"{name}: exit {code}")


if __name__ == "__main__":
    main()
