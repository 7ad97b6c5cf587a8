"""Subdomain counts for naive vs smart branching on the fixed 2-D instance."""

from graphcert.bab import NAIVE, SMART, VerifyConfig, verify
from graphcert.fixtures import branching_instance


def main():
    g, spec = branching_instance()
    counts = {}
    for strategy in (NAIVE, SMART):
        r = verify(g, spec, VerifyConfig(branching=strategy))
        counts[strategy] = r.stats["domains_visited"]
        print(f"{strategy:>6}: {r.status}, {r.stats['domains_visited']} subdomains, depth {r.stats['max_depth']}")
    print(f" ratio: {counts[SMART] / counts[NAIVE]:.3f}")


if __name__ == "__main__":
    main()
