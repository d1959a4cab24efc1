"""Train on the two-state MDP and compare Q_tot with the value-iteration optimum."""
import argparse

from role_forge.experiments import twostate_sanity

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--seeds", type=int, nargs="+", default=[0])
args = parser.parse_args()

for s in args.seeds:
    err, updates = twostate_sanity(s)
    print(f"seed {s}: max |Q_tot - Q*| = {err:.4f} after {updates} updates")
