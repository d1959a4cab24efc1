"""Loss and architecture ablations on harvest at a reduced budget."""
import argparse

from role_forge.experiments import ablation_runs

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--t-max", type=int, default=50_000)
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out-dir", default="results/ablations")
args = parser.parse_args()

for r in ablation_runs(args.t_max, args.seed, args.out_dir):
    print(f"{r.ablation}: return {r.eval_return:.3f} updates {r.updates} ({r.seconds:.0f}s)")
