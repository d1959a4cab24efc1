"""The full role model on harvest over several seeds; prints between/within duty dissimilarity."""
import argparse

from role_forge.experiments import gap_experiment

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
parser.add_argument("--t-max", type=int, default=200_000)
parser.add_argument("--out-dir", default="results/specialization_gap")
args = parser.parse_args()

for r in gap_experiment(args.seeds, args.t_max, args.out_dir):
    print(
        f"seed {r.seed}: between {r.between_d:.4f} within {r.within_d:.4f} ratio {r.gap_ratio:.2f} "
        f"return {r.eval_return:.2f} ({r.seconds:.0f}s)"
    )
