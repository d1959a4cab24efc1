"""The full role model against the qmix ablation on sacrifice; writes per-run metrics and a mean learning curve."""
import argparse

import numpy as np

from role_forge.experiments import sacrifice_comparison

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
parser.add_argument("--t-max", type=int, default=200_000)
parser.add_argument("--out-dir", default="results/sacrifice_vs_qmix")
args = parser.parse_args()

res = sacrifice_comparison(args.seeds, args.t_max, args.out_dir)
for method, runs in res.items():
    for r in runs:
        print(f"{method} seed {r.seed}: success {r.eval_success:.3f} return {r.eval_return:.3f} ({r.seconds:.0f}s)")
    print(f"{method} mean return {np.mean([r.eval_return for r in runs]):.4f}")
