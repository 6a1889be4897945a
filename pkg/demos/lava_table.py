"""
Lava: PG vs TDPG under sensor noise
===================================

Trains PG and a TDPG beta sweep for each seed, picks the TDPG policy with the
cost cap rule, and evaluates both at the training noise and at variance 1.
The summary is copied to demos/results/lava_summary.json, which the
acceptance suite reads.

    python3 demos/lava_table.py [out_dir] [--seeds 0,1,2] [--threads 3] [--warm-start]

Expect roughly an hour per seed on one core.
"""

import argparse
import json
import logging
import shutil
from pathlib import Path

from taskdriven.reproduce import check_lava, lava_table

ap = argparse.ArgumentParser()
ap.add_argument("out_dir", nargs="?", default="runs/lava")
ap.add_argument("--seeds", default="0,1,2")
ap.add_argument("--threads", type=int, default=1)
ap.add_argument("--n-eval", type=int, default=1000)
ap.add_argument("--warm-start", action="store_true", help="start each TDPG run from the PG policy")
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

seeds = [int(s) for s in args.seeds.split(",")]
summary = lava_table(args.out_dir, seeds, n_eval=args.n_eval, threads=args.threads, warm_start=args.warm_start)

print(f"\n{'seed':>4} {'policy':>12} {'train cost':>11} {'var=1 cost':>11} {'ratio':>6} {'within 0.75':>12}")
for run in summary["runs"]:
    rows = [("PG", run["pg"])]
    if run["tdpg"]["feasible"]:
        rows.append((f"TDPG b={run['tdpg']['beta']:.3g}", run["tdpg"]))
    else:
        print(f"{run['seed']:>4} {'TDPG':>12}  no policy under the cost cap (best {run['tdpg']['best_cost']:.1f})")
    for name, r in rows:
        tr, sh = r["training"], r["shifted"]
        print(f"{run['seed']:>4} {name:>12} {tr['cost_mean']:>11.2f} {sh['cost_mean']:>11.2f} {sh['cost_mean'] / tr['cost_mean']:>6.2f} {sh['within_band']:>12.1%}")

ok, detail = check_lava(summary)
print(("\nmeets targets: " if ok else "\nmisses targets: ") + detail)

dest = Path(__file__).resolve().parent / "results"
dest.mkdir(exist_ok=True)
shutil.copy(Path(args.out_dir) / "lava_summary.json", dest / "lava_summary.json")
print(f"copied summary to {dest / 'lava_summary.json'}")
