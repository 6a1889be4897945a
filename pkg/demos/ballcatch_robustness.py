"""
Ball catching: robustness to pixel noise and unseen backdrops
=============================================================

PG is trained on the textured scene, then TDPG is warm-started from it for
each beta. Both policies are scored at the training setting, at pixel noise
0.25 and on the seven held-out backdrops. The summary lands in
demos/results/ballcatch_summary.json for the acceptance suite.

    python3 demos/ballcatch_robustness.py [out_dir] [--epochs 100] [--threads 3]

With the paper's 100,000 first-epoch MINE steps each beta takes about 45 minutes
on one core; --betas and --mine-epochs-first trade fidelity for time.
"""

import argparse
import logging
import shutil
from fractions import Fraction
from pathlib import Path

from taskdriven.reproduce import ballcatch_robustness, check_ballcatch

ap = argparse.ArgumentParser()
ap.add_argument("out_dir", nargs="?", default="runs/ballcatch")
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--epochs", type=int, default=100, help="epochs for PG and for each TDPG run")
ap.add_argument("--threads", type=int, default=1)
ap.add_argument("--n-eval", type=int, default=1000)
ap.add_argument("--n-rollouts", type=int, default=None)
ap.add_argument("--betas", default=None, help="comma list such as 1/16,1/20; default 1/16 ... 1/40 in steps of 2")
ap.add_argument("--mine-epochs-first", type=int, default=None)
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

extra = {"n_rollouts": args.n_rollouts} if args.n_rollouts else {}
if args.mine_epochs_first:
    extra["mine_epochs_first"] = args.mine_epochs_first
betas = [float(Fraction(b)) for b in args.betas.split(",")] if args.betas else None
summary = ballcatch_robustness(args.out_dir, args.seed, betas, n_eval=args.n_eval, threads=args.threads, pg_epochs=args.epochs, tdpg_epochs=args.epochs, **extra)

pg = {r["scenario"]: r["cost_mean"] for r in summary["pg"]["reports"]}
td = {r["scenario"]: r["cost_mean"] for r in summary["tdpg"].get("reports", [])}
print(f"\n{'scenario':>22} {'PG':>9} {'TDPG':>9}")
for name, cost in pg.items():
    print(f"{name:>22} {cost:>9.2f} {td.get(name, float('nan')):>9.2f}")

ok, detail = check_ballcatch(summary)
print(("\nmeets targets: " if ok else "\nmisses targets: ") + detail)

dest = Path(__file__).resolve().parent / "results"
dest.mkdir(exist_ok=True)
shutil.copy(Path(args.out_dir) / "ballcatch_summary.json", dest / "ballcatch_summary.json")
