"""
Entropic risk and the cost bound
================================

The entropic risk (1/beta) log E exp(beta c) sits above the mean and grows
with beta. Here it is computed for the per-step costs of a lava policy,
and the non-binding bound diagnostic compares sum_t (risk_t + I_t) with the
empirical expected cost.
"""

import sys

import numpy as np

from taskdriven.evaluation import bound_diagnostic, entropic_risk, evaluate
from taskdriven.nets import build_lava_nets

# any lava checkpoint works; without one, an untrained policy is used
ckpt = sys.argv[1] if len(sys.argv) > 1 else build_lava_nets(np.random.default_rng(0)).arrays()
report = evaluate(ckpt, "lava", n=1000, seed=0)
print(f"mean total cost {report.cost_mean:.2f} (std {report.cost_std:.2f})")

for beta in (1e-4, 1e-3, 1e-2, 1 / 50, 1e-1):
    print(f"beta={beta:<8g} risk of total cost {entropic_risk(report.costs, beta).value:10.2f}")

# mutual information values would come from a trained run's records.csv
mi = [0.0] * 5
bound = bound_diagnostic(report.costs_per_step, mi, 1 / 50)
print(f"\nsum of per-step risks + MI: {bound.bound_rhs:.2f}")
print(f"empirical expected cost:    {bound.empirical_cost:.2f}")
print(f"gap: {bound.gap:.2f}   [{bound.note}]")
