"""Closed-form reference problems for checking the estimators.

* Bivariate Gaussians with correlation rho have I = -0.5 log(1 - rho^2), a
  target for the MINE critic.
* A one-step Gaussian policy u ~ N(theta, sigma^2) with cost (u - a)^2 has
  E[c] = (theta - a)^2 + sigma^2, so dE/dtheta = 2 (theta - a) and
  dE/dlog_sigma = 2 sigma^2; the score-function estimator must match them.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import autodiff as ad
from . import rng as rngs
from .autodiff import Tensor
from .mine import MineEstimator, mine_estimate, train_mine
from .nets import MineCritic

GAUSSIAN_RHOS = (0.0, 0.5, 0.9)
GAUSSIAN_TOLERANCES = (0.05, 0.05, 0.13)


def gaussian_mi(rho: float) -> float:
    return -0.5 * math.log(1.0 - rho * rho)


def correlated_gaussians(rho: float, n: int, rng: np.random.Generator):
    x = rng.standard_normal((n, 1))
    z = rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal((n, 1))
    return x, z


@dataclass(frozen=True)
class OracleResult:
    rho: float
    true_mi: float
    estimate: float
    tolerance: float
    seconds: float

    @property
    def ok(self) -> bool:
        return abs(self.estimate - self.true_mi) <= self.tolerance


def gaussian_mi_check(
    rho: float,
    tolerance: float = 0.05,
    n: int = 10_000,
    steps: int = 4000,
    batch: int = 500,
    hidden: int = 32,
    lr: float = 1e-3,
    ema_alpha: float = 0.99,
    seed: int = 0,
) -> OracleResult:
    """Train a critic on ``n`` samples and score it on ``n`` held-out samples."""
    t0 = time.perf_counter()
    x, z = correlated_gaussians(rho, n, rngs.make_rng(seed, rngs.INIT, 1))
    xe, ze = correlated_gaussians(rho, n, rngs.make_rng(seed, rngs.EVAL, 1))
    est = MineEstimator(MineCritic.init(rngs.make_rng(seed, rngs.INIT, 2), 1, 1, hidden), lr=lr, ema_alpha=ema_alpha)
    train_mine(est, x, z, steps, batch, rngs.make_rng(seed, rngs.MINE))
    value = mine_estimate(est, xe, ze, rngs.make_rng(seed, rngs.MARGINAL))
    return OracleResult(rho, gaussian_mi(rho), value, tolerance, time.perf_counter() - t0)


def gaussian_mi_suite(seed: int = 0, **kwargs) -> List[OracleResult]:
    return [gaussian_mi_check(r, tol, seed=seed, **kwargs) for r, tol in zip(GAUSSIAN_RHOS, GAUSSIAN_TOLERANCES)]


# ---------------------------------------------------------------------------
# score-function gradient


def quadratic_policy_gradient(theta: float, log_sigma: float, target: float, n: int, seed: int = 0, baseline: bool = True):
    """Score-function estimate of dE[(u - target)^2] for u ~ N(theta, exp(log_sigma)^2).

    The estimate is formed by differentiating the surrogate
    ``mean((c - b) * log p(u))`` with the autodiff engine.
    """
    rng = rngs.make_rng(seed, rngs.ROLLOUT)
    mean = Tensor(np.array([theta]), requires_grad=True)
    log_std = Tensor(np.array([log_sigma]), requires_grad=True)
    u = theta + math.exp(log_sigma) * rng.standard_normal((n, 1))
    c = (u[:, 0] - target) ** 2
    w = c - c.mean() if baseline else c
    ones = Tensor(np.ones((n, 1)))
    logp = ad.gaussian_logprob(Tensor(u), ad.mul(ones, mean), ad.mul(ones, log_std))
    surrogate = ad.mean(ad.mul(logp, Tensor(w)))
    g_mean, g_log_std = ad.grad_of(surrogate, [mean, log_std])
    return float(g_mean[0]), float(g_log_std[0])


def quadratic_analytic_gradient(theta: float, log_sigma: float, target: float):
    return 2.0 * (theta - target), 2.0 * math.exp(2.0 * log_sigma)


def format_results(results: Sequence[OracleResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        lines.append(f"{status} rho={r.rho:.1f} true={r.true_mi:.4f} est={r.estimate:.4f} tol={r.tolerance:.2f} ({r.seconds:.1f}s)")
    return "\n".join(lines)
