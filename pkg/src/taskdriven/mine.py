"""Donsker-Varadhan mutual-information estimation with neural critics.

The critic is trained by ascending the DV lower bound on minibatches, with the
``E_marginal[exp F]`` denominator of the gradient replaced by an exponential
moving average to reduce minibatch bias. Once trained, the critic is frozen
and the bound is differentiated with respect to the encoder through the
reparameterized TRV samples.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor
from .nets import MineCritic, PolicyParams
from .optim import AdamState, adam_step

Critic = Callable[[Tensor, Tensor], Tensor]


class MineDivergenceError(ArithmeticError):
    """The DV objective became non-finite during critic training."""


def ema_update(prev: Optional[float], new: float, alpha: float) -> float:
    """``(1 - alpha) * new + alpha * prev``; the first value passes through unchanged."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"EMA alpha must lie in [0, 1), got {alpha}")
    if prev is None:
        return float(new)
    return (1.0 - alpha) * float(new) + alpha * float(prev)


def dv_objective(critic: Critic, joint: Tuple[np.ndarray, np.ndarray], marginal: Tuple[np.ndarray, np.ndarray]) -> Tensor:
    """``mean F(joint) - log mean exp F(marginal)``."""
    if len(joint[0]) == 0 or len(marginal[0]) == 0:
        raise ContractViolation("DV objective needs non-empty batches")
    fj = critic(ad.as_tensor(joint[0]), ad.as_tensor(joint[1]))
    fm = critic(ad.as_tensor(marginal[0]), ad.as_tensor(marginal[1]))
    return ad.sub(ad.mean(fj), ad.log_mean_exp(fm))


@dataclass
class MineEstimator:
    critic: MineCritic
    lr: float = 5e-5
    ema_alpha: float = 5e-5
    value_alpha: float = 0.9
    ema_denominator: Optional[float] = None
    value_ema: Optional[float] = None
    opt: AdamState = field(default_factory=AdamState)
    steps: int = 0

    def params(self) -> Dict[str, Tensor]:
        return self.critic.blocks("critic")

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params().items()}

    def record_value(self, value: float) -> float:
        self.value_ema = ema_update(self.value_ema, value, self.value_alpha)
        return self.value_ema


def _sample_minibatches(rng: np.random.Generator, n: int, b: int) -> Tuple[np.ndarray, np.ndarray]:
    return rng.integers(0, n, size=b), rng.integers(0, n, size=b)


def mine_step_gradient(est: MineEstimator, x: np.ndarray, z_joint: np.ndarray, z_marg: np.ndarray) -> Tuple[Dict[str, np.ndarray], float]:
    """Descent direction for the critic on one minibatch, updating the EMA denominator.

    Returns the gradient of ``-J_dv`` with ``E_marg[exp F]`` in the
    denominator replaced by its running average, and the minibatch ``J_dv``.
    """
    params = est.params()
    xt = Tensor(x)
    fj = est.critic(xt, Tensor(z_joint))
    fm = est.critic(xt, Tensor(z_marg))
    ef = ad.exp(fm)
    denom = float(ef.data.mean())
    j_dv = float(fj.data.mean()) - np.log(denom) if denom > 0 else -np.inf
    if not np.isfinite(j_dv):
        norm = np.sqrt(np.sum([np.sum(p.data**2) for p in params.values()]))
        raise MineDivergenceError(
            f"non-finite DV objective at MINE step {est.steps}: |theta|={norm:.4g}, "
            f"F_joint mean={fj.data.mean():.4g}, F_marginal max={fm.data.max():.4g}"
        )
    est.ema_denominator = ema_update(est.ema_denominator, denom, est.ema_alpha)
    # gradient of mean(exp F_marg) / ema - mean(F_joint) is the DV gradient with an EMA denominator
    surrogate = ad.sub(ad.scale(ad.mean(ef), 1.0 / est.ema_denominator), ad.mean(fj))
    return dict(zip(params, ad.grad_of(surrogate, params.values()))), float(j_dv)


def train_mine(
    est: MineEstimator,
    x: np.ndarray,
    z: np.ndarray,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    log: Optional[List[Tuple[int, float, float]]] = None,
    log_every: int = 1,
) -> MineEstimator:
    """Run ``epochs`` minibatch ascent steps on the critic (updated in place, also returned).

    Each step pairs a joint minibatch ``(x[j], z[j])`` with a marginal one
    ``(x[j], z[m])`` where ``m`` is drawn independently of ``j``.
    """
    n = len(x)
    if not batch_size < n:
        raise ContractViolation(f"minibatch size {batch_size} must be smaller than the batch ({n})")
    params = est.params()
    for _ in range(epochs):
        j, m = _sample_minibatches(rng, n, batch_size)
        grads, j_dv = mine_step_gradient(est, x[j], z[j], z[m])
        new, est.opt = adam_step({k: p.data for k, p in params.items()}, grads, est.opt, est.lr)
        for k, p in params.items():
            p.data = new[k]
        est.steps += 1
        if log is not None and est.steps % log_every == 0:
            log.append((est.steps, j_dv, est.ema_denominator))
    return est


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """A random permutation with no fixed points (one cycle through a shuffled order)."""
    if n < 2:
        raise ContractViolation("a derangement needs at least two elements")
    order = rng.permutation(n)
    perm = np.empty(n, dtype=np.intp)
    perm[order] = np.roll(order, -1)
    return perm


def mine_estimate(est_or_critic, x: np.ndarray, z: np.ndarray, rng: np.random.Generator) -> float:
    """Full-batch DV value with the marginal formed by a derangement of ``z``."""
    critic = est_or_critic.critic if isinstance(est_or_critic, MineEstimator) else est_or_critic
    n = len(x)
    if n < 2:
        raise ContractViolation("MINE estimate needs at least two samples")
    perm = derangement(n, rng)
    with ad.no_grad():
        value = dv_objective(critic, (x, z), (x, z[perm]))
    return float(value.data)


# ---------------------------------------------------------------------------
# gradient of the frozen-critic estimate with respect to the encoder


def canonical_order(keys: np.ndarray) -> np.ndarray:
    """Order rows by a hash of their bytes, so the result ignores how rows were listed."""
    digests = [hashlib.blake2b(np.ascontiguousarray(row).tobytes(), digest_size=8).digest() for row in keys]
    return np.array(sorted(range(len(keys)), key=digests.__getitem__), dtype=np.intp)


def marginal_pairs(keys: np.ndarray, n_shifts: int) -> Tuple[np.ndarray, np.ndarray]:
    """Index pairs (i, j), i != j, pairing each row with ``n_shifts`` others.

    Rows are placed in a content-defined pseudo-random order and paired with
    their cyclic successors at offsets 1..n_shifts, so every pair is
    off-diagonal and the set of pairs does not depend on the input ordering.
    """
    n = len(keys)
    if n < 2:
        raise ContractViolation("need at least two rollouts to form marginal pairs")
    order = canonical_order(keys)
    shifts = np.arange(1, min(n_shifts, n - 1) + 1)
    a = np.tile(order, len(shifts))
    b = np.concatenate([np.roll(order, -s) for s in shifts])
    return a, b


def unroll_trvs(params: PolicyParams, obs: np.ndarray, trv_noise: np.ndarray, upto: int) -> List[Tensor]:
    """Recompute x~_0..x~_upto as differentiable functions of the encoder weights.

    States and observations are constants; only the stored noise is replayed.
    """
    n = obs.shape[0]
    prev = Tensor(np.zeros((n, params.trv_dim)))
    out = []
    shared = None
    if not params.time_varying and params.q[0].convs:
        net = params.q[0]
        flat = obs[:, : upto + 1].reshape((-1,) + obs.shape[2:])
        h = Tensor(flat)
        for conv in net.convs:
            h = conv(h)
        shared = ad.reshape(h, (n, upto + 1, -1))
    for t in range(upto + 1):
        net = params.q_at(t)
        if shared is not None:
            feat = ad.take(shared, np.array([t]), axis=1)
            feat = ad.reshape(feat, (n, -1))
            h = ad.concat([feat, prev], axis=1)
            for layer in net.trunk:
                h = layer(h)
            mean, log_std = net.mean_head(h), ad.clamp(net.log_std_head(h), net.min_log_std, net.max_log_std)
        else:
            mean, log_std = net(Tensor(obs[:, t]), prev)
        prev = ad.add(mean, ad.mul(ad.exp(log_std), Tensor(trv_noise[:, t])))
        out.append(prev)
    return out


def pathwise_mi(critic: Critic, x: np.ndarray, trv: Tensor, pairs: Tuple[np.ndarray, np.ndarray]) -> Tensor:
    """Frozen-critic DV value with ``trv`` carrying the graph back to the encoder."""
    joint = critic(Tensor(x), trv)
    a, b = pairs
    marg = critic(Tensor(x[a]), ad.take(trv, b, axis=0))
    return ad.sub(ad.mean(joint), ad.log_mean_exp(marg))


def mi_objective(
    critics: Sequence[Critic],
    params: PolicyParams,
    states: np.ndarray,
    obs: np.ndarray,
    trvs: np.ndarray,
    trv_noise: Optional[np.ndarray],
    timesteps: Sequence[int],
    n_shifts: int = 8,
    check_tol: float = 1e-6,
) -> Tensor:
    """Sum over ``timesteps`` of the frozen-critic MI estimate, differentiable in the encoder.

    ``critics[t]`` scores (x_t, x~_t). Timestep ``T`` (if requested) pairs the
    terminal state with the last TRV.
    """
    if trv_noise is None:
        raise ContractViolation("trajectory batch carries no stored TRV noise")
    horizon = trvs.shape[1]
    last = min(max(timesteps), horizon - 1)
    rec = unroll_trvs(params, obs, trv_noise, last)
    drift = max(float(np.max(np.abs(r.data - trvs[:, t]))) for t, r in enumerate(rec))
    if drift > check_tol * (1.0 + float(np.max(np.abs(trvs[:, : last + 1])))):
        raise ContractViolation(f"replayed TRVs differ from the stored rollout by {drift:.3g}; was the noise stored?")
    total = None
    for t in timesteps:
        trv = rec[min(t, horizon - 1)]
        keys = np.concatenate([states[:, t].reshape(len(states), -1), trv_noise[:, min(t, horizon - 1)]], axis=1)
        term = pathwise_mi(critics[t], states[:, t], trv, marginal_pairs(keys, n_shifts))
        total = term if total is None else ad.add(total, term)
    return total


def mine_grad_wrt_policy(
    est_or_critic,
    params: PolicyParams,
    batch,
    t: int,
    n_shifts: int = 8,
) -> Dict[str, np.ndarray]:
    """Gradient of the frozen-critic estimate at timestep ``t`` for every encoder block."""
    critic = est_or_critic.critic if isinstance(est_or_critic, MineEstimator) else est_or_critic
    critics = {t: critic}
    value = mi_objective(critics, params, batch.states, batch.obs, batch.trvs, batch.trv_noise, [t], n_shifts)
    blocks = {k: v for k, v in params.blocks().items() if k.startswith("q")}
    return dict(zip(blocks, ad.grad_of(value, blocks.values())))


def write_mine_log(path, rows: Sequence[Tuple[int, int, float, float]]) -> None:
    """Append rows of (mine_epoch, timestep, j_dv, ema_denominator), writing a header for a new file."""
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "timestep", "j_dv", "ema_denominator"])
        for epoch, t, j_dv, ema in rows:
            w.writerow([epoch, t, repr(float(j_dv)), repr(float(ema))])
