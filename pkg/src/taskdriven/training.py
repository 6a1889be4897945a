"""Policy-gradient and task-driven policy-gradient training.

One policy epoch: roll out N trajectories, (TDPG only) refit one MINE critic
per timestep on the (x_t, x~_t) pairs, then step the encoder and controller
on ``beta * E[cost] + sum_t MI_t``. The cost term uses the score-function
estimator; the MI term is differentiated through the reparameterized TRVs
with the critics frozen.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint, rng as rngs
from .autodiff import ContractViolation, Tensor
from .envs import EnvShiftSpec, TrajectoryBatch, make_env
from .mine import MineEstimator, mi_objective, mine_estimate, train_mine, write_mine_log, ema_update
from .nets import PolicyParams, build_ballcatch_nets, build_lava_nets, build_mine_critics
from .optim import AdamState, adam_step, clip_block_norms

log = logging.getLogger(__name__)

ROLLOUT_CHUNK = 64


class RolloutError(ArithmeticError):
    def __init__(self, rollout: int, t: int, what: str):
        super().__init__(f"non-finite {what} in rollout {rollout} at timestep {t}")
        self.rollout, self.t = rollout, t


class NoFeasiblePolicyError(RuntimeError):
    def __init__(self, best_cost: float, cap: float):
        super().__init__(f"no feasible policy: best expected cost {best_cost:.4g} exceeds the cap {cap:.4g}")
        self.best_cost, self.cap = best_cost, cap


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    env: str = "lava"
    algo: str = "tdpg"
    beta: float = 1.0 / 50.0
    n_rollouts: int = 500
    mine_batch: int = 50
    lr_policy: float = 8e-4
    lr_mine: float = 5e-5
    epochs: int = 300
    mine_epochs: int = 100
    mine_epochs_first: int = 5000
    mine_ema_alpha: float = 5e-5
    value_ema_alpha: float = 0.9
    smooth_selection: bool = True
    cost_cap: float = 40.0
    seed: int = 0
    trv_dim: int = 2
    policy_hidden: int = 64
    mine_hidden: int = 32
    mine_terminal: bool = False
    mine_shifts: int = 8
    time_varying: bool = True
    baseline: bool = True
    reward_to_go: bool = False
    grad_clip: float = 10.0
    u_max: float = 10.0
    image_size: int = 16
    sensor_noise: Optional[float] = None
    texture: str = "training"
    init_low: Optional[float] = None
    init_high: Optional[float] = None
    warm_start: str = ""
    checkpoint_every: int = 0
    early_stop: bool = False
    plateau_window: int = 20
    mine_log_every: int = 10
    threads: int = 1

    @classmethod
    def lava(cls, **overrides) -> "TrainConfig":
        return dataclasses.replace(cls(), **overrides)

    @classmethod
    def ballcatch(cls, **overrides) -> "TrainConfig":
        base = cls(
            env="ballcatch",
            beta=1.0 / 24.0,
            n_rollouts=200,
            mine_batch=20,
            lr_policy=1e-3,
            lr_mine=5e-5,
            epochs=100,
            mine_epochs=100,
            mine_epochs_first=100_000,
            cost_cap=24.0,
            trv_dim=8,
            policy_hidden=32,
            mine_hidden=64,
            time_varying=False,
            u_max=0.0,
        )
        return dataclasses.replace(base, **overrides)

    @classmethod
    def for_env(cls, env: str, **overrides) -> "TrainConfig":
        if env == "lava":
            return cls.lava(**overrides)
        if env == "ballcatch":
            return cls.ballcatch(**overrides)
        raise ValueError(f"unknown environment {env!r}")

    def validate(self) -> None:
        if self.algo not in ("pg", "tdpg"):
            raise ValueError(f"algo must be pg or tdpg, got {self.algo!r}")
        if self.algo == "tdpg" and not self.beta > 0:
            raise ValueError("beta must be positive for tdpg")
        if self.n_rollouts < 1 or self.epochs < 0:
            raise ValueError("n_rollouts must be positive and epochs non-negative")
        if self.algo == "tdpg" and not self.mine_batch < self.n_rollouts:
            raise ValueError("mine_batch must be smaller than n_rollouts")

    def shift(self) -> EnvShiftSpec:
        return EnvShiftSpec(self.sensor_noise, self.texture, self.init_low, self.init_high)


def default_lava_betas() -> List[float]:
    return [1.0 / k for k in (25, 50, 75, 100)]


def default_ballcatch_betas() -> List[float]:
    return [1.0 / k for k in range(16, 41, 2)]


def make_env_for(config: TrainConfig):
    if config.env == "lava":
        return make_env("lava", u_max=config.u_max or None)
    return make_env(config.env, image_size=config.image_size)


def build_policy(config: TrainConfig, rng: np.random.Generator) -> PolicyParams:
    env = make_env_for(config)
    if config.env == "lava":
        return build_lava_nets(rng, config.trv_dim, env.horizon, hidden=config.policy_hidden, time_varying=config.time_varying)
    return build_ballcatch_nets(rng, config.image_size, config.trv_dim, env.horizon, hidden=config.policy_hidden)


def policy_from_blocks(env_id: str, blocks: Dict[str, np.ndarray]) -> PolicyParams:
    """Rebuild the network structure implied by checkpoint block names and shapes."""
    rng = np.random.default_rng(0)
    if env_id == "lava":
        time_varying = any(k.startswith("q/t") for k in blocks)
        prefix = "q/t0" if time_varying else "q"
        trv_dim = blocks[f"{prefix}/mean/weight"].shape[1]
        hidden = blocks[f"{prefix}/layer0/weight"].shape[1]
        horizon = len({k.split("/")[1] for k in blocks if k.startswith("q/t")}) if time_varying else 5
        params = build_lava_nets(rng, trv_dim, horizon, hidden=hidden, time_varying=time_varying)
    elif env_id == "ballcatch":
        trv_dim = blocks["q/mean/weight"].shape[1]
        hidden = blocks["q/layer2/weight"].shape[1]
        flat = blocks["q/layer2/weight"].shape[0] - trv_dim
        channels = blocks["q/layer0/weight"].shape[0]
        side = int(round(math.sqrt(flat / channels)))
        size = next(s for s in (16, 32, 64) if ad.conv_output_size(ad.conv_output_size(s, 4, 2), 4, 2) == side)
        params = build_ballcatch_nets(rng, size, trv_dim, hidden=hidden, channels=channels)
    else:
        raise ValueError(f"unknown environment {env_id!r}")
    params.load_arrays(blocks)
    return params


# ---------------------------------------------------------------------------
# rollouts


def _draw_rollout_noise(env, shift, params: PolicyParams, seed: int, epoch: int, index: int, stream: int):
    g = rngs.make_rng(seed, stream, epoch, index)
    x0 = env.sample_initial(shift, g)
    T = env.horizon
    obs_noise = g.standard_normal((T,) + tuple(env.noise_shape(shift)))
    trv_eps = g.standard_normal((T, params.trv_dim))
    act_eps = g.standard_normal((T, params.action_dim))
    return x0, obs_noise, trv_eps, act_eps


def _rollout_chunk(params, env, shift, seed, epoch, indices, stream, deterministic) -> TrajectoryBatch:
    draws = [_draw_rollout_noise(env, shift, params, seed, epoch, i, stream) for i in indices]
    raw = np.stack([d[0] for d in draws])
    obs_noise = np.stack([d[1] for d in draws])
    trv_eps = np.stack([d[2] for d in draws])
    act_eps = np.stack([d[3] for d in draws])
    if deterministic:
        trv_eps[:] = 0.0
        act_eps[:] = 0.0
    n, T = len(indices), env.horizon
    raws, obs_all, trvs, acts, costs = [raw], [], [], [], []
    prev = np.zeros((n, params.trv_dim))
    with ad.no_grad():
        for t in range(T):
            y = env.observe(raw, shift, obs_noise[:, t])
            mean, log_std = params.q_at(t)(Tensor(y), Tensor(prev))
            trv = mean.data + np.exp(log_std.data) * trv_eps[:, t]
            amean, alog_std = params.pi_at(t)(Tensor(trv))
            u = amean.data + np.exp(alog_std.data) * act_eps[:, t]
            for what, arr in (("TRV", trv), ("action", u)):
                bad = ~np.all(np.isfinite(arr.reshape(n, -1)), axis=1)
                if bad.any():
                    raise RolloutError(int(indices[int(np.argmax(bad))]), t, what)
            costs.append(env.stage_cost(raw, u, t))
            raw = env.step(raw, u)
            if not np.all(np.isfinite(raw)):
                bad = ~np.all(np.isfinite(raw.reshape(n, -1)), axis=1)
                raise RolloutError(int(indices[int(np.argmax(bad))]), t + 1, "state")
            obs_all.append(y)
            trvs.append(trv)
            acts.append(u)
            raws.append(raw)
            prev = trv
    costs.append(env.terminal_cost(raw))
    raw_states = np.stack(raws, axis=1)
    return TrajectoryBatch(
        states=env.physical(raw_states),
        raw_states=raw_states,
        obs=np.stack(obs_all, axis=1),
        trvs=np.stack(trvs, axis=1),
        trv_noise=trv_eps,
        actions=np.stack(acts, axis=1),
        act_noise=act_eps,
        costs=np.stack(costs, axis=1),
    )


def _concat_batches(parts: Sequence[TrajectoryBatch]) -> TrajectoryBatch:
    fields = [f.name for f in dataclasses.fields(TrajectoryBatch)]
    return TrajectoryBatch(**{f: np.concatenate([getattr(p, f) for p in parts]) for f in fields})


def rollout_batch(
    params: PolicyParams,
    env,
    shift: Optional[EnvShiftSpec],
    n: int,
    seed: int,
    epoch: int = 0,
    threads: int = 1,
    deterministic: bool = False,
    stream: int = rngs.ROLLOUT,
) -> TrajectoryBatch:
    """Roll out ``n`` trajectories under the current (read-only) parameters.

    Rollout ``i`` draws all of its randomness from the stream
    ``(seed, stream, epoch, i)``. Rollouts are simulated in fixed-size chunks,
    so the result is bit-identical for any ``threads``.
    """
    shift = env.resolve(shift)
    chunks = [np.arange(s, min(s + ROLLOUT_CHUNK, n)) for s in range(0, n, ROLLOUT_CHUNK)]

    def run(idx):
        return _rollout_chunk(params, env, shift, seed, epoch, idx, stream, deterministic)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return _concat_batches(parts)


# ---------------------------------------------------------------------------
# gradients


def cost_weights(batch: TrajectoryBatch, baseline: bool = True, reward_to_go: bool = False) -> np.ndarray:
    """Per-(rollout, timestep) weights multiplying the log-probabilities, N x T."""
    T = batch.horizon
    if reward_to_go:
        # cost-to-go from t includes the stage cost at t and the terminal cost
        ctg = np.cumsum(batch.costs[:, ::-1], axis=1)[:, ::-1][:, :T]
        return ctg - ctg.mean(axis=0, keepdims=True) if baseline else ctg
    total = batch.total_cost
    if baseline:
        total = total - total.mean()
    return np.repeat(total[:, None], T, axis=1)


def log_prob_terms(params: PolicyParams, batch: TrajectoryBatch) -> tuple[List[Tensor], List[Tensor]]:
    """Per-timestep log q(x~_t | x~_{t-1}, y_t) and log pi(u_t | x~_t), each of shape N."""
    T, n = batch.horizon, batch.n
    prev = batch.prev_trvs()
    if params.time_varying:
        lq, lp = [], []
        for t in range(T):
            m, s = params.q_at(t)(Tensor(batch.obs[:, t]), Tensor(prev[:, t]))
            lq.append(ad.gaussian_logprob(Tensor(batch.trvs[:, t]), m, s))
            m, s = params.pi_at(t)(Tensor(batch.trvs[:, t]))
            lp.append(ad.gaussian_logprob(Tensor(batch.actions[:, t]), m, s))
        return lq, lp
    # shared weights: evaluate all timesteps as one batch of N*T rows
    flat = lambda a: a.reshape((n * T,) + a.shape[2:])  # noqa: E731
    m, s = params.q[0](Tensor(flat(batch.obs)), Tensor(flat(prev)))
    lq = ad.gaussian_logprob(Tensor(flat(batch.trvs)), m, s)
    m, s = params.pi[0](Tensor(flat(batch.trvs)))
    lp = ad.gaussian_logprob(Tensor(flat(batch.actions)), m, s)
    return [ad.reshape(lq, (n, T))], [ad.reshape(lp, (n, T))]


def _weighted_sum(terms: List[Tensor], weights: np.ndarray) -> Tensor:
    total = None
    for t, term in enumerate(terms):
        w = weights[:, t] if term.ndim == 1 else weights
        part = ad.sum(ad.mul(term, Tensor(w)))
        total = part if total is None else ad.add(total, part)
    return total


def policy_surrogate(params: PolicyParams, batch: TrajectoryBatch, baseline: bool = True, reward_to_go: bool = False) -> Tensor:
    """Scalar whose gradient is the score-function estimate of grad E[c(tau)]."""
    w = cost_weights(batch, baseline, reward_to_go)
    lq, lp = log_prob_terms(params, batch)
    return ad.scale(ad.add(_weighted_sum(lq, w), _weighted_sum(lp, w)), 1.0 / batch.n)


def _grads(loss: Tensor, blocks: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return dict(zip(blocks, ad.grad_of(loss, blocks.values())))


def pg_gradient(params: PolicyParams, batch: TrajectoryBatch, baseline: bool = True, reward_to_go: bool = False) -> Dict[str, np.ndarray]:
    """Score-function gradient of the expected total cost for every encoder and controller block."""
    return _grads(policy_surrogate(params, batch, baseline, reward_to_go), params.blocks())


def mi_timesteps(horizon: int, terminal: bool = False) -> List[int]:
    return list(range(horizon + 1 if terminal else horizon))


def tdpg_gradient(
    params: PolicyParams,
    batch: TrajectoryBatch,
    critics: Sequence,
    beta: float,
    baseline: bool = True,
    reward_to_go: bool = False,
    terminal: bool = False,
    n_shifts: int = 8,
) -> Dict[str, np.ndarray]:
    """Gradient of ``beta * E[c] + sum_t I[x_t; x~_t]``.

    ``critics`` holds one frozen critic (or MineEstimator) per MI timestep.
    The controller only receives the cost term.
    """
    steps = mi_timesteps(batch.horizon, terminal)
    if len(critics) != len(steps):
        raise ContractViolation(f"expected {len(steps)} critics, got {len(critics)}")
    crit = [c.critic if isinstance(c, MineEstimator) else c for c in critics]
    blocks = params.blocks()
    cost = ad.scale(policy_surrogate(params, batch, baseline, reward_to_go), beta)
    mi = mi_objective(crit, params, batch.states, batch.obs, batch.trvs, batch.trv_noise, steps, n_shifts)
    return _grads(ad.add(cost, mi), blocks)


# ---------------------------------------------------------------------------
# records


@dataclass
class EpochRecord:
    epoch: int
    beta: float
    cost_mean: float
    cost_std: float
    mi: List[float]
    j_hat: float
    checkpoint_file: str = ""

    @property
    def mi_sum(self) -> float:
        return float(math.fsum(self.mi))

    @classmethod
    def build(cls, epoch: int, beta: float, costs: np.ndarray, mi: Sequence[float], checkpoint_file: str = "") -> "EpochRecord":
        cm = float(np.mean(costs))
        mi = [float(v) for v in mi]
        return cls(epoch, beta, cm, float(np.std(costs)), mi, beta * cm + math.fsum(mi), checkpoint_file)


def records_header(n_mi: int) -> List[str]:
    return ["epoch", "beta", "cost_mean", "cost_std", *[f"mi_t{t}" for t in range(n_mi)], "j_hat", "checkpoint_file"]


def write_records(path, records: Sequence[EpochRecord]) -> None:
    n_mi = max((len(r.mi) for r in records), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(records_header(n_mi))
        for r in records:
            w.writerow([r.epoch, repr(r.beta), repr(r.cost_mean), repr(r.cost_std), *[repr(v) for v in r.mi], repr(r.j_hat), r.checkpoint_file])


def read_records(path) -> List[EpochRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            mi = [float(row[k]) for k in row if k.startswith("mi_t")]
            out.append(EpochRecord(int(row["epoch"]), float(row["beta"]), float(row["cost_mean"]), float(row["cost_std"]), mi, float(row["j_hat"]), row["checkpoint_file"]))
    return out


def smoothed_mi(records: Sequence[EpochRecord], alpha: float) -> List[float]:
    """Running EMA of each record's MI sum, in epoch order."""
    out, prev = [], None
    for r in records:
        prev = ema_update(prev, r.mi_sum, alpha)
        out.append(prev)
    return out


def select_policy(runs: Sequence[Sequence[EpochRecord]], cost_cap: float, smooth_alpha: Optional[float] = None) -> EpochRecord:
    """Among records with cost at most ``cost_cap``, pick the lowest MI sum.

    ``runs`` holds one record sequence per beta. Ties go to the lower cost,
    then the earlier epoch. Pass ``smooth_alpha`` to rank by the per-run EMA
    of the MI sum instead of the raw value.
    """
    candidates = []
    best_cost = math.inf
    for records in runs:
        scores = smoothed_mi(records, smooth_alpha) if smooth_alpha is not None else [r.mi_sum for r in records]
        for r, s in zip(records, scores):
            best_cost = min(best_cost, r.cost_mean)
            if r.cost_mean <= cost_cap:
                candidates.append((s, r.cost_mean, r.epoch, r))
    if not candidates:
        raise NoFeasiblePolicyError(best_cost, cost_cap)
    return min(candidates, key=lambda c: c[:3])[3]


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    records: List[EpochRecord]
    params: PolicyParams
    estimators: List[MineEstimator] = field(default_factory=list)
    out_dir: Optional[Path] = None
    best: Optional[EpochRecord] = None
    best_arrays: Optional[Dict[str, np.ndarray]] = None


def _plateaued(records: Sequence[EpochRecord], window: int) -> bool:
    if len(records) < 2 * window:
        return False
    recent = np.mean([r.j_hat for r in records[-window:]])
    before = np.mean([r.j_hat for r in records[-2 * window : -window]])
    return recent >= before


def train(config: TrainConfig, out_dir: Optional[os.PathLike] = None) -> TrainResult:
    """Run the policy-epoch loop; writes records.csv and checkpoints when ``out_dir`` is given."""
    config.validate()
    env = make_env_for(config)
    shift = env.resolve(config.shift())
    params = build_policy(config, rngs.make_rng(config.seed, rngs.INIT))
    if config.warm_start:
        params.load_arrays(checkpoint.load(config.warm_start))
    tdpg = config.algo == "tdpg"
    beta = config.beta if tdpg else 1.0
    steps = mi_timesteps(env.horizon, config.mine_terminal)
    estimators: List[MineEstimator] = []
    if tdpg:
        critics = build_mine_critics(rngs.make_rng(config.seed, rngs.INIT, 1), env.state_dim, params.trv_dim, len(steps), config.mine_hidden)
        estimators = [MineEstimator(c, config.lr_mine, config.mine_ema_alpha, config.value_ema_alpha) for c in critics]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        mine_log_path = out / "mine_log.csv"
        if mine_log_path.exists():
            mine_log_path.unlink()
    blocks = params.blocks()
    opt = AdamState()
    records: List[EpochRecord] = []
    best_score = math.inf
    best, best_arrays = None, None
    smooth_prev = None

    def save(tag: str) -> str:
        if out is None:
            return ""
        name = f"checkpoints/{tag}.ckpt"
        checkpoint.save(out / name, params.arrays())
        return name

    try:
        for epoch in range(config.epochs):
            batch = rollout_batch(params, env, shift, config.n_rollouts, config.seed, epoch, config.threads)
            mi_values: List[float] = []
            if tdpg:
                mine_rows = []
                for t, est in zip(steps, estimators):
                    tt = min(t, env.horizon - 1)
                    x, z = batch.states[:, t], batch.trvs[:, tt]
                    n_epochs = config.mine_epochs_first if epoch == 0 else config.mine_epochs
                    curve: list = []
                    train_mine(est, x, z, n_epochs, config.mine_batch, rngs.make_rng(config.seed, rngs.MINE, epoch, t), curve, config.mine_log_every)
                    mine_rows.extend((s, t, j, e) for s, j, e in curve)
                    value = mine_estimate(est, x, z, rngs.make_rng(config.seed, rngs.MARGINAL, epoch, t))
                    mi_values.append(max(0.0, value))
                if out is not None:
                    write_mine_log(mine_log_path, mine_rows)
            total = batch.total_cost
            rec = EpochRecord.build(epoch, beta, total, mi_values)
            smooth_prev = ema_update(smooth_prev, rec.mi_sum, config.value_ema_alpha)
            if tdpg:
                score = smooth_prev if config.smooth_selection else rec.mi_sum
                improved = rec.cost_mean <= config.cost_cap and score < best_score
            else:
                score = rec.cost_mean
                improved = score < best_score
            if improved:
                best_score, best, best_arrays = score, rec, params.arrays()
            if epoch == 0 or improved or (config.checkpoint_every and epoch % config.checkpoint_every == 0) or epoch == config.epochs - 1:
                rec.checkpoint_file = save(f"epoch{epoch:04d}")
            records.append(rec)
            if out is not None:
                write_records(out / "records.csv", records)
            log.info("epoch %d beta %.4g cost %.3f mi %s", epoch, beta, rec.cost_mean, np.round(mi_values, 3))

            if tdpg:
                grads = tdpg_gradient(params, batch, estimators, config.beta, config.baseline, config.reward_to_go, config.mine_terminal, config.mine_shifts)
            else:
                grads = pg_gradient(params, batch, config.baseline, config.reward_to_go)
            grads = clip_block_norms(grads, config.grad_clip)
            new, opt = adam_step({k: b.data for k, b in blocks.items()}, grads, opt, config.lr_policy)
            for k, b in blocks.items():
                b.data = new[k]
            if config.early_stop and _plateaued(records, config.plateau_window):
                log.info("objective plateaued at epoch %d", epoch)
                break
    finally:
        if out is not None and records:
            write_records(out / "records.csv", records)
    save("final")
    return TrainResult(records, params, estimators, out, best, best_arrays)
