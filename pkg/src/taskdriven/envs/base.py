from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np


@dataclass(frozen=True)
class EnvShiftSpec:
    """Test-time perturbation of an environment.

    ``sensor_noise`` is the observation variance for the lava problem and the
    per-pixel standard deviation for ball catching (matching how each
    experiment reports it). ``None`` fields fall back to the training values.
    """

    sensor_noise: Optional[float] = None
    texture: str = "training"
    init_low: Optional[float] = None
    init_high: Optional[float] = None
    label: str = "training"

    def with_label(self, label: str) -> "EnvShiftSpec":
        return replace(self, label=label)


@dataclass
class TrajectoryBatch:
    """``N`` rollouts over horizon ``T``.

    states:      N x (T+1) x state_dim   physical state x_t (what the critics see)
    raw_states:  N x (T+1) x ...         full simulator state (e.g. absorbing flags)
    obs:         N x T x obs_shape       observations y_t
    trvs:        N x T x trv_dim         x~_t
    trv_noise:   N x T x trv_dim         standard-normal noise used for x~_t
    actions:     N x T x action_dim
    act_noise:   N x T x action_dim
    costs:       N x (T+1)               stage costs, terminal cost last
    """

    states: np.ndarray
    raw_states: np.ndarray
    obs: np.ndarray
    trvs: np.ndarray
    trv_noise: np.ndarray
    actions: np.ndarray
    act_noise: np.ndarray
    costs: np.ndarray

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def total_cost(self) -> np.ndarray:
        return self.costs.sum(axis=1)

    def prev_trvs(self) -> np.ndarray:
        """x~_{t-1} for t = 0..T-1, with x~_{-1} = 0."""
        zero = np.zeros_like(self.trvs[:, :1])
        return np.concatenate([zero, self.trvs[:, :-1]], axis=1)

    def subset(self, index) -> "TrajectoryBatch":
        return TrajectoryBatch(*(getattr(self, f)[index] for f in _FIELDS))


_FIELDS: Tuple[str, ...] = ("states", "raw_states", "obs", "trvs", "trv_noise", "actions", "act_noise", "costs")
