"""Continuous lava problem: a double integrator between a wall (d=0) and lava (d>5).

Simulator state rows are ``[d, v, in_lava]``; ``in_lava`` is an absorbing flag.
"""

from __future__ import annotations

import numpy as np

from .base import EnvShiftSpec

GOAL = np.array([3.0, 0.0])
LAVA_EDGE = 5.0
HORIZON = 5
TRAIN_NOISE_VAR = 1e-4
TERMINAL_WEIGHT = 100.0


def lava_step(state: np.ndarray, u, u_max: float | None = None) -> np.ndarray:
    """Advance ``[..., 3]`` states by one step under control ``u`` (shape ``[...]``)."""
    state = np.asarray(state, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if u_max is not None:
        u = np.clip(u, -u_max, u_max)
    d, v, lava = state[..., 0], state[..., 1], state[..., 2] > 0
    d2 = d + v
    v2 = v + u
    wall = d2 < 0.0
    d2 = np.where(wall, 0.0, d2)
    v2 = np.where(wall, 0.0, v2)
    enter = d2 > LAVA_EDGE
    d2 = np.where(enter, LAVA_EDGE, d2)
    out = np.stack([d2, v2, (lava | enter).astype(np.float64)], axis=-1)
    # absorbed states do not move
    return np.where(lava[..., None], state, out)


def lava_observe(state: np.ndarray, noise_var: float, noise: np.ndarray) -> np.ndarray:
    """``y = x + sqrt(noise_var) * noise`` with ``noise`` standard normal."""
    if noise_var < 0:
        raise ValueError("noise variance must be non-negative")
    return state[..., :2] + np.sqrt(noise_var) * noise


def lava_cost(state: np.ndarray, t: int, horizon: int = HORIZON) -> np.ndarray:
    dist = np.linalg.norm(np.asarray(state, dtype=np.float64)[..., :2] - GOAL, axis=-1)
    return TERMINAL_WEIGHT * dist if t == horizon else dist


class LavaEnv:
    env_id = "lava"
    horizon = HORIZON
    state_dim = 2
    obs_shape = (2,)
    action_dim = 1

    def __init__(self, u_max: float | None = 10.0):
        self.u_max = u_max

    def default_shift(self) -> EnvShiftSpec:
        return EnvShiftSpec(sensor_noise=TRAIN_NOISE_VAR, init_low=0.0, init_high=LAVA_EDGE)

    def resolve(self, shift: EnvShiftSpec | None) -> EnvShiftSpec:
        base = self.default_shift()
        if shift is None:
            return base
        if shift.texture != "training":
            raise ValueError("the lava problem has no rendered backdrop")
        return EnvShiftSpec(
            sensor_noise=base.sensor_noise if shift.sensor_noise is None else shift.sensor_noise,
            init_low=base.init_low if shift.init_low is None else shift.init_low,
            init_high=base.init_high if shift.init_high is None else shift.init_high,
            label=shift.label,
        )

    def sample_initial(self, shift: EnvShiftSpec, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(shift.init_low, shift.init_high), 0.0, 0.0])

    def step(self, states: np.ndarray, u: np.ndarray) -> np.ndarray:
        return lava_step(states, u[..., 0], self.u_max)

    def noise_shape(self, shift: EnvShiftSpec) -> tuple:
        return self.obs_shape

    def observe(self, states: np.ndarray, shift: EnvShiftSpec, noise: np.ndarray) -> np.ndarray:
        return lava_observe(states, shift.sensor_noise, noise)

    def stage_cost(self, states: np.ndarray, u: np.ndarray, t: int) -> np.ndarray:
        return lava_cost(states, t, self.horizon)

    def terminal_cost(self, states: np.ndarray) -> np.ndarray:
        return lava_cost(states, self.horizon, self.horizon)

    def physical(self, states: np.ndarray) -> np.ndarray:
        return states[..., :2]

    def final_distance(self, states: np.ndarray) -> np.ndarray:
        return np.abs(states[..., 0] - GOAL[0])
