"""Vision-based ball catching.

State rows are ``[d, bx, by, vx, vy]``: robot position on the ground line, then
ball position and velocity. The policy sees rendered RGB frames only.
"""

from __future__ import annotations

import numpy as np

from .base import EnvShiftSpec
from .render import render_scene, validate_texture

DT = 1.0 / 15.0
GRAVITY = 9.81
HORIZON = 25
BALL_INIT = (8.0, 1.0, -4.5, 7.85)
CONTROL_WEIGHT = 0.01
TERMINAL_WEIGHT = 100.0


def ballcatch_step(state: np.ndarray, u) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    d, bx, by, vx, vy = np.moveaxis(state, -1, 0)
    return np.stack([d + DT * u, bx + DT * vx, by + DT * vy, vx, vy - DT * GRAVITY], axis=-1)


def ballcatch_cost(state: np.ndarray, u, t: int, horizon: int = HORIZON) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    if t == horizon:
        return TERMINAL_WEIGHT * np.abs(state[..., 0] - state[..., 1])
    u = np.asarray(u, dtype=np.float64)
    return CONTROL_WEIGHT * (np.abs(u) if u.ndim == state.ndim - 1 else np.linalg.norm(u, axis=-1))


class BallCatchEnv:
    env_id = "ballcatch"
    horizon = HORIZON
    state_dim = 5
    action_dim = 1

    def __init__(self, image_size: int = 16):
        if image_size not in (16, 32, 64):
            raise ValueError(f"image size must be 16, 32 or 64, got {image_size}")
        self.image_size = image_size
        self.obs_shape = (3, image_size, image_size)

    def default_shift(self) -> EnvShiftSpec:
        return EnvShiftSpec(sensor_noise=0.0, texture="training", init_low=-2.0, init_high=2.0)

    def resolve(self, shift: EnvShiftSpec | None) -> EnvShiftSpec:
        base = self.default_shift()
        if shift is None:
            return base
        return EnvShiftSpec(
            sensor_noise=base.sensor_noise if shift.sensor_noise is None else shift.sensor_noise,
            texture=validate_texture(shift.texture),
            init_low=base.init_low if shift.init_low is None else shift.init_low,
            init_high=base.init_high if shift.init_high is None else shift.init_high,
            label=shift.label,
        )

    def sample_initial(self, shift: EnvShiftSpec, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(shift.init_low, shift.init_high), *BALL_INIT])

    def step(self, states: np.ndarray, u: np.ndarray) -> np.ndarray:
        return ballcatch_step(states, u[..., 0])

    def noise_shape(self, shift: EnvShiftSpec) -> tuple:
        # noiseless training frames need no draws
        return self.obs_shape if shift.sensor_noise else (0,)

    def observe(self, states: np.ndarray, shift: EnvShiftSpec, noise: np.ndarray) -> np.ndarray:
        return render_scene(states, shift.texture, self.image_size, noise if shift.sensor_noise else None, shift.sensor_noise or 0.0)

    def stage_cost(self, states: np.ndarray, u: np.ndarray, t: int) -> np.ndarray:
        return ballcatch_cost(states, u, t, self.horizon)

    def terminal_cost(self, states: np.ndarray) -> np.ndarray:
        return ballcatch_cost(states, None, self.horizon, self.horizon)

    def physical(self, states: np.ndarray) -> np.ndarray:
        return states

    def final_distance(self, states: np.ndarray) -> np.ndarray:
        return np.abs(states[..., 0] - states[..., 1])
