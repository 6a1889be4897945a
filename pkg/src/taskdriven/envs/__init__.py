from .ballcatch import BallCatchEnv, ballcatch_cost, ballcatch_step
from .base import EnvShiftSpec, TrajectoryBatch
from .lava import LavaEnv, lava_cost, lava_observe, lava_step
from .render import TEST_TEXTURES, render_backdrop, render_scene, to_ppm

ENV_IDS = ("lava", "ballcatch")


def make_env(env_id: str, **kwargs):
    if env_id == "lava":
        return LavaEnv(**kwargs)
    if env_id == "ballcatch":
        return BallCatchEnv(**kwargs)
    raise ValueError(f"unknown environment {env_id!r}; choose from {ENV_IDS}")


def sample_initial(env, shift, rng):
    return env.sample_initial(env.resolve(shift), rng)


__all__ = [
    "BallCatchEnv",
    "EnvShiftSpec",
    "LavaEnv",
    "TEST_TEXTURES",
    "TrajectoryBatch",
    "ballcatch_cost",
    "ballcatch_step",
    "lava_cost",
    "lava_observe",
    "lava_step",
    "make_env",
    "render_backdrop",
    "render_scene",
    "sample_initial",
    "to_ppm",
]
