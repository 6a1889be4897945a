"""
Ball-catching frames under each backdrop
========================================

Writes one PPM per backdrop (training plus the seven test textures) showing
the launch state, and one with pixel noise 0.25. View with any image tool.
"""

from pathlib import Path

import numpy as np

from taskdriven.envs import TEST_TEXTURES, render_scene, to_ppm
from taskdriven.envs.ballcatch import BALL_INIT

out = Path("demos/results/frames")
out.mkdir(parents=True, exist_ok=True)

state = np.array([0.0, *BALL_INIT])
for texture in ("training", *TEST_TEXTURES):
    img = render_scene(state, texture, 64)[0]
    (out / f"{texture}.ppm").write_bytes(to_ppm(img))

noise = np.random.default_rng(0).standard_normal((1, 3, 64, 64))
noisy = render_scene(state, "training", 64, noise, 0.25)[0]
(out / "training-noise-0.25.ppm").write_bytes(to_ppm(noisy))
print(f"wrote {len(TEST_TEXTURES) + 2} frames to {out}")
