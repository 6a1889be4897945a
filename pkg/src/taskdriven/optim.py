"""Adam with bias correction, operating on named parameter blocks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .autodiff import Tensor


class NonFiniteGradientError(ArithmeticError):
    def __init__(self, block: str):
        super().__init__(f"non-finite gradient in parameter block {block!r}")
        self.block = block


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[Dict[str, np.ndarray], AdamState]:
    """One Adam update. Returns new parameter arrays and a new state; inputs are not modified.

    Blocks missing from ``grads`` are treated as having zero gradient.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown block {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"block {name!r}: gradient shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


def clip_block_norms(grads: Mapping[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    """Rescale each block independently so its L2 norm is at most ``max_norm``."""
    out = {}
    for name, g in grads.items():
        norm = float(np.sqrt(np.sum(g * g)))
        out[name] = g * (max_norm / norm) if norm > max_norm else g
    return out


class Adam:
    """Stateful wrapper that updates ``Tensor`` leaves in place."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        arrays = {k: t.data for k, t in self.params.items()}
        new, self.state = adam_step(arrays, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        for k, t in self.params.items():
            t.data = new[k]
