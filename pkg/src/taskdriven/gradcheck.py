"""Central finite-difference checks for :mod:`taskdriven.autodiff`."""

from __future__ import annotations

from typing import Callable, Dict, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-8)
    return float(np.linalg.norm(a - b)) / scale


def check_gradients(build: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between analytic and numerical gradients over all inputs.

    ``build`` maps leaf tensors to a scalar loss; it is re-run for every
    finite-difference evaluation.
    """
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    loss = build(leaves)
    analytic = ad.grad_of(loss, leaves)

    def value() -> float:
        with ad.no_grad():
            return float(build(leaves).data)

    return max(relative_error(g, numerical_gradient(value, leaf.data, h)) for g, leaf in zip(analytic, leaves))


def check_blocks(loss: Callable[[], Tensor], blocks: Mapping[str, Tensor], h: float = 1e-5) -> Dict[str, float]:
    """Per-block relative error for parameters that live inside a network.

    ``loss`` closes over the network; each block's array is perturbed in place.
    """
    analytic = ad.grad_of(loss(), blocks.values())

    def value() -> float:
        with ad.no_grad():
            return float(loss().data)

    return {name: relative_error(g, numerical_gradient(value, t.data, h)) for g, (name, t) in zip(analytic, blocks.items())}


def check_directional(loss: Callable[[], Tensor], blocks: Mapping[str, Tensor], rng: np.random.Generator, h: float = 1e-5) -> Dict[str, float]:
    """Like :func:`check_blocks` but along one random unit direction per block.

    Two loss evaluations per block instead of two per scalar, which makes
    repeated trials on whole networks affordable.
    """
    analytic = ad.grad_of(loss(), blocks.values())
    out = {}
    for g, (name, t) in zip(analytic, blocks.items()):
        v = rng.standard_normal(t.data.shape)
        v /= max(float(np.linalg.norm(v)), 1e-300)
        base = t.data.copy()
        with ad.no_grad():
            t.data[...] = base + h * v
            up = float(loss().data)
            t.data[...] = base - h * v
            down = float(loss().data)
        t.data[...] = base
        a, n = float(np.sum(g * v)), (up - down) / (2 * h)
        out[name] = abs(a - n) / max(abs(a), abs(n), 1e-8)
    return out
