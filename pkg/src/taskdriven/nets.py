"""Encoder (TRV), controller and critic networks built on :mod:`taskdriven.autodiff`.

Both policy networks emit a diagonal Gaussian: a mean head and a log-std head
sharing one trunk. The encoder additionally receives the previous TRV vector,
concatenated after any convolutional feature extractor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor

MIN_LOG_STD = -5.0
MAX_LOG_STD = 2.0

_ACTIVATIONS = {"elu": ad.elu, "tanh": ad.tanh, "none": lambda x: x}


class NonFiniteOutputError(ArithmeticError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite output from layer {layer!r}")
        self.layer = layer


def _uniform(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Dense:
    weight: Tensor
    bias: Tensor
    activation: str = "none"

    @classmethod
    def init(cls, rng, n_in: int, n_out: int, activation: str = "none") -> "Dense":
        return cls(Tensor(_uniform(rng, n_in, (n_in, n_out)), requires_grad=True), Tensor(np.zeros(n_out), requires_grad=True), activation)

    def __call__(self, x: Tensor) -> Tensor:
        return _ACTIVATIONS[self.activation](ad.linear(x, self.weight, self.bias))

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]


@dataclass
class Conv:
    kernels: Tensor
    bias: Tensor
    stride: int
    activation: str = "none"

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, k: int, stride: int, activation: str = "none") -> "Conv":
        fan_in = c_in * k * k
        return cls(
            Tensor(_uniform(rng, fan_in, (c_out, c_in, k, k)), requires_grad=True),
            Tensor(np.zeros(c_out), requires_grad=True),
            stride,
            activation,
        )

    def __call__(self, x: Tensor) -> Tensor:
        return _ACTIVATIONS[self.activation](ad.conv2d(x, self.kernels, self.stride, self.bias))


def _check_finite(t: Tensor, layer: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteOutputError(layer)
    return t


class GaussianNet:
    """Maps ``(obs, previous TRV)`` to the mean and clamped log-std of a diagonal Gaussian.

    ``convs`` run on image observations of shape ``N x C x H x W``; their
    flattened output (or the raw observation when there are no convs) is
    concatenated with the conditioning vector before the dense trunk.
    """

    def __init__(
        self,
        convs: Sequence[Conv],
        trunk: Sequence[Dense],
        mean_head: Dense,
        log_std_head: Dense,
        cond_dim: int = 0,
        min_log_std: float = MIN_LOG_STD,
        max_log_std: float = MAX_LOG_STD,
    ):
        self.convs = list(convs)
        self.trunk = list(trunk)
        self.mean_head = mean_head
        self.log_std_head = log_std_head
        self.cond_dim = cond_dim
        self.min_log_std = min_log_std
        self.max_log_std = max_log_std

    @property
    def out_dim(self) -> int:
        return self.mean_head.weight.shape[1]

    def blocks(self, prefix: str) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for i, layer in enumerate([*self.convs, *self.trunk]):
            w = layer.kernels if isinstance(layer, Conv) else layer.weight
            out[f"{prefix}/layer{i}/weight"] = w
            out[f"{prefix}/layer{i}/bias"] = layer.bias
        for head, tag in ((self.mean_head, "mean"), (self.log_std_head, "log_std")):
            out[f"{prefix}/{tag}/weight"] = head.weight
            out[f"{prefix}/{tag}/bias"] = head.bias
        return out

    def features(self, obs: Tensor, cond: Optional[Tensor] = None) -> Tensor:
        h = obs
        for i, conv in enumerate(self.convs):
            h = _check_finite(conv(h), f"conv{i}")
        if self.convs:
            h = ad.reshape(h, (h.shape[0], -1))
        if self.cond_dim:
            if cond is None or cond.shape[-1] != self.cond_dim:
                raise ContractViolation(f"expected a conditioning input of width {self.cond_dim}")
            h = ad.concat([h, cond], axis=1)
        if h.shape[1] != (self.trunk[0].n_in if self.trunk else self.mean_head.n_in):
            raise ContractViolation(f"input width {h.shape[1]} does not match the network")
        for i, layer in enumerate(self.trunk):
            h = _check_finite(layer(h), f"dense{i}")
        return h

    def __call__(self, obs: Tensor, cond: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        h = self.features(obs, cond)
        mean = _check_finite(self.mean_head(h), "mean")
        log_std = ad.clamp(_check_finite(self.log_std_head(h), "log_std"), self.min_log_std, self.max_log_std)
        return mean, log_std


def sample_gaussian(
    net: GaussianNet,
    obs: Tensor,
    cond: Optional[Tensor] = None,
    rng: Optional[np.random.Generator] = None,
    eps: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Tensor, np.ndarray]:
    """Reparameterized draw ``mean + exp(log_std) * eps``.

    Returns the sample, its log-density under the emitted Gaussian and the
    standard-normal noise used. Pass ``eps`` to replay stored noise.
    """
    mean, log_std = net(obs, cond)
    if eps is None:
        if rng is None:
            raise ContractViolation("sample_gaussian needs either rng or eps")
        eps = rng.standard_normal(mean.shape)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mean.shape:
        raise ContractViolation(f"noise shape {eps.shape} != {mean.shape}")
    sample = ad.add(mean, ad.mul(ad.exp(log_std), Tensor(eps)))
    logp = ad.gaussian_logprob(Tensor(sample.data), mean, log_std)
    return sample, logp, eps


class MineCritic:
    """Scalar critic on concatenated (state, TRV) pairs."""

    def __init__(self, layers: Sequence[Dense]):
        self.layers = list(layers)

    @classmethod
    def init(cls, rng, state_dim: int, trv_dim: int, hidden: int) -> "MineCritic":
        n_in = state_dim + trv_dim
        return cls([Dense.init(rng, n_in, hidden, "elu"), Dense.init(rng, hidden, hidden, "elu"), Dense.init(rng, hidden, 1)])

    @property
    def in_dim(self) -> int:
        return self.layers[0].n_in

    def blocks(self, prefix: str) -> Dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}/layer{i}/weight"] = layer.weight
            out[f"{prefix}/layer{i}/bias"] = layer.bias
        return out

    def __call__(self, state: Tensor, trv: Tensor) -> Tensor:
        h = ad.concat([state, trv], axis=1)
        for layer in self.layers:
            h = layer(h)
        return ad.reshape(h, (h.shape[0],))


@dataclass
class PolicyParams:
    """Encoder and controller networks, one copy per timestep when time-varying."""

    q: List[GaussianNet]
    pi: List[GaussianNet]
    time_varying: bool
    horizon: int
    meta: Dict[str, object] = field(default_factory=dict)

    def q_at(self, t: int) -> GaussianNet:
        return self.q[t] if self.time_varying else self.q[0]

    def pi_at(self, t: int) -> GaussianNet:
        return self.pi[t] if self.time_varying else self.pi[0]

    @property
    def trv_dim(self) -> int:
        return self.q[0].out_dim

    @property
    def action_dim(self) -> int:
        return self.pi[0].out_dim

    def blocks(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for tag, nets in (("q", self.q), ("pi", self.pi)):
            for t, net in enumerate(nets):
                out.update(net.blocks(f"{tag}/t{t}" if self.time_varying else tag))
        return out

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.blocks().items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        blocks = self.blocks()
        if set(arrays) != set(blocks):
            missing = sorted(set(blocks) - set(arrays))
            extra = sorted(set(arrays) - set(blocks))
            raise ContractViolation(f"checkpoint blocks do not match network (missing {missing[:3]}, extra {extra[:3]})")
        for k, t in blocks.items():
            if arrays[k].shape != t.shape:
                raise ContractViolation(f"block {k}: shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    def n_params(self) -> int:
        return int(np.sum([t.size for t in self.blocks().values()]))


def _mlp_gaussian(rng, n_in: int, hidden: Sequence[int], out_dim: int, activation: str, cond_dim: int = 0, convs=()) -> GaussianNet:
    trunk, width = [], n_in
    for h in hidden:
        trunk.append(Dense.init(rng, width, h, activation))
        width = h
    return GaussianNet(convs, trunk, Dense.init(rng, width, out_dim), Dense.init(rng, width, out_dim), cond_dim=cond_dim)


def build_lava_nets(
    rng: np.random.Generator,
    trv_dim: int = 2,
    horizon: int = 5,
    obs_dim: int = 2,
    action_dim: int = 1,
    hidden: int = 64,
    time_varying: bool = True,
) -> PolicyParams:
    if trv_dim < 1:
        raise ContractViolation("trv_dim must be at least 1")
    copies = horizon if time_varying else 1
    q = [_mlp_gaussian(rng, obs_dim + trv_dim, (hidden, hidden), trv_dim, "elu", cond_dim=trv_dim) for _ in range(copies)]
    pi = [_mlp_gaussian(rng, trv_dim, (hidden, hidden), action_dim, "elu") for _ in range(copies)]
    return PolicyParams(q, pi, time_varying, horizon, {"env": "lava", "obs_dim": obs_dim})


def ballcatch_feature_size(image_size: int) -> int:
    s = ad.conv_output_size(image_size, 4, 2)
    s = ad.conv_output_size(s, 4, 2) if s >= 4 else 0
    if s < 1:
        raise ContractViolation(f"image size {image_size} too small for two k=4 stride-2 convolutions")
    return s


def build_ballcatch_nets(
    rng: np.random.Generator,
    image_size: int = 16,
    trv_dim: int = 8,
    horizon: int = 25,
    hidden: int = 32,
    channels: int = 6,
) -> PolicyParams:
    s = ballcatch_feature_size(image_size)
    convs = [Conv.init(rng, 3, channels, 4, 2, "elu"), Conv.init(rng, channels, channels, 4, 2)]
    q = _mlp_gaussian(rng, channels * s * s + trv_dim, (hidden, hidden), trv_dim, "tanh", cond_dim=trv_dim, convs=convs)
    pi = _mlp_gaussian(rng, trv_dim, (), 1, "none")
    return PolicyParams([q], [pi], False, horizon, {"env": "ballcatch", "image_size": image_size})


def build_mine_critics(rng: np.random.Generator, state_dim: int, trv_dim: int, horizon: int, hidden: int) -> List[MineCritic]:
    return [MineCritic.init(rng, state_dim, trv_dim, hidden) for _ in range(horizon)]


def critic_blocks(critics: Sequence[MineCritic]) -> Dict[str, Tensor]:
    out = {}
    for t, c in enumerate(critics):
        out.update(c.blocks(f"mine/t{t}"))
    return out
