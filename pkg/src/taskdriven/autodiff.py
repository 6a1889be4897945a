"""Minimal define-by-run reverse-mode differentiation over float64 numpy arrays.

Only the operations needed by the policy, encoder and critic networks are
provided. Binary elementwise operations accept equal shapes or a size-1
operand; any other broadcasting goes through an explicit op (``linear``).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

LOG_2PI = float(np.log(2.0 * np.pi))


class ContractViolation(ValueError):
    """Raised when an operation is called with arguments outside its contract."""


class NumericalDomainError(ArithmeticError):
    """Raised when an input leaves the domain of a function (e.g. log of 0)."""

    def __init__(self, message: str, index: Tuple[int, ...]):
        super().__init__(f"{message} at index {index}")
        self.index = index


class GraphConsumedError(ContractViolation):
    """Raised when ``backward`` is called a second time on the same graph."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph edges (rollouts, evaluation)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense float64 array with an optional gradient slot and graph edge."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_consumed", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = name or "leaf"
        self._consumed = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> Dict["Tensor", np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _fail_item(t: Tensor) -> float:
    raise ContractViolation(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data, name=op)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} differ and neither is a scalar")


def _reduce_to(grad: np.ndarray, like: Tensor) -> np.ndarray:
    """Collapse a gradient back onto a size-1 operand that was broadcast."""
    if grad.shape == like.shape:
        return grad
    return np.full(like.shape, grad.sum())


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)),
        "mul",
    )


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    bad = ~(x.data > 0)
    if bad.any():
        idx = tuple(int(i) for i in np.unravel_index(int(np.argmax(bad)), x.shape)) if x.ndim else ()
        raise NumericalDomainError("log of non-positive value", idx)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def elu(x) -> Tensor:
    x = as_tensor(x)
    neg_part = np.expm1(np.minimum(x.data, 0.0))
    pos = x.data >= 0
    out = np.where(pos, x.data, neg_part)
    return _make(out, (x,), lambda g: (g * np.where(pos, 1.0, neg_part + 1.0),), "elu")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where the clip is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


_UNARY = {"neg": neg, "exp": exp, "log": log, "tanh": tanh, "elu": elu, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, x, y=None) -> Tensor:
    """Dispatch by tag. ``scale-by-constant`` takes the constant as ``y``."""
    if op in _UNARY:
        return _UNARY[op](x)
    if op in _BINARY:
        if y is None:
            raise ContractViolation(f"{op} needs two operands")
        return _BINARY[op](x, y)
    if op in ("scale", "scale-by-constant"):
        return scale(x, y)
    raise ContractViolation(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` with ``b`` added to every row of ``x @ w``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ContractViolation(f"linear: bad shapes x{x.shape} w{w.shape} b{b.shape}")
    return _make(
        x.data @ w.data + b.data,
        (x, w, b),
        lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)),
        "linear",
    )


# ---------------------------------------------------------------------------
# reductions


def _normalize_axis(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ContractViolation(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def _expand(g: np.ndarray, shape: Tuple[int, ...], axes: Tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes) if axes else g
    return np.broadcast_to(g, shape)


def reduce(op: str, x, axis=None, keepdims: bool = False) -> Tensor:
    """Reduce with ``sum``, ``mean``, ``log-sum-exp`` (alias ``logsumexp``) or ``max``."""
    x = as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    if any(x.shape[a] == 0 for a in axes) or x.size == 0:
        raise ContractViolation(f"{op}: empty reduction axis for shape {x.shape}")
    shape = x.shape
    if op == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        return _make(out, (x,), lambda g: (_expand(g, shape, axes, keepdims).copy(),), "sum")
    if op == "mean":
        n = int(np.prod([shape[a] for a in axes]))
        out = x.data.mean(axis=axes, keepdims=keepdims)
        return _make(out, (x,), lambda g: (_expand(g, shape, axes, keepdims) / n,), "mean")
    if op in ("logsumexp", "log-sum-exp"):
        m = x.data.max(axis=axes, keepdims=True)
        shifted = np.exp(x.data - m)
        total = shifted.sum(axis=axes, keepdims=True)
        out_k = m + np.log(total)
        weights = shifted / total
        out = out_k if keepdims else np.squeeze(out_k, axis=axes)
        return _make(out, (x,), lambda g: (_expand(g, shape, axes, keepdims) * weights,), "logsumexp")
    if op == "max":
        m = x.data.max(axis=axes, keepdims=True)
        hit = x.data == m
        # ties split the gradient evenly
        share = hit / hit.sum(axis=axes, keepdims=True)
        out = m if keepdims else np.squeeze(m, axis=axes)
        return _make(out, (x,), lambda g: (_expand(g, shape, axes, keepdims) * share,), "max")
    raise ContractViolation(f"unknown reduction {op!r}")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return reduce("sum", x, axis, keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", x, axis, keepdims)


def logsumexp(x, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("logsumexp", x, axis, keepdims)


def log_mean_exp(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = int(np.prod([x.shape[a] for a in _normalize_axis(axis, x.ndim)]))
    return sub(logsumexp(x, axis), float(np.log(n)))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ContractViolation(f"reshape: {old} -> {shape}: {err}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractViolation("concat of nothing")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise ContractViolation(f"concat: {err}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, back, "concat")


def take(x, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate in the backward pass."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape
    out = np.take(x.data, index, axis=axis)

    def back(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(out, (x,), back, "take")


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def conv2d(x, kernels, stride: int = 1, bias=None) -> Tensor:
    """Valid (unpadded) cross-correlation.

    Args:
        x: input of shape ``C_in x H x W`` or a batch ``N x C_in x H x W``.
        kernels: ``C_out x C_in x k x k``.
        stride: positive step between windows.
        bias: optional ``C_out`` vector added per output channel.

    Returns:
        Tensor of shape ``[N x] C_out x H' x W'`` with ``H' = (H - k) // stride + 1``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise ContractViolation(f"conv2d: stride must be positive, got {stride}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.ndim != 4 or kernels.shape[1] != xd.shape[1] or kernels.shape[2] != kernels.shape[3]:
        raise ContractViolation(f"conv2d: bad shapes input {x.shape} kernels {kernels.shape}")
    n, c_in, h, w = xd.shape
    c_out, _, k, _ = kernels.shape
    if k > h or k > w:
        raise ContractViolation(f"conv2d: kernel {k} larger than input {h}x{w}")
    ho, wo = conv_output_size(h, k, stride), conv_output_size(w, k, stride)
    windows = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # windows: n, c_in, ho, wo, k, k
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * k * k)
    kmat = kernels.data.reshape(c_out, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    parents: Tuple[Tensor, ...] = (x, kernels)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ContractViolation(f"conv2d: bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data[None, :, None, None]
        parents = parents + (bias,)
    if single:
        out = out[0]

    def back(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gk = (gmat.T @ cols).reshape(kernels.shape)
        gcols = (gmat @ kmat).reshape(n, ho, wo, c_in, k, k)
        gx = np.zeros_like(xd)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grads = [gx[0] if single else gx, gk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, back, "conv2d")


# ---------------------------------------------------------------------------
# distributions


def gaussian_logprob(x, mean_, log_std) -> Tensor:
    """Diagonal Gaussian log-density, summed over the last axis."""
    x, mean_, log_std = as_tensor(x), as_tensor(mean_), as_tensor(log_std)
    if not (x.shape == mean_.shape == log_std.shape):
        raise ContractViolation(f"gaussian_logprob: shapes {x.shape}, {mean_.shape}, {log_std.shape} differ")
    inv_std = np.exp(-log_std.data)
    z = (x.data - mean_.data) * inv_std
    out = (-log_std.data - 0.5 * LOG_2PI - 0.5 * z * z).sum(axis=-1)

    def back(g):
        ge = g[..., None]
        dx = -z * inv_std * ge
        return (dx, -dx, (z * z - 1.0) * ge)

    return _make(out, (x, mean_, log_std), back, "gaussian_logprob")


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Returns a map from leaf tensor to the gradient contributed by this call.
    A second call on the same loss raises GraphConsumedError.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward already called on this graph; rebuild it with a new forward pass")
    loss._consumed = True
    if not loss.requires_grad:
        return {}
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = leaves[node] + g if node in leaves else g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = np.array(pg, dtype=np.float64)
    return leaves


def grad_of(loss: Tensor, params: Iterable[Tensor]) -> list:
    """Gradients of ``loss`` for ``params`` (zeros where unreachable); params' slots are reset first."""
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
