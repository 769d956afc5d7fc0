"""Dense tensors with reverse-mode automatic differentiation.

Each operation builds a node holding references to its inputs and a closure
mapping the output gradient to input gradients. ``Tensor.backward`` walks the
recorded graph in reverse topological order, visiting every node once, and
accumulates into the ``grad`` buffer of leaf tensors that require gradients.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BatchSizeError, DimensionError, NonFiniteError, RankError

DEFAULT_DTYPE = np.float64

_debug = False
_grad_enabled = True
_relu_recorder: Optional[list] = None


def set_debug(flag: bool) -> None:
    """Turn on NaN/Inf checks after every operation."""
    global _debug
    _debug = bool(flag)


def is_debug() -> bool:
    return _debug


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_relu_masks():
    """Collect the activation mask of every relu evaluated inside the block."""
    global _relu_recorder
    prev = _relu_recorder
    masks: list = []
    _relu_recorder = masks
    try:
        yield masks
    finally:
        _relu_recorder = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            dtype = data.dtype
        else:
            dtype = DEFAULT_DTYPE
    return np.array(data, dtype=dtype, copy=True)


class Tensor:
    """A real array with an optional gradient buffer.

    ``frozen`` marks parameters an optimizer must never touch; freezing also
    clears ``requires_grad`` so no gradient is accumulated for them, while
    gradients still flow *through* them to their inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "frozen", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.frozen = False
        self.name = name
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        if _debug:
            _check_finite(self.data, "leaf")

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
        if _debug:
            _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.frozen = False
        out.name = None
        out.op = op
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad}{tag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Backpropagate from this scalar, accumulating into leaf ``grad`` buffers."""
        if self.ndim != 0:
            raise RankError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, other)
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -other)
        return sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` through gradient-carrying edges, inputs first."""
    order: list = []
    seen = set()
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def _broadcast_side(a: Tensor, b: Tensor, opname: str) -> Optional[str]:
    if a.shape == b.shape:
        return None
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return "b"
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return "a"
    raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, side: Optional[str], which: str) -> np.ndarray:
    return g.sum(axis=0) if side == which else g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    side = _broadcast_side(a, b, "add")

    def backward(g):
        return _unbroadcast(g, side, "a"), _unbroadcast(g, side, "b")

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    side = _broadcast_side(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, side, "a"), -_unbroadcast(g, side, "b")

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    side = _broadcast_side(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, side, "a"), _unbroadcast(g * a.data, side, "b")

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"div: incompatible shapes {a.shape} and {b.shape}")
    out = a.data / b.data

    def backward(g):
        return g / b.data, -g * out / b.data

    return Tensor._from_op(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def shift(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data + c, (a,), lambda g: (g,), "shift")


def square(a: Tensor) -> Tensor:
    return Tensor._from_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        # sqrt is not differentiable at 0; use the zero subgradient there
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return Tensor._from_op(out, (a,), backward, "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    out = np.sum(a.data, axis=axis)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, g, dtype=a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    out = np.mean(a.data, axis=axis)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, g / count, dtype=a.dtype),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), backward, "mean")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _relu_recorder is not None:
        _relu_recorder.append(mask)
    out = np.where(mask, a.data, 0.0).astype(a.dtype, copy=False)
    return Tensor._from_op(out, (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return Tensor._from_op(a.data.T.copy(), (a,), lambda g: (g.T.copy(),), "transpose")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` as one node; weight is stored ``out x in``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input shape {x.shape} does not match weight shape {weight.shape}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "linear")


def take_along_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``a[i, index[i]]`` for every row ``i``."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise DimensionError(f"take_along_rows: shape {a.shape} with index shape {index.shape}")
    rows = np.arange(a.shape[0])

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return Tensor._from_op(a.data[rows, index], (a,), backward, "take")


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(o: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilised by max subtraction."""
    shifted = o.data - o.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(p, (o,), backward, "softmax")


def log_softmax(o: Tensor) -> Tensor:
    shifted = o.data - o.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor._from_op(out, (o,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics of a 1-D batch-normalization layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, width: int, momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        return cls(np.zeros(width, dtype=dtype), np.ones(width, dtype=dtype), momentum, eps)


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
) -> Tensor:
    """Normalize each column of ``x``.

    Training mode uses the biased batch variance for normalization and folds
    the unbiased variance into the running estimate.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"batchnorm1d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    n = x.shape[0]
    eps = state.eps
    if training:
        if n < 2:
            raise BatchSizeError(f"batchnorm1d in train mode needs at least 2 rows, got {n}")
        mu = x.data.mean(axis=0)
        centered = x.data - mu
        var = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * var * (n / (n - 1))

        def backward(g):
            dxhat = g * gamma.data
            dx = (inv_std / n) * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    else:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean) * inv_std

        def backward(g):
            return g * gamma.data * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0)

    out = xhat * gamma.data + beta.data
    return Tensor._from_op(out, (x, gamma, beta), backward, "batchnorm1d")


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[Tensor], Tensor], point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(Tensor(x)).item()
            flat[i] = orig - h
            fm = fn(Tensor(x)).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def _near_kink(fn, x: np.ndarray, i: int, delta: float) -> bool:
    flat = x.reshape(-1)
    orig = flat[i]
    with no_grad():
        flat[i] = orig + delta
        with record_relu_masks() as hi:
            fn(Tensor(x))
        flat[i] = orig - delta
        with record_relu_masks() as lo:
            fn(Tensor(x))
    flat[i] = orig
    return any(not np.array_equal(a, b) for a, b in zip(hi, lo))


def finite_diff_check(
    fn: Callable[[Tensor], Tensor],
    point,
    h: float = 1e-5,
    kink_margin: float = 1e-3,
) -> float:
    """Max relative error between autodiff and central differences.

    Coordinates whose perturbation by ``kink_margin`` flips any relu
    activation are skipped. The relative error uses ``max(|g|, 1e-8)`` as the
    denominator.
    """
    x = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    leaf = Tensor(x, requires_grad=True)
    fn(leaf).backward()
    analytic = np.zeros_like(x) if leaf.grad is None else leaf.grad
    numeric = numerical_gradient(fn, x, h)
    worst = 0.0
    a_flat, n_flat = analytic.reshape(-1), numeric.reshape(-1)
    for i in range(a_flat.size):
        if kink_margin > 0 and _near_kink(fn, x, i, kink_margin):
            continue
        err = abs(n_flat[i] - a_flat[i]) / max(abs(a_flat[i]), 1e-8)
        worst = max(worst, err)
    return worst


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


__all__ = [
    "Tensor",
    "BatchNormState",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "shift",
    "square",
    "sqrt",
    "exp",
    "log",
    "tsum",
    "mean",
    "relu",
    "matmul",
    "transpose",
    "linear",
    "take_along_rows",
    "softmax",
    "log_softmax",
    "batchnorm1d",
    "finite_diff_check",
    "numerical_gradient",
    "no_grad",
    "set_debug",
    "record_relu_masks",
    "topological_order",
    "zero_grads",
]
