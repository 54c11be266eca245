"""Fixed-rank broadcastable tensors with a reverse-mode gradient tape.

Every value in the engine lives on five named axes (case, class, time,
point, feature).  Broadcasting follows the usual rule: per axis, extents
must match or one of them must be 1.  Gradients for broadcast axes
accumulate by summation.

The tape is define-by-run: primitives executed while a ``Tape`` is active
append themselves in execution order, and ``Tape.backward`` replays that
record in reverse.  Tensors created outside an active tape evaluate
eagerly with no bookkeeping, which is how inference-only forwards run.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable

import numpy as np

AXES = ("case", "class", "time", "point", "feature")
RANK = 5

Shape5 = tuple[int, int, int, int, int]


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are not broadcast-compatible."""


class TapeError(RuntimeError):
    """Raised on tape misuse (nested tapes, non-scalar loss, ...)."""


def broadcast_shape(a: Shape5, b: Shape5) -> Shape5:
    """Joint shape of two broadcast-compatible shapes.

    Raises ShapeMismatchError naming the first offending axis.
    """
    dims = []
    for i, (x, y) in enumerate(zip(a, b)):
        if x == y or x == 1 or y == 1:
            dims.append(max(x, y))
        else:
            raise ShapeMismatchError(
                f"axis '{AXES[i]}' (index {i}): extents {x} and {y} "
                f"are not broadcast-compatible for shapes {a} and {b}"
            )
    return tuple(dims)  # type: ignore[return-value]


def unbroadcast(grad: np.ndarray, shape: Shape5) -> np.ndarray:
    """Sum-reduce a joint-shape gradient back onto an operand's shape."""
    axes = tuple(i for i in range(RANK) if shape[i] == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


_ACTIVE = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_ACTIVE, "tape", None)


class Tensor5:
    """A 64-bit float array on the fixed (case, class, time, point, feature) axes."""

    __slots__ = ("values", "grad")

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != RANK:
            raise ShapeMismatchError(
                f"Tensor5 requires rank {RANK}, got rank {arr.ndim} with shape {arr.shape}"
            )
        if arr.size == 0:
            raise ShapeMismatchError(f"every axis extent must be >= 1, got {arr.shape}")
        self.values = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> Shape5:
        return self.values.shape  # type: ignore[return-value]

    @classmethod
    def scalar(cls, x: float) -> "Tensor5":
        return cls(np.full((1, 1, 1, 1, 1), float(x)))

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeMismatchError(f"item() needs a single element, shape is {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor5(shape={self.shape})"

    def __mul__(self, other: "Tensor5") -> "Tensor5":
        return broadcast_mul(self, other)

    def __add__(self, other: "Tensor5") -> "Tensor5":
        return broadcast_add(self, other)

    def __sub__(self, other: "Tensor5") -> "Tensor5":
        return broadcast_sub(self, other)


class Param:
    """A trainable array (weight matrix or bias vector) tracked by the tape."""

    __slots__ = ("values", "grad")

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self) -> str:
        return f"Param(shape={self.values.shape})"


def _accumulate(node: "Tensor5 | Param", grad: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.values)
    node.grad += grad


class Tape:
    """Execution-ordered record of primitives; replaying it in reverse is backprop.

    Single-owner: one tape may be active per thread, and a tape must not be
    shared across concurrent executions.  Entering the context manager makes
    the tape active so primitives record onto it.
    """

    def __init__(self):
        self._ops: list[Callable[[], None]] = []
        self._nodes: list[Tensor5 | Param] = []

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise TapeError("a tape is already active in this thread")
        _ACTIVE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.tape = None
        return False

    def record(self, nodes: Iterable["Tensor5 | Param"], backward_fn: Callable[[], None]) -> None:
        self._ops.append(backward_fn)
        self._nodes.extend(nodes)

    def backward(self, loss: Tensor5) -> dict:
        """Accumulate gradients of a scalar loss into every recorded node.

        Returns a map from node object to its gradient array.  The tape is
        cleared afterwards and cannot be replayed.
        """
        if loss.shape != (1, 1, 1, 1, 1):
            raise TapeError(f"backward needs a scalar loss of shape (1,1,1,1,1), got {loss.shape}")
        loss.grad = np.ones((1, 1, 1, 1, 1))
        for fn in reversed(self._ops):
            fn()
        grads = {node: node.grad for node in self._nodes if node.grad is not None}
        self._ops.clear()
        self._nodes.clear()
        return grads


def _record(nodes, backward_fn) -> None:
    tape = active_tape()
    if tape is not None:
        tape.record(nodes, backward_fn)


def broadcast_mul(a: Tensor5, b: Tensor5) -> Tensor5:
    """Element-wise product with broadcasting over all five axes."""
    broadcast_shape(a.shape, b.shape)
    out = Tensor5(a.values * b.values)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, unbroadcast(out.grad * b.values, a.shape))
        _accumulate(b, unbroadcast(out.grad * a.values, b.shape))

    _record((a, b, out), backward)
    return out


def broadcast_add(a: Tensor5, b: Tensor5) -> Tensor5:
    broadcast_shape(a.shape, b.shape)
    out = Tensor5(a.values + b.values)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, unbroadcast(out.grad, a.shape))
        _accumulate(b, unbroadcast(out.grad, b.shape))

    _record((a, b, out), backward)
    return out


def broadcast_sub(a: Tensor5, b: Tensor5) -> Tensor5:
    broadcast_shape(a.shape, b.shape)
    out = Tensor5(a.values - b.values)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, unbroadcast(out.grad, a.shape))
        _accumulate(b, unbroadcast(-out.grad, b.shape))

    _record((a, b, out), backward)
    return out


def scale(x: Tensor5, c: float) -> Tensor5:
    out = Tensor5(x.values * c)

    def backward():
        if out.grad is None:
            return
        _accumulate(x, out.grad * c)

    _record((x, out), backward)
    return out


def affine(x: Tensor5, weight: "Param | np.ndarray", bias: "Param | np.ndarray") -> Tensor5:
    """Affine map contracting the feature axis only: y[..., o] = W[o, :] . x[..., :] + b[o].

    All non-feature axes are preserved.  ``weight`` is (out, in), ``bias`` is (out,).
    """
    w = weight.values if isinstance(weight, Param) else np.asarray(weight, dtype=np.float64)
    b = bias.values if isinstance(bias, Param) else np.asarray(bias, dtype=np.float64)
    n_out, n_in = w.shape
    if x.shape[4] != n_in:
        raise ShapeMismatchError(
            f"feature-extent mismatch: input has {x.shape[4]} features, weight expects {n_in}"
        )
    out = Tensor5(x.values @ w.T + b)

    nodes = [x, out]
    if isinstance(weight, Param):
        nodes.append(weight)
    if isinstance(bias, Param):
        nodes.append(bias)

    def backward():
        g = out.grad
        if g is None:
            return
        _accumulate(x, g @ w)
        if isinstance(weight, Param):
            g2 = g.reshape(-1, n_out)
            x2 = x.values.reshape(-1, n_in)
            _accumulate(weight, g2.T @ x2)
        if isinstance(bias, Param):
            _accumulate(bias, g.sum(axis=(0, 1, 2, 3)).reshape(n_out))

    _record(nodes, backward)
    return out


_LEAKY_SLOPE = 0.01
ACTIVATIONS = ("tanh", "leaky_relu")


def activation(x: Tensor5, kind: str) -> Tensor5:
    """Element-wise nonlinearity: tanh or leaky ReLU (slope 0.01 for x < 0)."""
    if kind == "tanh":
        out = Tensor5(np.tanh(x.values))

        def backward():
            if out.grad is None:
                return
            _accumulate(x, out.grad * (1.0 - out.values * out.values))

    elif kind == "leaky_relu":
        out = Tensor5(np.where(x.values < 0.0, _LEAKY_SLOPE * x.values, x.values))

        def backward():
            if out.grad is None:
                return
            _accumulate(x, out.grad * np.where(x.values < 0.0, _LEAKY_SLOPE, 1.0))

    else:
        raise ValueError(f"unknown activation kind {kind!r}, expected one of {ACTIVATIONS}")

    _record((x, out), backward)
    return out


def sum_all(x: Tensor5) -> Tensor5:
    out = Tensor5.scalar(x.values.sum())

    def backward():
        if out.grad is None:
            return
        _accumulate(x, np.broadcast_to(out.grad, x.shape))

    _record((x, out), backward)
    return out


def mean_all(x: Tensor5) -> Tensor5:
    n = x.values.size
    out = Tensor5.scalar(x.values.mean())

    def backward():
        if out.grad is None:
            return
        _accumulate(x, np.broadcast_to(out.grad / n, x.shape))

    _record((x, out), backward)
    return out


def grad_check(f: Callable[[Tensor5], Tensor5], x: Tensor5, eps: float = 1e-5) -> float:
    """Worst per-coordinate relative error between reverse-mode and central differences.

    The relative error denominator is max(|analytic|, |numeric|, 1e-12).
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    with Tape() as tape:
        leaf = Tensor5(x.values.copy())
        loss = f(leaf)
        tape.backward(loss)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values)

    worst = 0.0
    base = x.values.copy()
    for idx in np.ndindex(*x.shape):
        bumped = base.copy()
        bumped[idx] = base[idx] + eps
        f_plus = f(Tensor5(bumped)).item()
        bumped[idx] = base[idx] - eps
        f_minus = f(Tensor5(bumped)).item()
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[idx]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, rel)
    return worst


def fd_gradient(f: Callable[[np.ndarray], float], values: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat parameter array."""
    base = np.asarray(values, dtype=np.float64)
    grad = np.zeros_like(base)
    for idx in np.ndindex(*base.shape):
        bumped = base.copy()
        bumped[idx] = base[idx] + eps
        f_plus = f(bumped)
        bumped[idx] = base[idx] - eps
        f_minus = f(bumped)
        grad[idx] = (f_plus - f_minus) / (2.0 * eps)
    return grad
