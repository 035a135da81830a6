"""Float64 tensors with reverse-mode automatic differentiation.

Forward ops run eagerly on numpy arrays.  When a :class:`Tape` is active
(entered as a context manager) every op whose inputs require gradients is
recorded; ``tape.backward(loss)`` then walks the records once in reverse
and accumulates gradients into the ``grad`` field of each leaf.

The op set is intentionally small and closed: matmul, add/sub, multiply,
exp, log, sigmoid, relu, softmax, layernorm, embedding gather, concat,
sum/mean reductions, cosine similarity, absolute value, reshape/transpose,
and a hard unit step with a surrogate backward pass.  The step function is
the one non-standard citizen: its forward output is exactly 0/1, while its
backward multiplies incoming gradients by a piecewise factor so that
threshold parameters sitting on the flat parts of the step still learn.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, TapeError

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "sub",
    "mul",
    "matmul",
    "exp",
    "log",
    "sigmoid",
    "relu",
    "absolute",
    "softmax",
    "layernorm",
    "embedding",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "cosine_similarity",
    "reshape",
    "transpose",
    "unit_step",
    "surrogate_factor",
    "as_tensor",
]

_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tensor:
    """A dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar so model code reads like plain numpy.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("name", "inputs", "out", "backward")

    def __init__(self, name, inputs, out, backward):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Records ops while active; replays them in reverse for gradients.

    A tape is single-use and thread-confined: enter it, run the forward
    pass, call :meth:`backward` once, then drop it.  Nested tapes are not
    supported.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.tape = None

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that
        requires gradients.  ``loss`` must be a scalar produced on this tape."""
        if self._consumed:
            raise TapeError("backward already ran on this tape; rebuild the forward pass first")
        if loss.tape is not self:
            raise TapeError("loss tensor was not produced on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
        self._consumed = True

        adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            out_grad = adjoint.pop(id(node.out), None)
            if out_grad is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward(out_grad)):
                if grad is None:
                    continue
                if tensor.tape is self:
                    key = id(tensor)
                    held = adjoint.get(key)
                    adjoint[key] = grad if held is None else held + grad
                elif tensor.requires_grad:
                    tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def _record(name: str, out_data: np.ndarray, inputs: tuple[Tensor, ...],
            backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is None:
        return out
    track = False
    for t in inputs:
        if t.tape is not None and t.tape is not tape:
            raise TapeError(f"input to {name} was produced on a different tape")
        track = track or t.requires_grad
    if track:
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append(_Node(name, inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _record("matmul", out, (a, b), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _record("exp", out, (x,), backward)


def log(x) -> Tensor:
    x = as_tensor(x)
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _record("log", out, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # Evaluate on the negative half-line only so large |x| never overflows.
    out = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                   np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (x,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (x.data > 0),)

    return _record("relu", out, (x,), backward)


def absolute(x) -> Tensor:
    x = as_tensor(x)
    out = np.abs(x.data)

    def backward(g):
        return (g * np.sign(x.data),)

    return _record("absolute", out, (x,), backward)


def softmax(x) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", out, (x,), backward)


def layernorm(x, scale, shift, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply a
    learnable elementwise scale and shift."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    d = x.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise ShapeError(
            f"layernorm: scale/shift must have shape ({d},), got {scale.shape} and {shift.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = xhat * scale.data + shift.data

    def backward(g):
        gs = g * scale.data
        gx = inv * (gs - gs.mean(axis=-1, keepdims=True)
                    - xhat * (gs * xhat).mean(axis=-1, keepdims=True))
        gscale = _unbroadcast(g * xhat, scale.shape)
        gshift = _unbroadcast(g, shift.shape)
        return gx, gscale, gshift

    return _record("layernorm", out, (x, scale, shift), backward)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (V, d) by an integer id array."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding: ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: id out of range for table with {table.shape[0]} rows "
            f"(got min {ids.min()}, max {ids.max()})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record("embedding", out, (table,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tensors, backward)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("reduce_sum", out, (x,), backward)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record("reduce_mean", out, (x,), backward)


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between two 1-D vectors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: need matching 1-D vectors, got {a.shape} and {b.shape}")
    na = np.sqrt((a.data * a.data).sum())
    nb = np.sqrt((b.data * b.data).sum())
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_similarity: zero-norm vector")
    dot = (a.data * b.data).sum()
    out = np.asarray(dot / (na * nb))

    def backward(g):
        ga = g * (b.data / (na * nb) - out * a.data / (na * na))
        gb = g * (a.data / (na * nb) - out * b.data / (nb * nb))
        return ga, gb

    return _record("cosine_similarity", out, (a, b), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _record("reshape", out, (x,), backward)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _record("transpose", out, (x,), backward)


def surrogate_factor(t: np.ndarray, estimator: str = "long_tailed") -> np.ndarray:
    """Backward-pass multiplier used in place of the step function's
    (almost-everywhere-zero) true derivative.

    ``long_tailed``: 2 - 4|t| on |t| < 0.4, then a flat tail of 0.4 from
    |t| = 0.4 out to |t| = 1 inclusive, zero beyond.  Both pieces meet at
    0.4, but the flat branch owns the seam so the value there is exactly
    0.4 in float64.  ``ste``: 1 on |t| <= 1, zero beyond.
    """
    t = np.asarray(t, dtype=np.float64)
    a = np.abs(t)
    if estimator == "long_tailed":
        return np.where(a < 0.4, 2.0 - 4.0 * a, np.where(a <= 1.0, 0.4, 0.0))
    if estimator == "ste":
        return (a <= 1.0).astype(np.float64)
    raise ValueError(f"unknown surrogate estimator: {estimator!r}")


def unit_step(x, estimator: str = "long_tailed") -> Tensor:
    """Hard threshold: 1 where x >= 0, else 0.  The backward pass scales
    incoming gradients by :func:`surrogate_factor` evaluated at x."""
    x = as_tensor(x)
    surrogate_factor(np.zeros(1), estimator)  # validate the name eagerly
    out = (x.data >= 0.0).astype(np.float64)

    def backward(g):
        return (g * surrogate_factor(x.data, estimator),)

    return _record("unit_step", out, (x,), backward)
