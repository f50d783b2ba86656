"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. While a ``Tape`` is active, every
differentiable operation appends a node (output reference + vector-Jacobian
closure) to it in execution order; ``backward_accumulate`` replays the nodes
in reverse, summing gradients into ``Tensor.grad``. Without an active tape
the same functions are plain numpy computations, which is what evaluation
mode uses.

Training runs in float32; gradient checks build float64 graphs. Summation
order inside every op is fixed, so repeated runs on the same inputs produce
bitwise-identical forwards and gradients.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ShapeError",
    "AutodiffError",
    "active_tape",
    "backward_accumulate",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "tensor_sum",
    "tensor_mean",
    "concat",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class AutodiffError(RuntimeError):
    """Raised on tape misuse (empty tape, non-scalar loss, ...)."""


class Tensor:
    """A dense n-dimensional array of real values.

    ``data`` is treated as immutable once the tensor has been produced by an
    operation; ``grad`` is populated (and accumulated across fan-out) by
    ``backward_accumulate``.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # operator sugar; constants are absorbed without entering the graph
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)


class Parameter(Tensor):
    """A trainable tensor with a unique dotted-path name inside one model."""

    __slots__ = ("name",)

    def __init__(self, data, dtype=None, name: str = ""):
        super().__init__(data, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, dtype={self.data.dtype})"


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class _TapeNode:
    __slots__ = ("output", "backward")

    def __init__(self, output: Tensor, backward: Callable[[np.ndarray], None]):
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed differentiable operations.

    Used as a context manager; only one tape may be active per thread of
    execution. Each node stores its output tensor and a closure that routes
    the output gradient to the op's inputs.
    """

    def __init__(self):
        self.nodes: list[_TapeNode] = []
        self._output_ids: set[int] = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self.nodes.append(_TapeNode(output, backward))
        self._output_ids.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._output_ids

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise AutodiffError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


_ACTIVE_TAPE: Optional[Tape] = None


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


def _record(output: Tensor, backward: Callable[[np.ndarray], None]) -> None:
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(output, backward)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        # copy so later += never aliases an op's scratch buffer
        t.grad = g.copy()
    else:
        t.grad += g


def backward_accumulate(tape: Tape, loss: Tensor) -> None:
    """Replay ``tape`` in reverse, writing d(loss)/d(input) into ``.grad``.

    Gradients from multiple uses of one tensor are summed. ``loss`` must be a
    scalar produced on this tape.
    """
    if len(tape.nodes) == 0:
        raise AutodiffError("backward on an empty tape")
    if loss.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise AutodiffError("loss was not produced on this tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue  # not on the path from loss
        node.backward(g)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive differentiable ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def backward(g: np.ndarray) -> None:
        _accum(a, unbroadcast(g, a.data.shape))
        _accum(b, unbroadcast(g, b.data.shape))

    _record(out, backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def backward(g: np.ndarray) -> None:
        _accum(a, unbroadcast(g, a.data.shape))
        _accum(b, unbroadcast(-g, b.data.shape))

    _record(out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def backward(g: np.ndarray) -> None:
        _accum(a, unbroadcast(g * b.data, a.data.shape))
        _accum(b, unbroadcast(g * a.data, b.data.shape))

    _record(out, backward)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def backward(g: np.ndarray) -> None:
        _accum(a, -g)

    _record(out, backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[.., m, k] @ [.., k, n] -> [.., m, n]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} vs {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents incompatible: {a.shape} vs {b.shape}") from exc
    out = Tensor(out_data)

    def backward(g: np.ndarray) -> None:
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        _accum(a, unbroadcast(ga, a.data.shape))
        _accum(b, unbroadcast(gb, b.data.shape))

    _record(out, backward)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def backward(g: np.ndarray) -> None:
        _accum(a, g.reshape(a.data.shape))

    _record(out, backward)
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inverse = np.argsort(axes)

    def backward(g: np.ndarray) -> None:
        _accum(a, g.transpose(inverse))

    _record(out, backward)
    return out


def tensor_sum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def backward(g: np.ndarray) -> None:
        _accum(a, np.broadcast_to(g, a.data.shape))

    _record(out, backward)
    return out


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())

    def backward(g: np.ndarray) -> None:
        _accum(a, np.broadcast_to(g / n, a.data.shape))

    _record(out, backward)
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    extents = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def backward(g: np.ndarray) -> None:
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            _accum(t, g[tuple(index)])

    _record(out, backward)
    return out
