"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable value in the pipeline is a :class:`Tensor`.  Operations
executed while a :class:`Tape` is active append a node to that tape; calling
:func:`backward` on a scalar result walks the tape in reverse insertion order
and accumulates gradients into every leaf tensor with ``requires_grad``.

    >>> w = Tensor([[2.0]], requires_grad=True)
    >>> with Tape():
    ...     loss = sum(matmul(w, Tensor([[3.0]])))
    ...     backward(loss)
    >>> w.grad
    array([[3.]])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numba import njit

__all__ = [
    "Tensor", "Tape", "DimensionError", "ContractError", "NonFiniteError",
    "record", "backward", "no_tape", "set_debug", "set_default_dtype",
    "get_default_dtype", "matmul", "conv2d", "relu", "sigmoid", "tanh", "add",
    "mul", "scale", "affine_bias", "softmax_cross_entropy", "sum", "mean",
    "global_avg_pool", "concat", "embedding", "reshape",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """An autodiff API was used outside its contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared while debug checking was enabled."""


_state = threading.local()
_config = {"dtype": np.dtype(np.float64), "debug": False}


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _config["dtype"] = dtype


def get_default_dtype() -> np.dtype:
    return _config["dtype"]


def set_debug(enabled: bool) -> None:
    """Toggle NaN/Inf checks on every op output (slow)."""
    _config["debug"] = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=dtype or _config["dtype"])
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        if _config["debug"]:
            _check_finite(self.data, name or "tensor")

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_fail(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add(self, -float(other))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _scalar_fail(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")


@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of the ops executed while it is active.

    Tapes are thread-local: entering a tape in one thread does not affect
    ops running in another.  One tape is meant to cover one training step.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted (tapes must nest)")
        stack.pop()
        # outputs point at the tape and the tape at them; cut the cycle so the
        # step's buffers are freed by refcount instead of waiting for a full gc
        for node in self.nodes:
            node.out._tape = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if t._tape is None:
                    leaves[key] = t
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, t in leaves.items():
            g = grads[key]
            if g.shape != t.shape:
                raise ContractError(f"gradient shape {g.shape} != tensor shape {t.shape}")
            t.grad = g if t.grad is None else t.grad + g


def _stack() -> list[Tape]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_tape:
    """Context manager that suspends recording (evaluation, sampling)."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()

    def __exit__(self, *exc):
        _stack()[:] = self._saved


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss has no recorded history; call backward inside the Tape block")
    loss._tape.backward(loss)


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` as an op output and put a node on the active tape.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    Custom primitives elsewhere in the package are built on this.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    out.requires_grad = False
    if _config["debug"]:
        _check_finite(data, op)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(Node(op, out, tuple(inputs), backward_fn))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def bwd(g):
        return g @ B.T, A.T @ g

    return record("matmul", A @ B, (a, b), bwd)


@njit(cache=True, nogil=True)
def _im2col(x, kh, kw, stride, padding, oh, ow, cols):
    # x [b,c,h,w] -> cols [b*oh*ow, c*kh*kw]; out-of-range taps read as zero
    b, c, h, w = x.shape
    for n in range(b):
        for i in range(oh):
            for j in range(ow):
                r = (n * oh + i) * ow + j
                q = 0
                for ch in range(c):
                    for di in range(kh):
                        y = i * stride - padding + di
                        for dj in range(kw):
                            xx = j * stride - padding + dj
                            if 0 <= y < h and 0 <= xx < w:
                                cols[r, q] = x[n, ch, y, xx]
                            else:
                                cols[r, q] = 0.0
                            q += 1


@njit(cache=True, nogil=True)
def _col2im(dcols, kh, kw, stride, padding, oh, ow, dx):
    b, c, h, w = dx.shape
    for n in range(b):
        for i in range(oh):
            for j in range(ow):
                r = (n * oh + i) * ow + j
                q = 0
                for ch in range(c):
                    for di in range(kh):
                        y = i * stride - padding + di
                        for dj in range(kw):
                            xx = j * stride - padding + dj
                            if 0 <= y < h and 0 <= xx < w:
                                dx[n, ch, y, xx] += dcols[r, q]
                            q += 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[b,c,h,w]`` with ``kernel[o,c,kh,kw]``."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} padding={padding}")
    b, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = np.empty((b * oh * ow, c * kh * kw), dtype=x.data.dtype)
    _im2col(x.data, kh, kw, stride, padding, oh, ow, cols)
    K = kernel.data.reshape(o, -1)
    out = np.ascontiguousarray((cols @ K.T).reshape(b, oh, ow, o).transpose(0, 3, 1, 2))

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            _col2im(g2 @ K, kh, kw, stride, padding, oh, ow, dx)
        return dx, dk

    return record("conv2d", out, (x, kernel), bwd)


# ---------------------------------------------------------------- elementwise

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return record("relu", x.data * mask, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # branch-free stable form: exp of a non-positive number only
    e = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.data.dtype, copy=False)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return record("sigmoid", y, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return record("tanh", y, (x,), bwd)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a, b) -> Tensor:
    """Sum of two same-shape tensors, or of a tensor and a Python scalar."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = float(b)
        return record("add", a.data + c, (a,), lambda g: (g,))
    _same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        return scale(a, b)
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return record("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", x.data * c, (x,), lambda g: (g * c,))


def affine_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature bias along axis 1 (``[b,n]+[n]`` or ``[b,c,h,w]+[c]``)."""
    if bias.ndim != 1 or x.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"affine_bias: bias {bias.shape} does not match axis 1 of {x.shape}")
    shape = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))

    def bwd(g):
        return g, g.sum(axis=axes)

    return record("affine_bias", x.data + bias.data.reshape(shape), (x, bias), bwd)


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return record("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.data.dtype),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return record(
        "mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.data.dtype),)
    )


def global_avg_pool(x: Tensor) -> Tensor:
    """``[b,c,h,w] -> [b,c]`` spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.shape}")
    b, c, h, w = x.shape

    def bwd(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),)

    return record("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            s != r for k, (s, r) in enumerate(zip(t.shape, ref.shape)) if k != axis % ref.ndim
        ):
            raise DimensionError(f"concat: {t.shape} incompatible with {ref.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def embedding(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table`` (duplicated rows accumulate on backward)."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"symbol index out of range [0, {table.shape[0]})")

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return record("embedding", table.data[idx], (table,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


# ---------------------------------------------------------------- loss

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [batch, classes], got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    b, n = logits.shape
    if t.shape[0] != b:
        raise DimensionError(f"{t.shape[0]} targets for a batch of {b}")
    if t.size and (t.min() < 0 or t.max() >= n):
        raise IndexError(f"target index out of range [0, {n})")
    logp = log_softmax(logits.data)
    rows = np.arange(b)
    loss = -logp[rows, t].mean()

    def bwd(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        return (d * (g / b),)

    return record("softmax_cross_entropy", np.asarray(loss, dtype=logits.data.dtype), (logits,), bwd)
