"""N-dimensional float tensors with reverse-mode automatic differentiation.

The engine is deliberately small and auditable: values live in contiguous
numpy arrays, every differentiable operation records its inputs and a
backward closure on the produced tensor, and ``backward`` replays the
recorded graph in reverse topological order via a :class:`Tape`.

Two rules keep the gradient code simple enough to verify by hand:

* no implicit broadcasting: binary operations accept operands of exactly
  equal shape, or a plain Python number (callers reshape explicitly);
* only float32/float64 tensors exist, and both operands of a binary
  operation must share a dtype.

Multiply-accumulate counts for ``matmul`` and ``conv_nd`` are recorded on
an active :class:`MacCounter` (see :func:`count_macs`), which the analytic
cost model is tested against.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported tensor dtype {dt}; only float32/float64")
    return dt


class Tensor:
    """A contiguous row-major N-D float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (
                np.dtype(np.float32), np.dtype(np.float64)) else np.float64
        # asarray with order="C" keeps 0-d scalars 0-d (ascontiguousarray
        # would promote them to shape (1,))
        arr = np.asarray(data, dtype=_as_dtype(dtype), order="C")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    # -- basic properties ------------------------------------------------

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy; callers must not mutate it)."""
        return self.data

    def detach(self) -> "Tensor":
        """Same values, no graph participation."""
        return Tensor(self.data.copy(), dtype=self.dtype, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(_as_dtype(dtype)), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{grad}, op={self._op})"

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=_as_dtype(dtype)), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=_as_dtype(dtype)), requires_grad=requires_grad)

    @staticmethod
    def full(shape, value, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=_as_dtype(dtype)), requires_grad=requires_grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return recip(self) * other

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # method forms of the common ops
    def matmul(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def backward(self, free_graph: bool = True) -> None:
        backward(self, free_graph=free_graph)


# -- graph machinery -------------------------------------------------------


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    else:
        out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = Tensor(np.zeros_like(t.data))
    t.grad.data += g


class Tape:
    """Ordered record of the operations reachable from one output tensor.

    ``nodes`` is a topological order (parents before children); the backward
    sweep walks it reversed, visiting each recorded operation exactly once.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def run_backward(self, free_graph: bool = True) -> None:
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad.data)
                if free_graph:
                    node._backward = None
                    node._parents = ()


def backward(loss: Tensor, free_graph: bool = True) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be scalar. Gradients accumulate across calls until reset
    with ``zero_grad``. With ``free_graph`` (the default) the tape is freed
    afterwards; pass False to backpropagate through the same graph again.
    """
    if loss.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to backpropagate")
    if loss.grad is None:
        loss.grad = Tensor(np.zeros_like(loss.data))
    loss.grad.data += np.ones_like(loss.data)
    Tape(loss).run_backward(free_graph=free_graph)


def assert_finite(t: Tensor, what: str = "tensor") -> Tensor:
    """Raise :class:`NumericError` if ``t`` holds any NaN or Inf."""
    if not np.isfinite(t.data).all():
        bad = int(np.size(t.data) - np.isfinite(t.data).sum())
        raise NumericError(f"{what} contains {bad} non-finite value(s) (op={t._op})")
    return t


# -- MAC instrumentation -----------------------------------------------------

_LOCAL = threading.local()


class MacCounter:
    """Accumulates multiply-accumulate counts of matmul/conv executions."""

    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


def _active_counter() -> MacCounter | None:
    stack = getattr(_LOCAL, "mac_stack", None)
    return stack[-1] if stack else None


@contextmanager
def count_macs():
    """Context manager yielding a :class:`MacCounter` active on this thread."""
    counter = MacCounter()
    stack = getattr(_LOCAL, "mac_stack", None)
    if stack is None:
        stack = _LOCAL.mac_stack = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _count(n: int) -> None:
    c = _active_counter()
    if c is not None:
        c.add(n)


# -- shape/dtype checks ------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ "
                         "(no implicit broadcasting)")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: operand dtypes {a.dtype} and {b.dtype} differ")


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating)) and not isinstance(x, bool)


# -- elementwise ops ---------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if _is_number(b):
        return shift(a, float(b))
    _check_same_shape(a, b, "add")

    def back(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a: Tensor, b) -> Tensor:
    if _is_number(b):
        return shift(a, -float(b))
    _check_same_shape(a, b, "sub")

    def back(g):
        _accum(a, g)
        _accum(b, -g)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a: Tensor, b) -> Tensor:
    """Hadamard product (or scaling when ``b`` is a Python number)."""
    if _is_number(b):
        return scale(a, float(b))
    _check_same_shape(a, b, "mul")

    def back(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result(a.data * b.data, (a, b), back, "mul")


def div(a: Tensor, b) -> Tensor:
    if _is_number(b):
        return scale(a, 1.0 / float(b))
    _check_same_shape(a, b, "div")

    def back(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _result(a.data / b.data, (a, b), back, "div")


def recip(a: Tensor) -> Tensor:
    out_data = 1.0 / a.data

    def back(g):
        _accum(a, -g * out_data * out_data)

    return _result(out_data, (a,), back, "recip")


def neg(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, -g)

    return _result(-a.data, (a,), back, "neg")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def back(g):
        _accum(a, g * s)

    return _result(a.data * np.asarray(s, dtype=a.dtype), (a,), back, "scale")


def shift(a: Tensor, c: float) -> Tensor:
    def back(g):
        _accum(a, g)

    return _result(a.data + np.asarray(float(c), dtype=a.dtype), (a,), back, "shift")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def back(g):
        _accum(a, g * mask)

    # maximum, not where(mask, ...): NaN must propagate, not flush to zero
    return _result(np.maximum(a.data, 0), (a,), back, "relu")


def sigmoid(a: Tensor) -> Tensor:
    # Stable two-branch evaluation keeps exp arguments non-positive.
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(a.dtype, copy=False)

    def back(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _result(out_data, (a,), back, "sigmoid")


def log(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, g / a.data)

    return _result(np.log(a.data), (a,), back, "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where a is inside."""
    inside = (a.data >= lo) & (a.data <= hi)

    def back(g):
        _accum(a, g * inside)

    return _result(np.clip(a.data, lo, hi), (a,), back, "clip")


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out_data = np.asarray(a.data.sum(), dtype=a.dtype)

        def back(g):
            _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

        return _result(out_data, (a,), back, "sum")

    ax = axis if axis >= 0 else axis + a.ndim
    if not 0 <= ax < a.ndim:
        raise ShapeError(f"sum: axis {axis} invalid for shape {a.shape}")

    def back_axis(g):
        _accum(a, np.broadcast_to(np.expand_dims(g, ax), a.shape).astype(a.dtype, copy=False))

    return _result(a.data.sum(axis=ax), (a,), back_axis, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis if axis >= 0 else axis + a.ndim]
    return scale(tsum(a, axis), 1.0 / count)


# -- structural ops -----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, Iterable) else (shape,)))
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}")

    def back(g):
        _accum(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), back, "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    inverse = np.argsort(axes)

    def back(g):
        _accum(a, np.ascontiguousarray(g.transpose(inverse)))

    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), back, "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ax = axis if axis >= 0 else axis + tensors[0].ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or other[:ax] + other[ax + 1:] != base[:ax] + base[ax + 1:]:
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} "
                             f"incompatible along axis {axis}")
        if t.dtype != tensors[0].dtype:
            raise ShapeError("concat: dtypes differ")
    extents = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def back(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx = tuple(slice(None) if d != ax else slice(start, stop) for d in range(g.ndim))
            _accum(t, np.ascontiguousarray(g[idx]))

    return _result(np.concatenate([t.data for t in tensors], axis=ax),
                   tuple(tensors), back, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis if axis >= 0 else axis + a.ndim
    if not (0 <= start < stop <= a.shape[ax]):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} "
                         f"of shape {a.shape}")
    idx = tuple(slice(None) if d != ax else slice(start, stop) for d in range(a.ndim))

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _result(np.ascontiguousarray(a.data[idx]), (a,), back, "slice")


# -- matmul / softmax ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: operand dtypes {a.dtype} and {b.dtype} differ")
    _count(a.shape[0] * a.shape[1] * b.shape[1])

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), back, "matmul")


def softmax(a: Tensor, axis: int) -> Tensor:
    ax = axis if axis >= 0 else axis + a.ndim
    if not 0 <= ax < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        inner = (g * out_data).sum(axis=ax, keepdims=True)
        _accum(a, out_data * (g - inner))

    return _result(out_data.astype(a.dtype, copy=False), (a,), back, "softmax")


# -- convolution ---------------------------------------------------------------


def _per_axis(value, rank: int, name: str) -> tuple[int, ...]:
    if isinstance(value, int):
        return (value,) * rank
    value = tuple(int(v) for v in value)
    if len(value) != rank:
        raise ShapeError(f"{name}: expected {rank} entries, got {len(value)}")
    return value


def _conv_geometry(in_spatial, kshape, stride, padding):
    """Output extents plus (before, after) pad per axis."""
    outs, pads = [], []
    for n, k, s in zip(in_spatial, kshape, stride):
        if padding == "same":
            out = -(-n // s)  # ceil
            total = max((out - 1) * s + k - n, 0)
            before = total // 2
            after = total - before
        elif padding == "valid":
            if k > n:
                raise ShapeError(f"conv: kernel extent {k} exceeds input extent {n} "
                                 "with valid padding")
            out = (n - k) // s + 1
            before = after = 0
        else:
            raise ValueError(f"conv: unknown padding mode {padding!r}")
        outs.append(out)
        pads.append((before, after))
    return tuple(outs), pads


def conv_nd(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
            stride=1, padding: str = "same") -> Tensor:
    """Cross-correlation of a (C_in, *spatial) input with a (C_out, C_in, *k) kernel.

    Supports 2 or 3 spatial dimensions. ``padding`` is "same" (extent-preserving
    at stride 1) or "valid". The kernel is not flipped.
    """
    rank = x.ndim - 1
    if kernel.ndim != rank + 2:
        raise ShapeError(f"conv: kernel rank {kernel.ndim - 2} does not match input "
                         f"spatial rank {rank} (input {x.shape}, kernel {kernel.shape})")
    if rank not in (2, 3):
        raise ShapeError(f"conv: only 2 or 3 spatial dims supported, got {rank}")
    c_out, c_in = kernel.shape[0], kernel.shape[1]
    if c_in != x.shape[0]:
        raise ShapeError(f"conv: input has {x.shape[0]} channels but kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv: bias shape {bias.shape} != ({c_out},)")

    strides = _per_axis(stride, rank, "stride")
    kshape = kernel.shape[2:]
    out_spatial, pads = _conv_geometry(x.shape[1:], kshape, strides, padding)

    x_pad = np.pad(x.data, [(0, 0)] + pads)
    out_data = np.zeros((c_out, *out_spatial), dtype=x.dtype)
    offsets = list(itertools.product(*[range(k) for k in kshape]))
    windows = {}
    for off in offsets:
        win_idx = (slice(None),) + tuple(
            slice(o, o + s * n, s) for o, s, n in zip(off, strides, out_spatial))
        windows[off] = win_idx
        k_off = kernel.data[(slice(None), slice(None)) + off]
        out_data += np.tensordot(k_off, x_pad[win_idx], axes=([1], [0]))
    if bias is not None:
        out_data += bias.data.reshape((c_out,) + (1,) * rank)
    _count(int(np.prod(kshape)) * c_in * c_out * int(np.prod(out_spatial)))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    spatial_axes = tuple(range(1, rank + 1))

    def back(g):
        if kernel.requires_grad:
            dk = np.zeros_like(kernel.data)
            for off in offsets:
                dk[(slice(None), slice(None)) + off] = np.tensordot(
                    g, x_pad[windows[off]], axes=(spatial_axes, spatial_axes))
            _accum(kernel, dk)
        if x.requires_grad:
            dx_pad = np.zeros_like(x_pad)
            for off in offsets:
                k_off = kernel.data[(slice(None), slice(None)) + off]
                dx_pad[windows[off]] += np.tensordot(k_off, g, axes=([0], [0]))
            crop = (slice(None),) + tuple(
                slice(before, before + n) for (before, _), n in zip(pads, x.shape[1:]))
            _accum(x, np.ascontiguousarray(dx_pad[crop]))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=spatial_axes))

    return _result(out_data, parents, back, "conv")


# -- pooling / upsampling -------------------------------------------------------


def max_pool(x: Tensor, factor=2) -> Tensor:
    """Non-overlapping max pooling over the spatial dims of a (C, *spatial) tensor."""
    rank = x.ndim - 1
    factors = _per_axis(factor, rank, "pool factor")
    for n, f in zip(x.shape[1:], factors):
        if n % f:
            raise ShapeError(f"max_pool: extent {n} not divisible by factor {f} "
                             f"(shape {x.shape})")
    c = x.shape[0]
    outs = tuple(n // f for n, f in zip(x.shape[1:], factors))
    # (C, o1, f1, o2, f2, ...) -> (C, o1, o2, ..., f1*f2*...)
    split = x.data.reshape((c,) + tuple(v for pair in zip(outs, factors) for v in pair))
    perm = (0,) + tuple(1 + 2 * d for d in range(rank)) + tuple(2 + 2 * d for d in range(rank))
    blocks = split.transpose(perm).reshape((c,) + outs + (-1,))
    arg = blocks.argmax(axis=-1)
    out_data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        dblocks = np.zeros_like(blocks)
        np.put_along_axis(dblocks, arg[..., None], g[..., None], axis=-1)
        dsplit = dblocks.reshape((c,) + outs + factors).transpose(np.argsort(perm))
        _accum(x, np.ascontiguousarray(dsplit.reshape(x.shape)))

    return _result(np.ascontiguousarray(out_data), (x,), back, "max_pool")


def upsample_nearest(x: Tensor, factor=2) -> Tensor:
    """Nearest-neighbour upsampling of a (C, *spatial) tensor by integer factors."""
    rank = x.ndim - 1
    factors = _per_axis(factor, rank, "upsample factor")
    out_data = x.data
    for d, f in enumerate(factors):
        if f > 1:
            out_data = np.repeat(out_data, f, axis=d + 1)

    def back(g):
        blocks = g.reshape((x.shape[0],) + tuple(
            v for pair in zip(x.shape[1:], factors) for v in pair))
        axes = tuple(2 + 2 * d for d in range(rank))
        _accum(x, np.ascontiguousarray(blocks.sum(axis=axes)))

    return _result(np.ascontiguousarray(out_data), (x,), back, "upsample")


# -- batch normalization ----------------------------------------------------------


class BatchNormState:
    """Running statistics for one batch-norm layer (one entry per channel)."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=_as_dtype(dtype))
        self.running_var = np.ones(channels, dtype=_as_dtype(dtype))

    def copy(self) -> "BatchNormState":
        dup = BatchNormState(len(self.running_mean), dtype=self.running_mean.dtype)
        dup.running_mean = self.running_mean.copy()
        dup.running_var = self.running_var.copy()
        return dup


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of a (C, *spatial) tensor.

    Training mode normalizes with the statistics of this call (biased variance
    over all non-channel elements) and folds them into ``state`` with the given
    momentum; eval mode normalizes with the running statistics. The state
    update is the one deliberate side effect in the op set.
    """
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} "
                         f"!= ({c},)")
    axes = tuple(range(1, x.ndim))
    bshape = (c,) + (1,) * (x.ndim - 1)
    count = int(np.prod(x.shape[1:])) if x.ndim > 1 else 1

    if training:
        mu = x.data.mean(axis=axes) if axes else x.data.copy()
        var = x.data.var(axis=axes) if axes else np.zeros_like(x.data)
        state.running_mean = ((1 - momentum) * state.running_mean
                              + momentum * mu).astype(state.running_mean.dtype)
        state.running_var = ((1 - momentum) * state.running_var
                             + momentum * var).astype(state.running_var.dtype)
    else:
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out_data = gamma.data.reshape(bshape) * x_hat + beta.data.reshape(bshape)

    def back(g):
        if gamma.requires_grad:
            _accum(gamma, (g * x_hat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            gs = gamma.data.reshape(bshape) * inv_std.reshape(bshape)
            if training:
                g_mean = g.mean(axis=axes, keepdims=True) if axes else g
                gx_mean = (g * x_hat).mean(axis=axes, keepdims=True) if axes else g * x_hat
                _accum(x, gs * (g - g_mean - x_hat * gx_mean))
            else:
                _accum(x, gs * g)

    return _result(out_data.astype(x.dtype, copy=False), (x, gamma, beta), back, "batch_norm")
