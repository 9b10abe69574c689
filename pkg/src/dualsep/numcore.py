"""Dense tensors with a small tape-based reverse-mode gradient engine.

Arrays are plain numpy arrays. Sequences are laid out frames-first
``(..., K, N)``, so the time axis is ``-2`` unless stated otherwise.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class NumericalError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


# names of deliberately broken backward rules; only the self-test sets these
_faults: set[str] = set()


@contextlib.contextmanager
def inject_fault(name: str):
    """Temporarily corrupt a backward rule (``"sigmoid_backward"`` flips its sign)."""
    _faults.add(name)
    try:
        yield
    finally:
        _faults.discard(name)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return slice_(self, index)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite output from op '{op}'")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Promote a non-Tensor operand to the Tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    sign = -1.0 if "sigmoid_backward" in _faults else 1.0
    return _make(out, (a,), lambda g: (sign * g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def log10(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log10(a.data)
    return _make(out, (a,), lambda g: (g / (a.data * np.log(10.0)),), "log10")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g: np.ndarray, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return g


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)

    def bw(g):
        return (np.broadcast_to(_expand(g, axes, keepdims), a.shape).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))

    def bw(g):
        return (np.broadcast_to(_expand(g, axes, keepdims) / n, a.shape).copy(),)

    return _make(np.mean(a.data, axis=axes, keepdims=keepdims), (a,), bw, "mean")


def variance(a, axis=None, keepdims: bool = False) -> Tensor:
    """Biased (1/n) variance over ``axis``."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    centered = a.data - a.data.mean(axis=axes, keepdims=True)

    def bw(g):
        return (_expand(g, axes, keepdims) * 2.0 * centered / n,)

    out = np.mean(centered * centered, axis=axes, keepdims=keepdims)
    return _make(out, (a,), bw, "variance")


def cumsum(a, axis: int) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), bw, "cumsum")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw, "concat")


def slice_(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None
    return _make(np.array(out), (a,), bw, "slice")


def reverse_time(a, axis: int = -2) -> Tensor:
    """Flip the frame axis only."""
    a = as_tensor(a)
    if a.ndim < 2 and axis == -2:
        raise ShapeError("reverse_time needs a (..., K, N) sequence")
    return _make(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),), "reverse_time")


def pad(a, pad_width) -> Tensor:
    a = as_tensor(a)
    pad_width = [tuple(p) for p in pad_width]
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return _make(np.pad(a.data, pad_width), (a,), lambda g: (g[index].copy(),), "pad")


def _frame_array(x: np.ndarray, length: int, hop: int) -> np.ndarray:
    n_frames = 1 + (x.shape[-1] - length) // hop
    view = np.lib.stride_tricks.sliding_window_view(x, length, axis=-1)
    return view[..., : (n_frames - 1) * hop + 1 : hop, :].copy()


def _overlap_add_array(frames: np.ndarray, hop: int) -> np.ndarray:
    n_frames, length = frames.shape[-2:]
    out = np.zeros(frames.shape[:-2] + ((n_frames - 1) * hop + length,), dtype=frames.dtype)
    if length % hop == 0:
        for j in range(length // hop):
            seg = frames[..., j * hop : (j + 1) * hop]
            out[..., j * hop : j * hop + n_frames * hop] += seg.reshape(frames.shape[:-2] + (-1,))
    else:
        for k in range(n_frames):
            out[..., k * hop : k * hop + length] += frames[..., k, :]
    return out


def frame(a, length: int, hop: int) -> Tensor:
    """Slice the last axis into hop-spaced windows: (..., T) -> (..., K, length)."""
    a = as_tensor(a)
    if a.shape[-1] < length:
        raise ShapeError(f"signal of {a.shape[-1]} samples is shorter than frame length {length}")
    out = _frame_array(a.data, length, hop)
    used = (out.shape[-2] - 1) * hop + length
    extra = a.shape[-1] - used

    def bw(g):
        full = _overlap_add_array(g, hop)
        if extra:
            full = np.concatenate([full, np.zeros(full.shape[:-1] + (extra,), full.dtype)], axis=-1)
        return (full,)

    return _make(out, (a,), bw, "frame")


def overlap_add(a, hop: int) -> Tensor:
    """Adjoint of :func:`frame`: (..., K, L) -> (..., (K-1)*hop + L)."""
    a = as_tensor(a)
    length = a.shape[-1]
    return _make(_overlap_add_array(a.data, hop), (a,), lambda g: (_frame_array(g, length, hop),), "overlap_add")


# ---------------------------------------------------------------------------
# dispatch and differentiation

OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": slice_,
    "reverse_time": reverse_time,
    "mean": mean,
    "variance": variance,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "log10": log10,
    "sqrt": sqrt,
    "sum": sum_,
    "scale": scale,
    "cumsum": cumsum,
    "reshape": reshape,
    "transpose": transpose,
    "pad": pad,
    "frame": frame,
    "overlap_add": overlap_add,
}


def apply(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op '{op}'") from None
    return fn(*inputs, **kwargs)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    grads = {id(output): np.ones_like(output.data)}
    for node in reversed(_topological(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst_index: tuple | None = None


def grad_check(
    f: Callable,
    x,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_checks: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f`` with central differences.

    ``x`` is a Tensor or a list of Tensors; ``f`` receives it unchanged.
    Entries are perturbed in place and restored. With ``max_checks`` only a
    seeded random subset of entries is differenced.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires 64-bit tensors")
        t.requires_grad = True
        t.grad = None

    first = f(x)
    second = f(x)
    if first.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if first.item() != second.item():
        raise RuntimeError("function is not deterministic: two evaluations differ")
    first.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    entries = [(i, idx) for i, t in enumerate(xs) for idx in np.ndindex(t.shape)]
    if max_checks is not None and len(entries) > max_checks:
        pick = np.random.default_rng(seed).choice(len(entries), max_checks, replace=False)
        entries = [entries[j] for j in sorted(pick)]

    worst, worst_at = 0.0, None
    for i, idx in entries:
        t = xs[i]
        orig = t.data[idx]
        t.data[idx] = orig + eps
        plus = f(x).item()
        t.data[idx] = orig - eps
        minus = f(x).item()
        t.data[idx] = orig
        numeric = (plus - minus) / (2.0 * eps)
        a = analytic[i][idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if err > worst:
            worst, worst_at = err, (i,) + tuple(idx)
    for t in xs:
        t.grad = None
    return GradCheckReport(worst, worst <= tol, len(entries), worst_at)


class Rng:
    """Seeded generator; identical seeds give identical draw sequences."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.gen = np.random.default_rng(self.seed)

    def uniform(self, low, high, shape=(), dtype=np.float64) -> np.ndarray:
        return self.gen.uniform(low, high, size=shape).astype(dtype)

    def normal(self, shape=(), std: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self.gen.standard_normal(size=shape) * std).astype(dtype)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def spawn(self, key: int) -> "Rng":
        return Rng(np.random.SeedSequence([self.seed, key]).generate_state(1)[0])
