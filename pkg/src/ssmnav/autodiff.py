"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a numpy array plus a gradient accumulator.  Operations
record closures on the output tensor; ``Tensor.backward`` walks the graph
in reverse topological order and accumulates gradients into every tensor
that requires them.  Float32 is the working precision; float64 is used by
the finite-difference gradient checker.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class NumericsError(ArithmeticError):
    """Raised when an operation produces NaN/Inf from finite inputs."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense real tensor with an optional gradient accumulator.

    ``data`` is a row-major numpy float array.  ``grad`` reads as a zero
    array until something has been accumulated, so "not on a path to the
    loss" means exactly zero by construction.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            raise TypeError(f"Tensor dtype must be float32/float64, got {data.dtype}")
        self.data = np.ascontiguousarray(data)
        self.requires_grad = requires_grad
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

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

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Backpropagate from a scalar: accumulate dL/dt into every ancestor."""
        if self.data.size != 1:
            raise ShapeError(f"backward() starts from a scalar, shape is {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is None:
                continue
            grads = node._backward(node._grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent._accumulate(g)

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += g

    # Thin operator sugar; the module-level functions do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _out(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op result, recording the closure only when grads are live."""
    rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    t = Tensor(data, requires_grad=rg)
    if rg:
        t._parents = parents
        t._backward = backward
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _out(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _out(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dims broadcast, inner dims must agree."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _out(out, (a, b), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _out(out, (x,), backward)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s

    def backward(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return _out(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (x.data > 0),)

    return _out(out, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x) computed as max(x, 0) + log1p(e^-|x|); safe for any x."""
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s,)

    return _out(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    if not np.all(np.isfinite(out)):
        raise NumericsError("exp overflowed to non-finite values")

    def backward(g):
        return (g * out,)

    return _out(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericsError("log requires strictly positive input")
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _out(out, (x,), backward)


def reciprocal(x: Tensor) -> Tensor:
    if np.any(x.data == 0):
        raise NumericsError("reciprocal of zero")
    out = 1.0 / x.data

    def backward(g):
        return (-g * out * out,)

    return _out(out, (x,), backward)


# ---------------------------------------------------------------------------
# normalization and reductions


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm params must be ({d},), got {gain.shape}/{shift.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + shift.data

    def backward(g):
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = (gg - m1 - xhat * m2) * inv
        axes = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _out(out, (x, gain, shift), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    if not np.all(np.isfinite(out)):
        raise NumericsError("softmax produced non-finite values")

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _out(out, (x,), backward)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _out(out, (x,), backward)


def mean_lastdim(x: Tensor) -> Tensor:
    n = x.shape[-1]
    out = x.data.mean(axis=-1)

    def backward(g):
        return (np.repeat(np.expand_dims(g / n, -1), n, axis=-1),)

    return _out(out, (x,), backward)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    out = x.data.mean(axis=axis)

    def backward(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _out(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.full_like(x.data, g.reshape(())),)

    return _out(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _out(out, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _out(out, (x,), backward)


def expand(x: Tensor, shape) -> Tensor:
    """Explicit broadcast to ``shape``; gradient sums over expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from None
    out = np.ascontiguousarray(out)

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return _out(out, (x,), backward)


def flip_axis(x: Tensor, axis: int) -> Tensor:
    out = np.flip(x.data, axis=axis).copy()

    def backward(g):
        return (np.flip(g, axis=axis),)

    return _out(out, (x,), backward)


def concat_axis(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_axis needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _out(out, tuple(tensors), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = x.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice [{start}:{stop}) out of range for axis {axis} of size {n}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _out(out, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of any integer shape select rows of ``table`` [V, D]."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _out(out, (table,), backward)


# ---------------------------------------------------------------------------
# structured ops


def conv1d_depthwise(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     causal: bool = False) -> Tensor:
    """Per-channel 1-D convolution of [B, L, E] with kernel [E, W], W odd.

    "Same" padding by default; ``causal`` pads entirely on the left so that
    output t sees inputs <= t only.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d_depthwise input must be [B, L, E], got {x.shape}")
    b, l, e = x.shape
    if kernel.ndim != 2 or kernel.shape[0] != e:
        raise ShapeError(f"kernel must be [{e}, W], got {kernel.shape}")
    w = kernel.shape[1]
    if w % 2 == 0:
        raise ShapeError(f"kernel width must be odd, got {w}")
    if w > l:
        raise ShapeError(f"kernel width {w} exceeds sequence length {l}")
    if causal:
        left, right = w - 1, 0
    else:
        left = right = (w - 1) // 2
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    out = np.zeros_like(x.data)
    for j in range(w):
        out += xp[:, j:j + l, :] * kernel.data[:, j]
    parents = [x, kernel]
    if bias is not None:
        if bias.shape != (e,):
            raise ShapeError(f"conv bias must be ({e},), got {bias.shape}")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gp = np.pad(g, ((0, 0), (right, left), (0, 0)))
        gx = np.zeros_like(x.data)
        gk = np.zeros_like(kernel.data)
        for j in range(w):
            gx += gp[:, w - 1 - j:w - 1 - j + l, :] * kernel.data[:, j]
            gk[:, j] = (xp[:, j:j + l, :] * g).sum(axis=(0, 1))
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    return _out(out, tuple(parents), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; caller is responsible for skipping it at eval time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return _out(out, (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference comparison, worst case over elements."""
    passed: bool
    max_rel_err: float
    per_input: list[float] = field(default_factory=list)

    def __str__(self):
        flag = "ok" if self.passed else "FAIL"
        return f"gradcheck {flag}: max_rel_err={self.max_rel_err:.3e}"


def check_gradients(f, inputs, eps: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f(*inputs)`` to central differences.

    Inputs must be float64 leaf tensors.  The relative error uses an absolute
    floor of 1 in the denominator so near-zero gradients are compared
    absolutely.  The numeric side never touches the backward pass.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("check_gradients requires float64 inputs")
        if not t.requires_grad:
            raise ValueError("check_gradients inputs must require grad")
    for t in inputs:
        t.zero_grad()
    loss = f(*inputs)
    if loss.size != 1:
        raise ShapeError("check_gradients target must be scalar")
    if not np.isfinite(loss.data.reshape(())):
        raise NumericsError("check_gradients: loss is not finite")
    loss.backward()
    analytic = [t.grad.copy() for t in inputs]

    per_input: list[float] = []
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(*inputs).data.reshape(()))
            flat[i] = orig - eps
            lo = float(f(*inputs).data.reshape(()))
            flat[i] = orig
            num[i] = (hi - lo) / (2.0 * eps)
        a = analytic[k].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1.0)
        per_input.append(float(np.max(np.abs(a - num) / denom)) if flat.size else 0.0)
    worst = max(per_input) if per_input else 0.0
    return GradCheckReport(passed=worst <= tol, max_rel_err=worst, per_input=per_input)
