"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation on a :class:`Tensor` that requires a gradient records its
parents and a backward closure.  :func:`backward` walks the recorded graph
in reverse topological order, so each recorded op is visited exactly once.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_counter = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class NumericError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


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


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_needs", "_backward", "_op", "_id")
    # make ``ndarray <op> Tensor`` defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._needs: tuple[bool, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._id = next(_counter)

    # -- basic properties -------------------------------------------------
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
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        # gradient flow is fixed when the op is recorded, so later flag changes do not leak
        out._needs = tuple(p.requires_grad for p in parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- arithmetic -------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data**exponent, (a,), bw, "pow")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim == 1 and b.ndim == 1:
        return tsum(mul(a, b))
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias``."""
    return add(matmul(x, weight), bias)


# -- elementwise nonlinearities --------------------------------------------
def _sigmoid(x: np.ndarray) -> np.ndarray:
    # the tanh form never overflows and needs no branch on the sign of x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp_min(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; gradient is zero where clamped."""
    a = as_tensor(a)
    mask = a.data >= floor
    return _make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "clamp_min")


def xlogx(a) -> Tensor:
    """Elementwise ``a * log(a)`` with the convention ``0 log 0 = 0``."""
    a = as_tensor(a)
    safe = np.where(a.data > 0, a.data, 1.0)
    out = np.where(a.data > 0, a.data * np.log(safe), 0.0)
    return _make(out, (a,), lambda g: (g * (np.log(safe) + 1.0),), "xlogx")


# -- reductions and normalizers --------------------------------------------
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True)) + m
    out = s if keepdims else np.squeeze(s, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(a.data - s),)

    return _make(out, (a,), bw, "logsumexp")


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


# -- shape manipulation ----------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"stack: incompatible shapes {shapes}") from None

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, tensors, bw, "stack")


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.flip(a.data, axis=axis).copy(), (a,), lambda g: (np.flip(g, axis=axis),), "flip")


# -- fused recurrent layer -------------------------------------------------
def _lstm_states(pre: np.ndarray, w_rec: np.ndarray, order) -> np.ndarray:
    """Forward recurrence only, for calls that record no graph."""
    B, N, G = pre.shape
    H = G // 4
    hs = np.empty((B, N, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in order:
        z = pre[:, t] + h @ w_rec
        ifo = _sigmoid(z[:, : 3 * H])
        c = ifo[:, H : 2 * H] * c + ifo[:, :H] * np.tanh(z[:, 3 * H :])
        h = ifo[:, 2 * H :] * np.tanh(c)
        hs[:, t] = h
    return hs


def lstm(x, w_in, w_rec, bias, reverse: bool = False) -> Tensor:
    """Run an LSTM over ``x`` of shape (B, N, D) and return hidden states (B, N, H).

    Gate layout in the 4H columns is input, forget, output, candidate.  The
    whole recurrence is one recorded op with a hand-written BPTT backward.
    """
    x, w_in, w_rec, bias = (as_tensor(t) for t in (x, w_in, w_rec, bias))
    if x.ndim != 3:
        raise ShapeError(f"lstm: expected input of rank 3 (B, N, D), got {x.shape}")
    B, N, D = x.shape
    H = w_rec.shape[0]
    if w_in.shape != (D, 4 * H) or w_rec.shape != (H, 4 * H) or bias.shape != (4 * H,):
        raise ShapeError(
            f"lstm: input {x.shape} incompatible with w_in {w_in.shape}, "
            f"w_rec {w_rec.shape}, bias {bias.shape}"
        )
    order = range(N - 1, -1, -1) if reverse else range(N)
    pre = x.data @ w_in.data + bias.data
    if not (_grad_enabled and any(p.requires_grad for p in (x, w_in, w_rec, bias))):
        return _make(_lstm_states(pre, w_rec.data, order), (), None, "lstm")
    hs = np.zeros((B, N, H))
    cs = np.zeros((B, N, H))
    gates = np.zeros((B, N, 4 * H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in order:
        z = pre[:, t] + h @ w_rec.data
        ifo = _sigmoid(z[:, : 3 * H])
        cand = np.tanh(z[:, 3 * H :])
        c = ifo[:, H : 2 * H] * c + ifo[:, :H] * cand
        h = ifo[:, 2 * H :] * np.tanh(c)
        gates[:, t, : 3 * H] = ifo
        gates[:, t, 3 * H :] = cand
        hs[:, t] = h
        cs[:, t] = c

    def bw(g):
        dpre = np.zeros((B, N, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        steps = list(order)
        for k in range(N - 1, -1, -1):
            t = steps[k]
            c_prev = cs[:, steps[k - 1]] if k > 0 else np.zeros((B, H))
            i, f, o = gates[:, t, :H], gates[:, t, H : 2 * H], gates[:, t, 2 * H : 3 * H]
            cand = gates[:, t, 3 * H :]
            tc = np.tanh(cs[:, t])
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dpre[:, t]
            dz[:, :H] = dc * cand * i * (1.0 - i)
            dz[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
            dz[:, 3 * H :] = dc * i * (1.0 - cand * cand)
            dh_next = dz @ w_rec.data.T
            dc_next = dc * f
        h_prev = np.zeros((B, N, H))
        for k in range(1, N):
            h_prev[:, steps[k]] = hs[:, steps[k - 1]]
        gx = dpre @ w_in.data.T
        gw_in = np.einsum("bnd,bng->dg", x.data, dpre)
        gw_rec = np.einsum("bnh,bng->hg", h_prev, dpre)
        gb = dpre.sum(axis=(0, 1))
        return gx, gw_in, gw_rec, gb

    return _make(hs, (x, w_in, w_rec, bias), bw, "lstm")


# -- graph traversal -------------------------------------------------------
def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                stack.append((p, False))
    return order


def _run_backward(root: Tensor) -> dict[int, np.ndarray]:
    if root.data.size != 1:
        raise ShapeError(f"backward requires a scalar output, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root._id: np.ones_like(root.data)}
    if not root.requires_grad:
        return grads
    for node in reversed(_topological(root)):
        g = grads.get(node._id)
        if g is None or node._backward is None:
            continue
        for parent, needed, pg in zip(node._parents, node._needs, node._backward(g)):
            if not needed or pg is None:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = np.array(pg, dtype=DTYPE).reshape(parent.shape)
    return grads


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if not root.requires_grad:
        _run_backward(root)
        return
    grads = _run_backward(root)
    for node in _topological(root):
        if node._backward is None and node._id in grads:
            g = grads[node._id]
            node.grad = g.copy() if node.grad is None else node.grad + g


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Return gradients of scalar ``root`` w.r.t. ``wrt`` without touching ``.grad``."""
    grads = _run_backward(root)
    return [grads.get(t._id, np.zeros_like(t.data)) for t in wrt]


# -- numerical checking ----------------------------------------------------
def finite_diff_check(fn: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` is re-evaluated with each parameter entry perturbed in place; the
    relative error per entry is |a - n| / (|a| + |n| + 1e-12).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")

    def value() -> float:
        with no_grad():
            out = fn()
        v = float(as_tensor(out).data.reshape(-1)[0]) if as_tensor(out).size == 1 else None
        if v is None:
            raise ShapeError("finite_diff_check needs a scalar-valued function")
        if not np.isfinite(v):
            raise NumericError(f"function value is not finite: {v}")
        return v

    value()
    out = fn()
    analytic = grad(out, params)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = value()
            flat[k] = orig - epsilon
            down = value()
            flat[k] = orig
            numeric = (up - down) / (2 * epsilon)
            err = abs(a_flat[k] - numeric) / (abs(a_flat[k]) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst


def check_finite(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite values in tensor {t.name or t!r}")
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NumericError(f"non-finite gradient for tensor {t.name or t!r}")
