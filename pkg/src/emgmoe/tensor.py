"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation appends one entry to the active :class:`Tape`.
``backward(loss)`` replays the tape in reverse, visiting each entry exactly
once, and accumulates gradients into every tensor with ``requires_grad`` set.
Entries are recorded in creation order, so the tape is topologically sorted by
construction and two replays of the same tape produce bit-identical gradients.

Broadcasting is deliberately restricted: binary elementwise ops accept either
two tensors of identical shape or a tensor and a python scalar. Anything else
must go through :func:`expand`, which makes the replication explicit.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf as _erf

from .errors import ConfigError, DomainError, ShapeError


class _Node:
    __slots__ = ("outs", "inputs", "backward")

    def __init__(self, outs, inputs, backward):
        self.outs = outs
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, outs, inputs, backward):
        self.nodes.append(_Node(outs, inputs, backward))

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_tape = Tape()
_grad_enabled = True


def active_tape() -> Tape:
    return _tape


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; definitions below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _record(outs, inputs, backward_fn):
    """Register a tape entry if recording is on and any input is tracked."""
    if _grad_enabled and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    ):
        out_tuple = outs if isinstance(outs, tuple) else (outs,)
        for o in out_tuple:
            o.requires_grad = True
        _tape.record(out_tuple, inputs, backward_fn)
    return outs


def backward(loss: Tensor):
    """Populate ``grad`` for every tracked tensor reachable from ``loss``.

    ``loss`` must be a scalar produced through recorded operations.
    """
    if loss.size != 1:
        raise ConfigError(f"backward() needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_tape.nodes):
        grads = [o.grad for o in node.outs]
        if all(g is None for g in grads):
            continue
        grads = [
            np.zeros_like(o.data) if g is None else g
            for g, o in zip(grads, node.outs)
        ]
        in_grads = node.backward(*grads)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if t.grad is None:
                if not isinstance(g, np.ndarray):
                    g = np.asarray(g, dtype=np.float64)
                elif g.base is not None or any(g is og for og in grads):
                    # the rule handed back a view or a shared buffer
                    g = np.array(g, dtype=np.float64)
                t.grad = g
            else:
                t.grad += g


def _as_pair(a, b, opname):
    """Resolve a binary op's operands: matched shapes or tensor-scalar only."""
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and b_t:
        if a.shape != b.shape:
            raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")
        return a, b
    if a_t and np.isscalar(b):
        return a, float(b)
    if b_t and np.isscalar(a):
        return float(a), b
    raise ShapeError(f"{opname}: unsupported operands {type(a)}, {type(b)}")


def _scalar_reduce(g, operand):
    """Gradient of a scalar operand of a tensor-scalar op."""
    return float(np.sum(g))


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = _as_pair(a, b, "add")
    ad = a.data if isinstance(a, Tensor) else a
    bd = b.data if isinstance(b, Tensor) else b
    out = Tensor(ad + bd)

    def bwd(g):
        return (g if isinstance(a, Tensor) else None,
                g if isinstance(b, Tensor) else None)

    return _record(out, (a, b), bwd)


def sub(a, b):
    a, b = _as_pair(a, b, "sub")
    ad = a.data if isinstance(a, Tensor) else a
    bd = b.data if isinstance(b, Tensor) else b
    out = Tensor(ad - bd)

    def bwd(g):
        return (g if isinstance(a, Tensor) else None,
                -g if isinstance(b, Tensor) else None)

    return _record(out, (a, b), bwd)


def neg(a):
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def mul(a, b):
    """Hadamard product (matched shapes) or scalar scaling."""
    a, b = _as_pair(a, b, "mul")
    ad = a.data if isinstance(a, Tensor) else a
    bd = b.data if isinstance(b, Tensor) else b
    out = Tensor(ad * bd)

    def bwd(g):
        return (g * bd if isinstance(a, Tensor) else None,
                g * ad if isinstance(b, Tensor) else None)

    return _record(out, (a, b), bwd)


def div(a, b):
    a, b = _as_pair(a, b, "div")
    ad = a.data if isinstance(a, Tensor) else a
    bd = b.data if isinstance(b, Tensor) else b
    out = Tensor(ad / bd)

    def bwd(g):
        ga = g / bd if isinstance(a, Tensor) else None
        gb = -g * ad / (bd * bd) if isinstance(b, Tensor) else None
        return ga, gb

    return _record(out, (a, b), bwd)


def square(a):
    out = Tensor(a.data * a.data)
    return _record(out, (a,), lambda g: (2.0 * g * a.data,))


def matmul(a: Tensor, b: Tensor):
    """Matrix product; supports stacked leading batch axes on either side."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must have >= 2 dims")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        ga = np.matmul(g, bt)
        gb = np.matmul(at, g)
        # collapse broadcast batch axes back onto the stored shapes
        while ga.ndim > a.ndim:
            ga = ga.sum(axis=0)
        while gb.ndim > b.ndim:
            gb = gb.sum(axis=0)
        return ga.reshape(a.shape), gb.reshape(b.shape)

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return _record(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def expand(a: Tensor, shape):
    """Explicit broadcast of ``a`` to ``shape`` (axes of size 1 replicate)."""
    try:
        out_data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}") from exc
    out = Tensor(out_data.copy())

    def bwd(g):
        ga = g
        while ga.ndim > a.ndim:
            ga = ga.sum(axis=0)
        for ax, (sa, so) in enumerate(zip(a.shape, ga.shape)):
            if sa == 1 and so != 1:
                ga = ga.sum(axis=ax, keepdims=True)
        return (ga.reshape(a.shape),)

    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape):
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes):
    inv = np.argsort(axes)
    out = Tensor(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


def stack(tensors, axis=0):
    tensors = list(tensors)
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(out, tuple(tensors), bwd)


def getitem(a: Tensor, key):
    out = Tensor(a.data[key])

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _record(out, (a,), bwd)


def take_rows(a: Tensor, idx):
    """Select rows along axis 0 by an integer index array."""
    idx = np.asarray(idx, dtype=np.intp)
    return getitem(a, idx)


def scatter_rows(values: Tensor, idx, length: int):
    """Place ``values`` rows at positions ``idx`` of a zero tensor of
    ``length`` rows. ``idx`` entries must be unique."""
    idx = np.asarray(idx, dtype=np.intp)
    out_data = np.zeros((length,) + values.shape[1:])
    out_data[idx] = values.data
    out = Tensor(out_data)
    return _record(out, (values,), lambda g: (g[idx],))


def masked_fill(a: Tensor, mask, value):
    """Set entries where ``mask`` is True to ``value``; grads flow only
    through the untouched entries."""
    mask = np.asarray(mask, dtype=bool)
    data = a.data.copy()
    data[mask] = value
    out = Tensor(data)

    def bwd(g):
        ga = g.copy()
        ga[mask] = 0.0
        return (ga,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def exp(a: Tensor):
    e = np.exp(a.data)
    out = Tensor(e)
    return _record(out, (a,), lambda g: (g * e,))


def log(a: Tensor):
    if np.any(a.data <= 0.0):
        raise DomainError("log: non-positive input")
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor):
    s = _sigmoid_nd(a.data)
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid_nd(x):
    # tanh form is overflow-safe and fast under numpy
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus_nd(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def relu(a: Tensor):
    m = a.data > 0
    out = Tensor(np.where(m, a.data, 0.0))
    return _record(out, (a,), lambda g: (g * m,))


def softplus(a: Tensor):
    out = Tensor(_softplus_nd(a.data))
    s = _sigmoid_nd(a.data)
    return _record(out, (a,), lambda g: (g * s,))


def silu(a: Tensor):
    s = _sigmoid_nd(a.data)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def normal_cdf(a: Tensor):
    """Standard normal CDF, elementwise."""
    out = Tensor(0.5 * (1.0 + _erf(a.data / np.sqrt(2.0))))
    pdf = np.exp(-0.5 * a.data**2) / np.sqrt(2.0 * np.pi)
    return _record(out, (a,), lambda g: (g * pdf,))


def softmax(a: Tensor, axis=-1):
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (a,), bwd)


def logsumexp(a: Tensor, axis=-1):
    m = np.max(a.data, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.data - safe)
    s = e.sum(axis=axis, keepdims=True)
    out = Tensor(np.squeeze(np.log(s) + safe, axis=axis))

    def bwd(g):
        soft = e / s
        return (np.expand_dims(g, axis) * soft,)

    return _record(out, (a,), bwd)


def layer_norm(a: Tensor, axis=-1, eps: float = 1e-5):
    """Normalize to zero mean / unit variance along ``axis`` (no affine)."""
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y)
    n = a.shape[axis]

    def bwd(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return ((g - gm - y * gy) * inv,)

    return _record(out, (a,), bwd)


def global_max_pool(a: Tensor):
    """Max over the trailing two (spatial) axes."""
    if a.ndim < 3:
        raise ShapeError(f"global_max_pool: need >=3 dims, got {a.shape}")
    flat = a.data.reshape(a.shape[:-2] + (-1,))
    arg = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def bwd(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
        return (gf.reshape(a.shape),)

    return _record(out, (a,), bwd)


def hadamard(a, b):
    return mul(a, b)


# Registered elementwise ops, used by the gradient-check property tests.
ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "silu": silu,
    "exp": exp,
    "log": log,
    "hadamard": hadamard,
    "add": add,
    "concat": concat,
    "layer_norm": layer_norm,
    "softmax": softmax,
    "global_max_pool": global_max_pool,
}


def assert_finite(a: Tensor, context: str = "tensor"):
    if not np.all(np.isfinite(a.data)):
        from .errors import NumericalError

        raise NumericalError(f"non-finite values in {context}")
