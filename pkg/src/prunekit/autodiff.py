"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap numpy arrays. Every differentiable op records its parents and
a backward closure on the output tensor; the recorded graph doubles as the
tape. ``backward`` walks the tape once in reverse topological order and
accumulates gradients into ``.grad`` (explicit ``zero_grads`` to reset).

Shapes are strict: elementwise ops require identical shapes, except that a
1-d vector may be combined with the trailing dimension (bias add, per-unit
scale) and 0-d scalars combine with anything.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def is_leaf(self):
        return self._backward is None

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are wrapped as 0-d tensors
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn):
    """Create an op output, recording it on the tape when grads are live."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def topo_order(root: Tensor) -> list[Tensor]:
    """Recorded ops reachable from ``root``, inputs before consumers."""
    order: list[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every reachable requires_grad tensor.

    Gradients accumulate across calls; use ``zero_grads`` between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topo_order(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in flowing:
                flowing[id(p)] = flowing[id(p)] + pg
            else:
                flowing[id(p)] = pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def _bcast_ok(a: Tensor, b: Tensor) -> bool:
    # identical shapes, a 0-d scalar, or a 1-d vector against the trailing dim
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return True
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return True
    return False


def _unbcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # trailing-dim vector: sum out the leading axes
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _bcast_ok(a, b):
        raise ShapeError(f"add: {a.shape} vs {b.shape}")

    def back(g):
        return _unbcast(g, a.shape), _unbcast(g, b.shape)

    return _node(a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _bcast_ok(a, b):
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")

    def back(g):
        return _unbcast(g, a.shape), _unbcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _bcast_ok(a, b):
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")

    def back(g):
        return _unbcast(g * b.data, a.shape), _unbcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    if not _bcast_ok(a, b):
        raise ShapeError(f"div: {a.shape} vs {b.shape}")

    def back(g):
        return (
            _unbcast(g / b.data, a.shape),
            _unbcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _node(a.data / b.data, (a, b), back)


def tsum(x: Tensor, axis=None) -> Tensor:
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node(x.data.sum(axis=axis), (x,), back)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]

    def back(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _node(x.data.mean(axis=axis), (x,), back)


def tabs(x: Tensor) -> Tensor:
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g * 0.5 / out,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def gelu(x: Tensor) -> Tensor:
    """Exact erf formulation, smooth everywhere (finite differences stay honest)."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    return _node(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clip; gradient passes only through the strictly open region."""
    inside = (x.data > lo) & (x.data < hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def maximum(x: Tensor, floor: float) -> Tensor:
    keep = x.data > floor
    return _node(np.maximum(x.data, floor), (x,), lambda g: (g * keep,))


def index(x: Tensor, i: int) -> Tensor:
    """Scalar element of a 1-d tensor."""
    if x.ndim != 1:
        raise ShapeError(f"index expects 1-d, got {x.shape}")

    def back(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return _node(x.data[i], (x,), back)


def scale_units(x: Tensor, z: Tensor, axis: int) -> Tensor:
    """Multiply ``x`` by the vector ``z`` along ``axis`` (per-unit gating)."""
    if z.ndim != 1 or x.shape[axis] != z.shape[0]:
        raise ContractError(f"scale_units: axis {axis} of {x.shape} vs gate {z.shape}")
    shape = [1] * x.ndim
    shape[axis] = z.shape[0]
    zb = z.data.reshape(shape)

    def back(g):
        other = tuple(i for i in range(x.ndim) if i != (axis % x.ndim))
        return g * zb, (g * x.data).sum(axis=other)

    return _node(x.data * zb, (x, z), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims: {a.shape} @ {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), back)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul on stacked 3-d operands [B,m,k] @ [B,k,n]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: {a.shape} @ {b.shape}")

    def back(g):
        return np.matmul(g, b.data.transpose(0, 2, 1)), np.matmul(a.data.transpose(0, 2, 1), g)

    return _node(np.matmul(a.data, b.data), (a, b), back)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def conv1d(x: Tensor, kernels: Tensor, stride: int) -> Tensor:
    """Valid (no padding) cross-correlation of [C_in, L] with [C_out, C_in, W]."""
    if x.ndim != 2 or kernels.ndim != 3:
        raise ShapeError(f"conv1d: input {x.shape}, kernels {kernels.shape}")
    c_in, length = x.shape
    c_out, kc_in, width = kernels.shape
    if kc_in != c_in:
        raise ShapeError(f"conv1d channels: input {c_in}, kernels expect {kc_in}")
    if width > length:
        raise ShapeError(f"conv1d: kernel width {width} exceeds input length {length}")
    if stride < 1:
        raise ContractError("conv1d stride must be >= 1")
    t_out = (length - width) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, width, axis=1)[:, ::stride, :]
    out = np.tensordot(kernels.data, win, axes=([1, 2], [0, 2]))

    def back(g):
        gk = np.tensordot(g, win, axes=([1], [1]))  # [C_out, C_in, W]
        gx = np.zeros_like(x.data)
        contrib = np.einsum("ot,ocw->ctw", g, kernels.data)
        for w in range(width):
            gx[:, w : w + t_out * stride : stride] += contrib[:, :, w]
        return gx, gk

    return _node(out, (x, kernels), back)


# ---------------------------------------------------------------------------
# normalizations and losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm: empty feature dimension")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _node(xhat * gain.data + bias.data, (x, gain, bias), back)


# ---------------------------------------------------------------------------
# gradient checking oracle


def grad_check(f, x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``f`` must map a tensor to a scalar tensor deterministically. Error is
    max over elements of |g_auto - g_fd| / max(1e-12, |g_auto| + |g_fd|).
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ContractError(f"grad_check eps {eps} outside [1e-8, 1e-4]")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("grad_check: f must return a scalar tensor")
    backward(out)
    g_auto = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    g_fd = np.zeros_like(x.data)
    flat = x.data.copy().reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(Tensor(flat.reshape(x.shape))).data)
            flat[i] = orig - eps
            lo = float(f(Tensor(flat.reshape(x.shape))).data)
            flat[i] = orig
            g_fd.reshape(-1)[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1e-12, np.abs(g_auto) + np.abs(g_fd))
    return float(np.max(np.abs(g_auto - g_fd) / denom))
