"""Dense float64 tensors with reverse-mode autodiff on a per-forward tape.

Every forward pass builds a fresh graph of `Tensor` nodes; `backward` walks it
once and then invalidates it, so stale graphs fail loudly instead of silently
reusing freed state. Only the shapes this model needs are supported (2D matmul,
batched 3D matmul, numpy-style broadcasting for elementwise ops).
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

# Additive pre-softmax bias for disallowed attention entries. Large enough to
# underflow exp() in float64, small enough to never overflow to -inf itself.
MASK_NEG = -1e30

PARAM_GROUPS = (
    "embeddings",
    "projector",
    "llm_lower",
    "llm_higher",
    "heads",
    "fusion",
    "ste",
    "lora",
)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class TapeConsumedError(RuntimeError):
    """backward() was called twice on the same forward graph."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    # -- convenience operators (thin wrappers over module functions) --
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make_node(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        if any(p._consumed for p in parents):
            raise TapeConsumedError("operand belongs to a consumed graph; rebuild the forward pass")
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make_node(data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bw(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make_node(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make_node(data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * c

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * c)

    return _make_node(data, (a,), bw)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * (2.0 * a.data))

    return _make_node(data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * data)

    return _make_node(data, (a,), bw)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad / a.data)

    return _make_node(data, (a,), bw)


def sin(a: Tensor) -> Tensor:
    data = np.sin(a.data)

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * np.cos(a.data))

    return _make_node(data, (a,), bw)


def cos(a: Tensor) -> Tensor:
    data = np.cos(a.data)

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * -np.sin(a.data))

    return _make_node(data, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * (1.0 - data * data))

    return _make_node(data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * data * (1.0 - data))

    return _make_node(data, (a,), bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU; the backward differentiates the approximation."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    data = 0.5 * x * (1.0 + th)

    def bw(out):
        if a.requires_grad:
            du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            local = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
            a._accumulate(out.grad * local)

    return _make_node(data, (a,), bw)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.data.shape))

    return _make_node(data, (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def bw(out):
        if a.requires_grad:
            a._accumulate(np.transpose(out.grad, inv))

    return _make_node(data, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(out.grad[tuple(idx)])

    return _make_node(data, tuple(tensors), bw)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0 (embedding lookup / position selection)."""
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def bw(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            a._accumulate(g)

    return _make_node(data, (a,), bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(out):
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape))

    return _make_node(data, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# matrix ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def bw(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make_node(data, (a, b), bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the last two axes (leading axes must match)."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm expects 3D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"bmm shapes incompatible: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def bw(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make_node(data, (a, b), bw)


# ---------------------------------------------------------------------------
# fused neural-net ops
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor, allow: np.ndarray) -> Tensor:
    """Row softmax with a boolean allow-mask over the last axis.

    Disallowed entries get the additive MASK_NEG bias and come out exactly 0.
    A fully-masked row yields an all-zero row and a warning, never NaN.
    """
    allow = np.asarray(allow, dtype=bool)
    if allow.shape != x.data.shape[-allow.ndim:] and allow.shape != x.data.shape:
        try:
            np.broadcast_shapes(x.data.shape, allow.shape)
        except ValueError:
            raise ShapeError(f"mask shape {allow.shape} does not match logits {x.data.shape}")
    allow_b = np.broadcast_to(allow, x.data.shape)
    logits = np.where(allow_b, x.data, MASK_NEG)
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    e = np.where(allow_b, e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    empty = denom == 0.0
    if np.any(empty):
        warnings.warn("softmax_rows: fully-masked row(s) produced all-zero output")
        denom = np.where(empty, 1.0, denom)
    p = e / denom

    def bw(out):
        if x.requires_grad:
            g = out.grad
            inner = (g * p).sum(axis=-1, keepdims=True)
            x._accumulate(p * (g - inner))

    return _make_node(p, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm params must have shape ({d},), got {gamma.data.shape} / {beta.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def bw(out):
        g = out.grad
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gx - m1 - xhat * m2))

    return _make_node(data, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor):
    """Assign grad = d(loss)/d(tensor) to every reachable requires_grad tensor."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise TapeConsumedError("backward() already ran on this graph; rebuild the forward pass")
    if not loss.requires_grad:
        loss._consumed = True
        return
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node)
    for node in order:
        if node._parents:  # interior nodes are freed; leaves keep their grads
            node._consumed = True
            node._backward = None
            node._parents = ()
            node.grad = None
    loss._consumed = True


# ---------------------------------------------------------------------------
# parameters and initialization
# ---------------------------------------------------------------------------

@dataclass
class Parameter:
    """Named trainable tensor belonging to one freezing group."""

    name: str
    tensor: Tensor
    group: str

    def __post_init__(self):
        if self.group not in PARAM_GROUPS:
            raise ContractError(f"unknown parameter group {self.group!r}")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients of f at x.

    f must be a deterministic scalar function of x; the relative error per
    coordinate is |analytic - cd| / max(|analytic|, |cd|, 1e-8).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    prev = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        x.requires_grad = prev
        raise ContractError("grad_check requires f to return a scalar Tensor")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else np.array(x.grad, copy=True)
    x.grad = None
    x.requires_grad = prev

    if not x.data.flags["C_CONTIGUOUS"]:
        x.data = np.ascontiguousarray(x.data)
    fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(analytic - fd) / denom))
