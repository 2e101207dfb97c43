"""Dense-tensor engine with reverse-mode differentiation.

Design notes that matter to callers:

* The graph is define-by-run: every op records a backward closure on the
  output tensor, and ``backward(loss)`` walks the tape once.  A graph is
  consumable exactly once per forward pass; reusing a consumed segment
  raises :class:`ContractError`.
* Storage is float32 by default (float64 for the gradient-check harness);
  full-tensor reductions accumulate in float64 before casting back.
* Reductions, activations and the fused ops (softmax, layer norm,
  conv1d, ...) all validate the shape contracts they document and raise
  typed errors, never assert.
* A graph and its tensors belong to one thread for a forward/backward
  pass.  Parameters may be shared read-only across threads after
  training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, ParameterError

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense n-d array plus its place in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):  # numpy scalar: keep its dtype
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------
    def _accum(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Wrap ``data`` as a leaf tensor of the given dtype."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: Array, parents, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def _unbroadcast(g: Array, shape) -> Array:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad tensor.

    ``loss`` must be a scalar.  The traversed graph segment is marked
    consumed and its edges are released; a second backward through any
    part of it raises :class:`ContractError`.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss._consumed:
        raise ContractError("graph already consumed by a previous backward pass")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._consumed:
            raise ContractError("graph segment already consumed; rebuild the forward pass")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
        if node._parents:
            node._consumed = True
            node._parents = ()
            node._backward = None
            node.grad = None  # intermediate grads are not retained


# ----------------------------------------------------------------------
# elementwise / binary ops
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accum(-g)

    return _make(-a.data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"inner extents differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _make(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a 2-d tensor")

    def bwd(g):
        if a.requires_grad:
            a._accum(g.T)

    return _make(np.ascontiguousarray(a.data.T), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


# ----------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * (a.data > 0))

    return _make(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    # two-branch form avoids exp overflow on large-magnitude logits
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * out * (1.0 - out))

    return _make(out, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = (a.data * cdf).astype(a.data.dtype)

    def bwd(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
            a._accum(g * (cdf + a.data * pdf))

    return _make(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * out)

    return _make(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return _make(out, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * 0.5 / np.maximum(out, np.finfo(out.dtype).tiny))

    return _make(out, (a,), bwd)


def absolute(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accum(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * ((a.data > lo) & (a.data < hi)))

    return _make(out, (a,), bwd)


# ----------------------------------------------------------------------
# fused row-wise ops
# ----------------------------------------------------------------------

def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    if a.data.ndim != 2:
        raise DimensionError("softmax_rows expects a 2-d tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=1, keepdims=True)
            a._accum(out * (g - dot))

    return _make(out, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    if a.data.ndim != 2:
        raise DimensionError("layer_norm expects a 2-d tensor")
    n = a.data.shape[1]
    if n < 1 or gain.data.shape != (n,) or bias.data.shape != (n,):
        raise DimensionError("layer_norm gain/bias must be 1-d of the row width")
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        if gain.requires_grad:
            gain._accum((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=1, keepdims=True)
            m2 = (gx * xhat).mean(axis=1, keepdims=True)
            a._accum((gx - m1 - xhat * m2) * inv)

    return _make(out, (a, gain, bias), bwd)


def l2_normalize_rows(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each row to unit L2 norm (eps keeps zero rows finite)."""
    if a.data.ndim != 2:
        raise DimensionError("l2_normalize_rows expects a 2-d tensor")
    sq = (a.data * a.data).sum(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(sq + eps)
    out = a.data * inv

    def bwd(g):
        if a.requires_grad:
            dot = (g * a.data).sum(axis=1, keepdims=True)
            a._accum(inv * g - a.data * (dot * inv ** 3))

    return _make(out, (a,), bwd)


def row_norms(a: Tensor) -> Tensor:
    """L2 norm of each row, returned as a length-m vector."""
    if a.data.ndim != 2:
        raise DimensionError("row_norms expects a 2-d tensor")
    norms = np.sqrt((a.data * a.data).sum(axis=1))

    def bwd(g):
        if a.requires_grad:
            safe = np.maximum(norms, np.finfo(norms.dtype).tiny)
            a._accum(a.data * (g / safe)[:, None])

    return _make(norms, (a,), bwd)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    # accumulate in float64, store back in the working dtype
    out = a.data.sum(dtype=np.float64).astype(a.data.dtype)

    def bwd(g):
        if a.requires_grad:
            a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _make(np.asarray(out), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise DimensionError("mean of an empty tensor")
    out = (a.data.sum(dtype=np.float64) / n).astype(a.data.dtype)

    def bwd(g):
        if a.requires_grad:
            a._accum(np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype))

    return _make(np.asarray(out), (a,), bwd)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def bwd(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.data.shape).copy())

    return _make(out, (a,), bwd)


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.data.shape[axis]
    return mul(sum_axis(a, axis, keepdims), 1.0 / n)


# ----------------------------------------------------------------------
# structural ops
# ----------------------------------------------------------------------

def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ContractError("concat of an empty list")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                p._accum(g[tuple(idx)])

    return _make(out, tuple(parts), bwd)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows (axis 0); the backward pass scatter-adds into the source."""
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accum(buf)

    return _make(out, (a,), bwd)


def pad_rows(a: Tensor, before: int, after: int) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("pad_rows expects a 2-d tensor")
    out = np.pad(a.data, ((before, after), (0, 0)))

    def bwd(g):
        if a.requires_grad:
            a._accum(g[before:before + a.data.shape[0]])

    return _make(out, (a,), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[start:stop].copy()

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[start:stop] = g
            a._accum(buf)

    return _make(out, (a,), bwd)


# ----------------------------------------------------------------------
# conv1d / dropout
# ----------------------------------------------------------------------

def conv1d(x: Tensor, kernel: Tensor, causal: bool = False) -> Tensor:
    """Temporal convolution over a (T, D_in) sequence.

    ``kernel`` has shape (k, D_in, D_out).  Output keeps length T; causal
    mode pads only the past so output[t] depends on x[<=t], non-causal
    mode centers the window with zero padding on both sides.
    """
    if x.data.ndim != 2 or kernel.data.ndim != 3:
        raise DimensionError("conv1d expects x (T, D_in) and kernel (k, D_in, D_out)")
    k, d_in, d_out = kernel.data.shape
    if k < 1:
        raise DimensionError("conv1d kernel size must be >= 1")
    if d_in != x.data.shape[1]:
        raise DimensionError(f"conv1d channel mismatch: x has {x.data.shape[1]}, kernel {d_in}")
    t = x.data.shape[0]
    pad_l = k - 1 if causal else (k - 1) // 2
    pad_r = 0 if causal else k - 1 - pad_l
    xp = np.pad(x.data, ((pad_l, pad_r), (0, 0)))
    out = np.zeros((t, d_out), dtype=x.data.dtype)
    for j in range(k):
        out += xp[j:j + t] @ kernel.data[j]

    def bwd(g):
        if kernel.requires_grad:
            dk = np.empty_like(kernel.data)
            for j in range(k):
                dk[j] = xp[j:j + t].T @ g
            kernel._accum(dk)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[j:j + t] += g @ kernel.data[j].T
            x._accum(dxp[pad_l:pad_l + t])

    return _make(out, (x, kernel), bwd)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: eval mode and p=0 are the identity."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.data.dtype)
    mask = keep * scale
    out = x.data * mask

    def bwd(g):
        if x.requires_grad:
            x._accum(g * mask)

    return _make(out, (x,), bwd)


# ----------------------------------------------------------------------
# selection helper (no gradient through indices)
# ----------------------------------------------------------------------

def top_k_indices(values: Array, k: int) -> Array:
    """Indices of the k largest values, ties won by the lowest index,
    returned sorted ascending."""
    if k < 1 or k > values.shape[0]:
        raise ContractError(f"top-k count {k} outside [1, {values.shape[0]}]")
    order = np.argsort(-values, kind="stable")[:k]
    return np.sort(order)


# ----------------------------------------------------------------------
# parameters, linear layer, Adam
# ----------------------------------------------------------------------

def param(rng: np.random.Generator, shape, scale: float | None = None, dtype=np.float32) -> Tensor:
    """Gaussian-initialized trainable tensor; default scale 1/sqrt(fan_in)."""
    if scale is None:
        fan_in = shape[0] if len(shape) > 1 else shape[0]
        scale = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.normal(0.0, scale, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


@dataclass
class Linear:
    """Affine map x @ w + b over the last axis of a 2-d input."""

    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, dtype=np.float32) -> "Linear":
        return cls(param(rng, (d_in, d_out), dtype=dtype), zeros_param((d_out,), dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def named(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


@dataclass
class AdamState:
    """Adam optimizer state for one parameter group."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params: list[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; clears grads afterwards."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {i} has no gradient; run backward first")
        if p.grad.shape != p.data.shape:
            raise ContractError(f"gradient shape mismatch on parameter {i}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.data.dtype)
        p.grad = None
