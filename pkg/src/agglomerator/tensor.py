"""Reverse-mode automatic differentiation over numpy arrays.

Just enough tensor machinery for the column lattice: a `Tensor` wraps an
ndarray plus an optional record of the operation that produced it. Ops build
an acyclic graph; `Tensor.backward()` walks it once in reverse topological
order, accumulating vector-Jacobian products into leaf gradients, then
releases the graph.

Float32 is the training default; pass float64 arrays for tight gradient
checks. Ops preserve the dtype of their inputs.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _sp

__all__ = [
    "Tensor", "ShapeError", "no_grad", "tensor", "parameter",
    "matmul", "conv2d", "maxpool2d", "relu", "gelu", "sine", "exp", "log",
    "softmax", "l2_normalize", "layer_norm", "dropout", "reshape",
    "transpose", "concat", "take", "take_along", "mean", "tsum",
    "zero_norm_count", "reset_zero_norm_count",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


_GRAD_ENABLED = True

# Zero-vector inputs to l2_normalize return zeros instead of raising; the
# occurrences are counted here so training code can surface them.
_ZERO_NORM_COUNT = 0


def zero_norm_count() -> int:
    return _ZERO_NORM_COUNT


def reset_zero_norm_count() -> None:
    global _ZERO_NORM_COUNT
    _ZERO_NORM_COUNT = 0


class no_grad:
    """Context manager disabling graph recording (eval-mode forward)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class _Op:
    """Record of a producing operation: parents and a VJP closure."""

    __slots__ = ("name", "parents", "vjp")

    def __init__(self, name, parents, vjp):
        self.name = name
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """An ndarray participating in reverse-mode differentiation."""

    __slots__ = ("value", "grad", "requires_grad", "op", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value)
        if self.value.dtype not in (np.float32, np.float64):
            self.value = self.value.astype(np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype}{tag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division not supported; use mul + reciprocal scalars")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def backward(self):
        """Accumulate gradients of this scalar into every requires_grad leaf.

        Visits each graph node exactly once (reverse topological order) and
        releases the graph afterwards; a second call on the same graph
        raises.
        """
        if self.value.shape != ():
            raise ValueError(f"backward requires a scalar loss, got shape {self.value.shape}")
        if self.op is None:
            raise RuntimeError("backward called on a tensor detached from any graph "
                               "(no producing op recorded, or graph already released)")

        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node.op is not None:
                for p in node.op.parents:
                    if id(p) not in seen and (p.op is not None or p.requires_grad):
                        stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=self.value.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.op is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.value)
                    node.grad += g
                continue
            parent_grads = node.op.vjp(g)
            for p, pg in zip(node.op.parents, parent_grads):
                if pg is None:
                    continue
                if p.op is None:
                    if p.requires_grad:
                        if p.grad is None:
                            p.grad = np.zeros_like(p.value)
                        p.grad += pg
                else:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node.op = None  # release graph as we go


def tensor(value, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Build a leaf tensor with an explicit dtype."""
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=requires_grad)


def parameter(value, name: str = "") -> Tensor:
    return Tensor(np.asarray(value), requires_grad=True, name=name)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(value, name, parents, vjp) -> Tensor:
    """Wrap an op result, recording the graph edge only when needed."""
    out = Tensor(value)
    if _GRAD_ENABLED and any(p.requires_grad or p.op is not None for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out.op = _Op(name, parents, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and broadcast arithmetic


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.dtype))
    b = _as_tensor(b, a)
    try:
        value = a.value + b.value
    except ValueError:
        raise ShapeError(f"add: operands not broadcastable: {a.shape} vs {b.shape}") from None
    na, nb = a.requires_grad or a.op is not None, b.requires_grad or b.op is not None
    ash, bsh = a.shape, b.shape

    def vjp(g):
        return (_unbroadcast(g, ash) if na else None,
                _unbroadcast(g, bsh) if nb else None)

    return _make(value, "add", (a, b), vjp)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a  # scalar * tensor
    if not isinstance(b, Tensor):
        s = float(b)
        av = a.value

        def vjp_s(g):
            return (g * s,)

        return _make(av * s, "scale", (a,), vjp_s)
    try:
        value = a.value * b.value
    except ValueError:
        raise ShapeError(f"mul: operands not broadcastable: {a.shape} vs {b.shape}") from None
    na, nb = a.requires_grad or a.op is not None, b.requires_grad or b.op is not None
    av, bv = a.value, b.value

    def vjp(g):
        return (_unbroadcast(g * bv, av.shape) if na else None,
                _unbroadcast(g * av, bv.shape) if nb else None)

    return _make(value, "mul", (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports 2D and leading-batch-dim stacks."""
    if a.shape[-1] != b.shape[-2 if b.value.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} vs {b.shape}")
    value = a.value @ b.value
    na, nb = a.requires_grad or a.op is not None, b.requires_grad or b.op is not None
    av, bv = a.value, b.value

    def vjp(g):
        ga = gb = None
        if na:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if nb:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _make(value, "matmul", (a, b), vjp)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    value = np.maximum(x.value, 0)
    mask = x.value > 0

    def vjp(g):
        return (g * mask,)

    return _make(value, "relu", (x,), vjp)


_INV_SQRT_2PI = np.float64(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x: Tensor) -> Tensor:
    """Gaussian-CDF gelu, x * Phi(x); the exact form, not the tanh fit."""
    xv = x.value
    phi = _sp.ndtr(xv)  # standard normal CDF, exact
    value = xv * phi

    def vjp(g):
        pdf = np.exp(-0.5 * xv * xv) * xv.dtype.type(_INV_SQRT_2PI)
        return (g * (phi + xv * pdf),)

    return _make(value.astype(xv.dtype, copy=False), "gelu", (x,), vjp)


def sine(x: Tensor) -> Tensor:
    xv = x.value

    def vjp(g):
        return (g * np.cos(xv),)

    return _make(np.sin(xv), "sine", (x,), vjp)


def exp(x: Tensor) -> Tensor:
    value = np.exp(x.value)

    def vjp(g):
        return (g * value,)

    return _make(value, "exp", (x,), vjp)


def log(x: Tensor) -> Tensor:
    xv = x.value

    def vjp(g):
        return (g / xv,)

    return _make(np.log(xv), "log", (x,), vjp)


# ---------------------------------------------------------------------------
# reductions and normalizations


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    value = x.value.sum(axis=axis, keepdims=keepdims)
    xsh = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xsh).astype(g.dtype, copy=False),)

    return _make(value, "sum", (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    value = x.value.mean(axis=axis, keepdims=keepdims)
    count = x.value.size // max(value.size, 1)
    xsh = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, xsh) / count).astype(g.dtype, copy=False),)

    return _make(value, "mean", (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along `axis`; rows sum to 1."""
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * value).sum(axis=axis, keepdims=True)
        return (value * (g - dot),)

    return _make(value, "softmax", (x,), vjp)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Scale vectors along `axis` to unit L2 norm.

    Zero vectors pass through unchanged (their normalization is undefined);
    each occurrence bumps the module counter instead of raising, since
    contrastive features can transiently collapse early in training.
    """
    global _ZERO_NORM_COUNT
    xv = x.value
    norm = np.sqrt((xv * xv).sum(axis=axis, keepdims=True))
    zero = norm == 0
    if np.any(zero):
        _ZERO_NORM_COUNT += int(zero.sum())
    safe = np.where(zero, 1.0, norm).astype(xv.dtype, copy=False)
    value = xv / safe

    def vjp(g):
        dot = (g * value).sum(axis=axis, keepdims=True)
        gx = (g - value * dot) / safe
        return (np.where(zero, 0.0, gx).astype(g.dtype, copy=False),)

    return _make(value, "l2_normalize", (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the learned affine."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match feature dim of {x.shape}")
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    value = xhat * gamma.value + beta.value
    ng, nb = gamma.requires_grad, beta.requires_grad
    nx = x.requires_grad or x.op is not None
    gv = gamma.value
    d = xv.shape[-1]
    red = tuple(range(xv.ndim - 1))

    def vjp(g):
        ggamma = (g * xhat).sum(axis=red) if ng else None
        gbeta = g.sum(axis=red) if nb else None
        gx = None
        if nx:
            gh = g * gv
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            gx = gx.astype(g.dtype, copy=False)
        return gx, ggamma, gbeta

    return _make(value.astype(xv.dtype, copy=False), "layer_norm", (x, gamma, beta), vjp)


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not train or p <= 0.0:
        return x
    if not (0.0 <= p < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = rng.random(x.shape, dtype=np.float32) >= p
    mask = keep.astype(x.dtype)
    mask *= x.dtype.type(1.0 / (1.0 - p))
    value = x.value * mask

    def vjp(g):
        return (g * mask,)

    return _make(value, "dropout", (x,), vjp)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    xsh = x.shape
    try:
        value = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {xsh} as {tuple(shape)}") from None

    def vjp(g):
        return (g.reshape(xsh),)

    return _make(value, "reshape", (x,), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _make(x.value.transpose(axes), "transpose", (x,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    value = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(value, "concat", tuple(tensors), vjp)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along `axis` (the axis is dropped)."""
    value = np.take(x.value, index, axis=axis)
    xsh = x.shape

    def vjp(g):
        out = np.zeros(xsh, dtype=g.dtype)
        sl = [slice(None)] * len(xsh)
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return _make(value, "take", (x,), vjp)


def take_along(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather per-row entries (np.take_along_axis); scatter-adds on backward."""
    idx = np.asarray(indices)
    value = np.take_along_axis(x.value, idx, axis=axis)
    xsh = x.shape
    ax = axis % len(xsh)

    def vjp(g):
        out = np.zeros(xsh, dtype=g.dtype)
        grid = np.indices(idx.shape, sparse=True)
        np.add.at(out, tuple(idx if i == ax else grid[i] for i in range(len(xsh))), g)
        return (out,)

    return _make(value, "gather", (x,), vjp)


# ---------------------------------------------------------------------------
# 2D convolution and pooling (NHWC layout)


def _conv_cols(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution, x: (N,H,W,Cin), w: (kh,kw,Cin,Cout) -> (N,Ho,Wo,Cout)."""
    n, h, wid, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {w.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit input {x.shape} "
                         f"with stride={stride} padding={padding}")
    xp = np.pad(x.value, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.value
    cols = _conv_cols(xp, kh, kw, stride, ho, wo)
    cols2 = cols.reshape(n * ho * wo, kh * kw * cin)
    w2 = w.value.reshape(kh * kw * cin, cout)
    value = (cols2 @ w2).reshape(n, ho, wo, cout)
    nx = x.requires_grad or x.op is not None
    nw = w.requires_grad or w.op is not None
    xsh, psh = x.shape, xp.shape

    def vjp(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols2.T @ g2).reshape(kh, kw, cin, cout) if nw else None
        gx = None
        if nx:
            gcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros(psh, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + xsh[1], padding:padding + xsh[2], :] if padding else gxp
        return gx, gw

    return _make(value, "conv2d", (x, w), vjp)


def maxpool2d(x: Tensor, size: int, stride: int | None = None) -> Tensor:
    """Max pooling over size x size windows (no padding)."""
    stride = stride or size
    n, h, w, c = x.shape
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"maxpool2d: window {size} does not fit input {x.shape}")
    cols = _conv_cols(x.value, size, size, stride, ho, wo)  # (n,ho,wo,size,size,c)
    flat = cols.reshape(n, ho, wo, size * size, c)
    arg = flat.argmax(axis=3)
    value = np.take_along_axis(flat, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    xsh = x.shape

    def vjp(g):
        gx = np.zeros(xsh, dtype=g.dtype)
        for t in range(size * size):
            i, j = divmod(t, size)
            m = (arg == t)
            if not m.any():
                continue
            gx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g * m
        return (gx,)

    return _make(value, "maxpool2d", (x,), vjp)
