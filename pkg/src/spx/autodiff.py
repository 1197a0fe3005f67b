"""Small reverse-mode autodiff engine over numpy arrays.

Every differentiable quantity in the package is a :class:`Tensor`. Operations
record their parents and a backward closure; :meth:`Tensor.backward` builds a
:class:`Tape` (reverse topological order) and replays it.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_VALUE = -1e9

_DEFAULT_DTYPE = [np.float32]
_GRAD_ENABLED = [True]


def default_dtype():
    return _DEFAULT_DTYPE[0]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (float32 / float64)."""
    prev = _DEFAULT_DTYPE[0]
    _DEFAULT_DTYPE[0] = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE[0] = prev


@contextlib.contextmanager
def no_grad():
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        Tape.from_output(self).backward(self, grad)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(as_tensor(other, like=self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Ordered record of the operations that produced an output.

    ``nodes`` lists every tensor reachable from the output in topological
    order (inputs first); backward replays it in reverse.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(out, False)]
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
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def backward(self, out: Tensor, grad):
        grads = {id(out): np.asarray(grad, dtype=out.data.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth, so finite differences behave)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward)


# -- shape ----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis=-1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(out, tensors, backward)


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-pad axes 1 and 2 of a (B, H, W, C) tensor."""
    out = np.pad(a.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))

    def backward(g):
        return (g[:, pad : g.shape[1] - pad, pad : g.shape[2] - pad, :],)

    return _make(out, (a,), backward)


# -- reductions -----------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim >= 2 and b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; every operand index must appear in the other operand or the output."""
    ins, out_s = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb + out_s), (sb, sa + out_s)):
        for ch in s:
            if ch not in other:
                raise ValueError(f"index {ch!r} in {spec!r} is summed within a single operand")
    out = np.einsum(spec, a.data, b.data, optimize=True)

    def backward(g):
        ga = np.einsum(f"{out_s},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_s},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


# -- indexing -------------------------------------------------------------

def _scatter_rows(g2, idx, n):
    """Sum rows of g2 (len(idx), k) into n buckets."""
    out = np.zeros((n, g2.shape[1]), dtype=g2.dtype)
    np.add.at(out, idx, g2)
    return out


def gather(x: Tensor, idx, axis: int = 1) -> Tensor:
    """``np.take(x, idx, axis)`` with the index array's shape spliced in at ``axis``."""
    idx = np.asarray(idx)
    ax = axis % x.ndim
    out = np.take(x.data, idx, axis=ax)
    n = x.shape[ax]

    def backward(g):
        # g: x.shape[:ax] + idx.shape + x.shape[ax+1:]
        lead = x.shape[:ax]
        trail = x.shape[ax + 1 :]
        gm = np.moveaxis(
            g.reshape(lead + (idx.size,) + trail), len(lead), 0
        ).reshape(idx.size, -1)
        acc = _scatter_rows(gm, idx.ravel(), n)
        acc = acc.reshape((n,) + lead + trail)
        return (np.ascontiguousarray(np.moveaxis(acc, 0, ax)),)

    return _make(out, (x,), backward)


def scatter_add(src: Tensor, idx, n: int, axis: int = 1) -> Tensor:
    """Inverse of :func:`gather`: sum slices of ``src`` into ``n`` buckets along ``axis``."""
    idx = np.asarray(idx)
    ax = axis % src.ndim
    lead = src.shape[:ax]
    trail = src.shape[ax + idx.ndim :]
    sm = np.moveaxis(src.data.reshape(lead + (idx.size,) + trail), len(lead), 0).reshape(idx.size, -1)
    acc = _scatter_rows(sm, idx.ravel(), n).reshape((n,) + lead + trail)
    out = np.ascontiguousarray(np.moveaxis(acc, 0, ax))

    def backward(g):
        return (np.take(g, idx, axis=ax),)

    return _make(out, (src,), backward)


# -- nn primitives ----------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Stable softmax. ``mask`` (bool, broadcastable) marks valid entries; invalid
    entries get an additive ``MASK_VALUE`` surrogate and so receive zero weight."""
    data = x.data
    if np.isnan(data).any():
        raise FloatingPointError("softmax received NaN input")
    if mask is not None:
        data = data + np.where(mask, 0.0, MASK_VALUE).astype(data.dtype)
    shifted = data - data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            c = x.shape[-1]
            gx = inv / c * (c * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward)


def _windows(xp, k, stride, ho, wo):
    b, _, _, c = xp.shape
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, ho, wo, k, k, c),
        strides=(s[0], s[1] * stride, s[2] * stride, s[1], s[2], s[3]),
        writeable=False,
    )


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """NHWC convolution (cross-correlation) with zero padding.

    ``w`` has shape (k, k, C_in, C_out).
    """
    k, k2, cin, cout = w.shape
    if k != k2 or x.shape[-1] != cin:
        raise ValueError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    bsz, hp, wp, _ = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = _windows(xp, k, stride, ho, wo).reshape(bsz * ho * wo, k * k * cin)
    out = (cols @ w.data.reshape(k * k * cin, cout)).reshape(bsz, ho, wo, cout)
    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w.data.reshape(-1, cout).T).reshape(bsz, ho, wo, k, k, cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad : hp - pad, pad : wp - pad, :] if pad else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0) if b.requires_grad else None)
        return tuple(grads)

    return _make(out, parents, backward)


def _interp_matrix(n_in: int, n_out: int, dtype, lo: int = 0, hi: int | None = None):
    """Row-stochastic (n_out, n_in) bilinear weights, half-pixel centers.

    Source coordinates are clamped to ``[lo, hi]`` (default: the whole axis).
    """
    hi = n_in - 1 if hi is None else hi
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for d in range(n_out):
        src = (d + 0.5) * scale - 0.5
        src = min(max(src, lo), hi)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, hi)
        frac = src - i0
        m[d, i0] += 1.0 - frac
        m[d, i1] += frac
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize a (B, H, W, C) map with half-pixel-center bilinear sampling."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    _, h, w, _ = x.shape
    if (h, w) == (out_h, out_w):
        return x
    rh = Tensor(_interp_matrix(h, out_h, x.dtype), dtype=x.dtype)
    rw = Tensor(_interp_matrix(w, out_w, x.dtype), dtype=x.dtype)
    t = einsum("iy,byxc->bixc", rh, x)
    return einsum("jx,bixc->bijc", rw, t)


def cross_entropy(logits: Tensor, labels, ignore_index: int = 255) -> Tensor:
    """Per-element softmax cross-entropy over the last axis.

    Returns a tensor shaped like ``labels``; ignored positions are exactly 0.
    """
    labels = np.asarray(labels)
    valid = labels != ignore_index
    safe = np.where(valid, labels, 0)
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=-1, keepdims=True)) + m
    picked = np.take_along_axis(z, safe[..., None], axis=-1)
    out = ((lse - picked)[..., 0] * valid).astype(z.dtype)

    def backward(g):
        p = np.exp(z - lse)
        np.put_along_axis(p, safe[..., None], np.take_along_axis(p, safe[..., None], -1) - 1.0, -1)
        return (p * (g * valid)[..., None],)

    return _make(out, (logits,), backward)


# -- gradient checking ------------------------------------------------------

class GradCheckError(RuntimeError):
    pass


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, tol: float = 1e-4,
               max_checks: int | None = None, seed: int = 0, floor: float = 1e-6) -> dict:
    """Compare tape gradients of scalar ``f(x)`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``. With
    ``max_checks`` only a seeded random subset of entries is probed.
    """
    if x.dtype != np.float64:
        raise ValueError("grad_check needs float64 tensors")
    if not (1e-7 <= eps <= 1e-4):
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    x.requires_grad = True
    x.grad = None
    with precision(np.float64):
        out = f(x)
        out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    n = flat.size
    probe = np.arange(n)
    if max_checks is not None and max_checks < n:
        probe = np.sort(np.random.default_rng(seed).choice(n, size=max_checks, replace=False))
    numeric = np.empty(len(probe))
    with no_grad(), precision(np.float64):
        for j, i in enumerate(probe):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * eps)
    if not np.all(np.isfinite(numeric)):
        raise GradCheckError("finite-difference estimate is not finite")
    a = analytic.reshape(-1)[probe]
    diff = np.abs(a - numeric)
    rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    max_rel = float(rel.max()) if rel.size else 0.0
    return {
        "max_rel_err": max_rel,
        "max_abs_err": float(diff.max()) if diff.size else 0.0,
        "checked": int(len(probe)),
        "passed": max_rel <= tol,
    }


def parameters_require_grad(params: Iterable[Tensor], flag: bool = True):
    for p in params:
        p.requires_grad = flag
