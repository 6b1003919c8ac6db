"""Dense tensors with reverse-mode automatic differentiation.

Every op is a plain function that takes :class:`Tensor` inputs, computes its
output with numpy and, when gradients are being tracked, attaches a closure
that maps the output gradient to the input gradients. The recorded closures
and parent links form the graph; :func:`backward` walks it once in reverse
topological order.

Only what a transformer needs is implemented: elementwise arithmetic with
broadcasting, (batched) matmul, reshapes, softmax, layer norm, GELU,
embedding gather, dropout and a fused cross-entropy.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DeterminismError,
    DimensionError,
    NonFiniteError,
    UndefinedMeanError,
)

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "linear",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "softmax",
    "attention",
    "layer_norm",
    "gelu",
    "embedding",
    "dropout",
    "cross_entropy",
    "topo_order",
    "backward",
    "finite_diff_check",
]

DEFAULT_DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """An n-dimensional array that can take part in a differentiation graph.

    Leaf tensors are created directly; non-leaf tensors are produced by the
    ops in this module and remember their parents and backward closure.
    ``grad`` is only populated on leaves with ``requires_grad=True`` and
    accumulates across :func:`backward` calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- array-ish protocol -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("only division by a python scalar is supported")

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self):
        return mean(self)


def tensor(data, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (not differentiated w.r.t. ``c``)."""

    def bw(g):
        return (g * c,)

    return _make(a.data * c, (a,), bw, "scale")


# -- linear algebra -------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``a`` may carry leading batch dimensions. ``b`` is either a 2-D matrix
    shared across the batch or has the same leading dimensions as ``a``.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if bd.ndim == 2:
        if ad.shape[-1] != bd.shape[0]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def bw(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

    else:
        if ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def bw(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape [in, out] and ``b`` of shape [out]."""
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    out = xd @ wd
    if b is not None:
        if b.shape != (wd.shape[1],):
            raise DimensionError(f"bias shape {b.shape} does not match weight {w.shape}")
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "linear")


# -- shape ops --------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape

    def bw(g):
        return (g.reshape(src),)

    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from exc
    return _make(out, (a,), bw, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), bw, "transpose")


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    src = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    src = a.shape

    def bw(g):
        return (np.full(src, g / n, dtype=a.dtype),)

    return _make(np.asarray(a.data.mean()), (a,), bw, "mean")


# -- nonlinearities ------------------------------------------------------------
def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax.

    ``mask`` is a boolean array broadcastable to ``x``; False entries are
    excluded and get probability 0. A row with every entry masked yields
    all zeros rather than NaN.
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    if mask is not None:
        m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    if mask is not None:
        s = np.where(s == 0.0, 1.0, s)
    out = e / s

    def bw(g):
        return (out * (g - (out * g).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention as one fused op.

    ``q``, ``k``, ``v`` are [B, S, H]; heads are split from the last axis.
    ``mask`` is boolean, broadcastable to [B, heads, S, S] (True = may attend).
    Equivalent to composing reshape/transpose, :func:`matmul`, :func:`scale`
    and :func:`softmax`, with fewer graph nodes.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise DimensionError(f"attention needs equal [B, S, H] inputs, got {q.shape}, {k.shape}, {v.shape}")
    b, s, h = q.shape
    if h % num_heads:
        raise DimensionError(f"hidden size {h} is not divisible by {num_heads} heads")
    d = h // num_heads
    c = 1.0 / math.sqrt(d)

    def heads(a):
        return a.reshape(b, s, num_heads, d).transpose(0, 2, 1, 3)

    def merge(a):
        return a.transpose(0, 2, 1, 3).reshape(b, s, h)

    qh, kh, vh = heads(q.data), heads(k.data), heads(v.data)
    z = (qh @ kh.transpose(0, 1, 3, 2)) * c
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    if mask is not None:
        m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    den = e.sum(axis=-1, keepdims=True)
    if mask is not None:
        den = np.where(den == 0.0, 1.0, den)
    probs = e / den
    out = merge(probs @ vh)

    def bw(g):
        gh = heads(g)
        gprobs = gh @ vh.transpose(0, 1, 3, 2)
        gv = probs.transpose(0, 1, 3, 2) @ gh
        gz = probs * (gprobs - (probs * gprobs).sum(axis=-1, keepdims=True)) * c
        gq = gz @ kh
        gk = gz.transpose(0, 1, 3, 2) @ qh
        return merge(gq), merge(gk), merge(gv)

    return _make(out, (q, k, v), bw, "attention")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with biased variance, then ``gamma * xhat + beta``."""
    if eps < 0:
        raise ContractError("layer_norm eps must be >= 0")
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise DimensionError(f"layer_norm params {gamma.shape}/{beta.shape} do not match {x.shape}")
    xd = x.data
    inv_h = 1.0 / h
    xc = xd - xd.sum(axis=-1, keepdims=True) * inv_h
    var = (xc * xc).sum(axis=-1, keepdims=True) * inv_h
    with np.errstate(divide="ignore", invalid="ignore"):
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        g2 = g.reshape(-1, h)
        ggamma = (g2 * xhat.reshape(-1, h)).sum(axis=0)
        gbeta = g2.sum(axis=0)
        gx_hat = g * gd
        gx = rstd * (
            gx_hat
            - gx_hat.sum(axis=-1, keepdims=True) * inv_h
            - xhat * ((gx_hat * xhat).sum(axis=-1, keepdims=True) * inv_h)
        )
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + _GELU_A * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * d,)

    return _make(out, (x,), bw, "gelu")


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` ([V, H]) at integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    v = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        bad = ids[(ids < 0) | (ids >= v)].reshape(-1)[0]
        raise IndexError(f"token id {int(bad)} out of range for vocabulary of {v}")
    flat = ids.reshape(-1)

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, flat, g.reshape(-1, g.shape[-1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), bw, "embedding")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. Without ``rng`` a fresh OS-seeded generator is used."""
    if p <= 0.0:
        return x
    if rng is None:
        rng = np.random.default_rng()
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def bw(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), bw, "dropout")


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` has shape [..., V] and ``targets`` the matching leading shape.
    Positions equal to ``ignore_index`` contribute neither to the mean nor to
    the gradient.
    """
    v = logits.shape[-1]
    x = logits.data.reshape(-1, v)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != x.shape[0]:
        raise DimensionError(f"targets {np.shape(targets)} do not match logits {logits.shape}")
    valid = t != ignore_index
    tv = t[valid]
    if tv.size and (tv.min() < 0 or tv.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    n = int(valid.sum())
    if n == 0:
        raise UndefinedMeanError("every target position is ignored; mean loss is undefined")
    rows = np.nonzero(valid)[0]
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    # (max - target) >= 0 and log(s) >= 0 keep the loss non-negative under rounding
    per = (m[rows, 0] - x[rows, tv]) + np.log(s[rows, 0])
    loss = np.asarray(per.sum() / n, dtype=x.dtype)
    shape = logits.shape

    def bw(g):
        p = e / s
        p[rows, tv] -= 1.0
        p[~valid] = 0.0
        return ((p * (g / n)).reshape(shape),)

    return _make(loss, (logits,), bw, "cross_entropy")


# -- graph traversal ---------------------------------------------------------------
def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every input before its consumer."""
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf requiring grad."""
    if loss.shape != () and loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo_order(loss)):
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
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- verification ------------------------------------------------------------------
def finite_diff_check(
    f: Callable[[Sequence[Tensor]], Tensor | float],
    params: Tensor | Iterable[Tensor],
    h: float = 1e-5,
) -> float:
    """Compare analytic gradients with central differences.

    ``f`` receives ``params`` and must return a scalar. Returns the maximum
    over all coordinates of ``|a - n| / max(1e-8, |a| + |n|)``. Existing
    ``grad`` buffers on ``params`` are left as they were.

    Raises:
        DeterminismError: two baseline evaluations of ``f`` disagree.
    """
    if h <= 0:
        raise ContractError("finite difference step h must be > 0")
    plist = [params] if isinstance(params, Tensor) else list(params)

    def evaluate() -> float:
        with no_grad():
            return float(f(params))

    base = evaluate()
    if evaluate() != base:
        raise DeterminismError("f returned different values for identical parameters")

    saved = [p.grad for p in plist]
    for p in plist:
        p.grad = None
    backward(_as_tensor(f(params)))
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in plist]
    for p, g in zip(plist, saved):
        p.grad = g
    if evaluate() != base:
        raise DeterminismError("f returned different values for identical parameters")

    worst = 0.0
    for p, ga in zip(plist, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = gflat[i]
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    return float(worst)
