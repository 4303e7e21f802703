"""Minimal reverse-mode autodiff over numpy arrays.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``backward`` walks the graph in reverse topological order
and accumulates gradients in a fixed order, so repeated runs are bit-identical.

Default precision is float32; wrap gradient checks in ``precision(np.float64)``.
GELU uses the tanh approximation.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "DimensionError", "NonFiniteError", "tensor", "parameter",
    "no_grad", "grad_enabled", "precision", "get_default_dtype", "set_default_dtype",
    "add", "sub", "mul", "div", "neg", "matmul", "linear", "sum", "mean", "reshape",
    "transpose", "concat", "take_rows", "scatter_rows", "layer_norm", "softmax",
    "gelu", "attention", "mse_loss", "backward",
]


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (e.g. float64 for gradchecks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
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
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}, op={self._op})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    if dtype is None and not isinstance(data, (Tensor, np.ndarray)):
        dtype = _DEFAULT_DTYPE
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op: str, out: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    # a finite sum implies finite elements; only scan when the sum is not finite
    if not np.isfinite(out.sum()) and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    t = Tensor(out)
    t._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = fn
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting rules."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # weight-style right operand: fold leading axes into one GEMM
        k, n = bd.shape
        a2 = ad.reshape(-1, k)

        def fn2(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make("matmul", (a2 @ bd).reshape(*ad.shape[:-1], n), (a, b), fn2)

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for a (k, n) weight, fused into one graph node."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    if b is None:
        return matmul(x, w)
    k, n = w.shape
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, k)
    out = x2 @ wd
    out += b.data

    def fn(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make("linear", out.reshape(*xd.shape[:-1], n), (x, w, b), fn)


# -- reductions and shape ops -------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(out), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(x.shape[a] for a in axes)
    return div(sum(x, axis, keepdims), float(count))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in items)


def _getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)

    def fn(g):
        gx = np.zeros(shape, dtype=dtype)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _make("getitem", np.array(x.data[index]), (x,), fn)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis -2: ``x[..., idx, :]`` with per-batch ``idx``.

    ``x`` is (N, D) with ``idx`` (K,), or (B, N, D) with ``idx`` (B, K).
    """
    idx = np.asarray(idx, dtype=np.intp)
    shape, dtype = x.shape, x.dtype
    if x.ndim == 2 and idx.ndim == 1:
        def fn(g):
            gx = np.zeros(shape, dtype=dtype)
            np.add.at(gx, idx, g)
            return (gx,)
        return _make("take_rows", x.data[idx], (x,), fn)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != shape[0]:
        raise DimensionError(f"take_rows: x {shape} incompatible with idx {idx.shape}")
    b = np.arange(shape[0])[:, None]

    def fn(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, (b, idx), g)
        return (gx,)

    return _make("take_rows", x.data[b, idx], (x,), fn)


def scatter_rows(values: Tensor, idx: np.ndarray, n: int, fill: Tensor) -> Tensor:
    """Build (B, n, D) filled with ``fill`` (D,) and ``values`` (B, K, D) at ``idx`` (B, K)."""
    idx = np.asarray(idx, dtype=np.intp)
    B, K, D = values.shape
    if idx.shape != (B, K) or fill.shape != (D,):
        raise DimensionError(
            f"scatter_rows: values {values.shape}, idx {idx.shape}, fill {fill.shape}")
    b = np.arange(B)[:, None]
    out = np.empty((B, n, D), dtype=values.dtype)
    out[...] = fill.data
    out[b, idx] = values.data
    holes = np.ones((B, n), dtype=bool)
    holes[b, idx] = False

    def fn(g):
        return g[b, idx], g[holes].sum(axis=0)

    return _make("scatter_rows", out, (values, fill), fn)


# -- neural-net primitives ------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def fn(g):
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gxh = g * gd
        gx = rstd * (gxh - gxh.mean(axis=-1, keepdims=True)
                     - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make("layer_norm", xhat * gd + beta.data, (x, gamma, beta), fn)


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for {x.shape}")
    s = _softmax_np(x.data, axis)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (x,), fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    x2 = xd * xd
    t = x2 * 0.044715
    t += 1.0
    t *= xd
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def fn(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) C (1 + 3 * 0.044715 x^2)
        d = x2 * (3 * 0.044715 * _GELU_C)
        d += _GELU_C
        s = t * t
        np.subtract(1.0, s, out=s)
        s *= xd
        s *= d
        s += t
        s += 1.0
        s *= 0.5
        s *= g
        return (s,)

    return _make("gelu", out, (x,), fn)


def attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """Bidirectional scaled dot-product attention over (..., L, dh) operands.

    With ``return_weights`` the post-softmax weights are also returned as a
    plain array (not part of the graph).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1] or q.shape[:-2] != k.shape[:-2]:
        raise DimensionError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    p = _softmax_np((qd @ np.swapaxes(kd, -1, -2)) * scale, -1)

    def fn(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        return gs @ kd, np.swapaxes(gs, -1, -2) @ qd, gv

    out = _make("attention", p @ vd, (q, k, v), fn)
    return (out, p) if return_weights else out


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over every element; an empty input yields exactly 0."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    n = pred.size
    if n == 0:
        return _make("mse_loss", np.zeros((), dtype=pred.dtype), (pred,),
                     lambda g: (np.zeros(pred.shape, dtype=pred.dtype),))
    diff = pred.data - target
    scale = 2.0 / n

    def fn(g):
        return (g * diff * scale,)

    return _make("mse_loss", np.asarray((diff * diff).sum() / n, dtype=pred.dtype), (pred,), fn)


# -- reverse pass ---------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(_topo_order(loss)):
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
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
