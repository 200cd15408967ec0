"""Minimal reverse-mode automatic differentiation on dense numpy arrays.

A :class:`Tensor` wraps a float array and, when any input requires a gradient,
remembers the operation that produced it.  Nodes receive a monotonically
increasing id at creation, so creation order is a valid topological order and
:meth:`Tensor.backward` simply walks reachable nodes by descending id.

Storage defaults to float32.  :func:`float64_mode` switches the dtype used for
newly created tensors, which :func:`grad_check` relies on.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "ShapeError", "ContractError", "NumericError", "ParameterError",
    "float64_mode", "get_dtype", "no_grad",
    "add", "sub", "mul", "scale", "add_scalar", "matmul", "conv2d", "conv_transpose2d",
    "gelu", "sigmoid", "log", "exp", "square", "sum", "mean", "reshape", "permute",
    "concat", "slice_axis", "layer_norm", "softmax", "log_softmax", "softmax_temp",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ParameterError(ValueError):
    """Invalid scalar parameter."""


_DTYPE = np.float32
_GRAD_ENABLED = True
_ids = itertools.count()


def get_dtype():
    return _DTYPE


@contextmanager
def float64_mode() -> Iterator[None]:
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.float64
    try:
        yield
    finally:
        _DTYPE = prev


@contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block (inference, attacks on frozen copies)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    # -- reverse pass ---------------------------------------------------------
    def backward(self, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not connected to any tensor that requires grad")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        grads: dict[int, np.ndarray] = {self._id: np.ones_like(self.data)}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg
            if not retain_graph:
                node._backward = _freed
                node._parents = ()


def _freed(g):
    raise ContractError("graph already freed by an earlier backward; pass retain_graph=True")


# ---------------------------------------------------------------------------
# helpers

def _suffix_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    sa, sb = a.shape, b.shape
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _suffix_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _suffix_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _suffix_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor._make(a.data + c, (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = float(np.sqrt(2.0 / np.pi))  # python float: keeps float32 arrays float32


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    if axis is None:
        return Tensor._make(np.asarray(a.data.sum()), (a,),
                            lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=axis)
    return Tensor._make(out, (a,),
                        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                        lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (the channel axis by default)."""
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                i != axis % len(ref) and x != y for i, (x, y) in enumerate(zip(ref, t.shape))):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} do not conform")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype if g.dtype != dtype else dtype)
        full[idx] = g
        return (full,)

    return Tensor._make(a.data[idx].copy(), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul; ``b`` may be 2-D and is then shared across leading dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2] or (
            bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]):
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not conform")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward)


def _check_conv(op: str, x: np.ndarray, w: np.ndarray, w_in_axis: int) -> None:
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[w_in_axis]:
        raise ShapeError(f"{op}: shapes {x.shape} and {w.shape} do not conform")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B,C,H,W) with ``w`` (O,C,k,k)."""
    xd, wd = x.data, w.data
    _check_conv("conv2d", xd, wd, 1)
    k = wd.shape[2]
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    Hp, Wp = xp.shape[2:]
    if Hp < k or Wp < k:
        raise ShapeError(f"conv2d: input {xd.shape} smaller than kernel {wd.shape}")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2:4]
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3]))  # B,Ho,Wo,O
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O,C,k,k
        gcols = np.tensordot(wd, g, axes=([0], [1]))  # C,k,k,B,Ho,Wo
        gxp = np.zeros((xp.shape[1], xp.shape[0], Hp, Wp), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, i, j]
        gxp = gxp.transpose(1, 0, 2, 3)
        if padding:
            gxp = gxp[:, :, padding:Hp - padding, padding:Wp - padding]
        grads = [np.ascontiguousarray(gxp), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution of ``x`` (B,C,H,W) with ``w`` (C,O,k,k)."""
    xd, wd = x.data, w.data
    _check_conv("conv_transpose2d", xd, wd, 0)
    B, _, H, W = xd.shape
    O, k = wd.shape[1], wd.shape[2]
    Hf, Wf = (H - 1) * stride + k, (W - 1) * stride + k
    cols = np.tensordot(wd, xd, axes=([0], [1]))  # O,k,k,B,H,W
    full = np.zeros((O, B, Hf, Wf), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            full[:, :, i:i + stride * H:stride, j:j + stride * W:stride] += cols[:, i, j]
    out = full[:, :, padding:Hf - padding, padding:Wf - padding].transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[:, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros((B, O, Hf, Wf), dtype=g.dtype)
        gfull[:, :, padding:Hf - padding, padding:Wf - padding] = g
        win = sliding_window_view(gfull, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :H, :W]
        gx = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3]))  # B,H,W,C
        gw = np.tensordot(xd, win, axes=([0, 2, 3], [0, 2, 3]))  # C,O,k,k
        grads = [np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, backward)


# ---------------------------------------------------------------------------
# normalisation and softmax family (fused for speed and stability)

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    if gamma.shape != (xd.shape[-1],) or beta.shape != gamma.shape:
        raise ShapeError(f"layer_norm: shapes {xd.shape} and {gamma.shape} do not conform")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        d = g.shape[-1]
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return Tensor._make(out, (x, gamma, beta), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return Tensor._make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    """Max-subtracted log-softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return Tensor._make(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def _check_tau(logits: Tensor, tau: float) -> None:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("softmax_temp: non-finite logits")


def softmax_temp(logits: Tensor, tau: float) -> Tensor:
    """Temperature softmax over the last (class) axis."""
    _check_tau(logits, tau)
    return softmax(scale(logits, 1.0 / tau))


def log_softmax_temp(logits: Tensor, tau: float) -> Tensor:
    _check_tau(logits, tau)
    return log_softmax(scale(logits, 1.0 / tau))


# ---------------------------------------------------------------------------
# verification

def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-3) -> float:
    """Max relative error between backprop and central differences.

    Both the analytic and the numeric gradient are evaluated in float64.
    The error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if not 1e-4 <= step <= 1e-2:
        raise ParameterError(f"step must lie in [1e-4, 1e-2], got {step}")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with float64_mode():
        x = Tensor(base.copy(), requires_grad=True)
        out = fn(x)
        if not np.all(np.isfinite(out.data)):
            raise NumericError("grad_check: function value is not finite")
        out.backward()
        analytic = np.zeros_like(base) if x.grad is None else x.grad.astype(np.float64)

        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(fn(Tensor(base.copy())).data)
                flat[i] = orig - step
                fm = float(fn(Tensor(base.copy())).data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("grad_check: function value is not finite")
                nflat[i] = (fp - fm) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0
