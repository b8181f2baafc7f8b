"""Dense float64 tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require a
gradient record a closure computing the vector-Jacobian product; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order.

Heavier primitives (``linear``, ``layer_norm``, ``attention``,
``cross_entropy``) are fused: one node with a hand-written backward instead of
a chain of elementwise nodes. This keeps Python overhead per training step
low.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction -----------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate d(self)/d(leaf) into every reachable ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            node._backward_into(g, grads)

    def _backward_into(self, g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        parent_grads = self._backward(g)
        for p, pg in zip(self._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        sa, sb = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = as_tensor(other)
        sa, sb = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        )

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor._make(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
        )

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other) / self

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float) -> Tensor:
        a = self.data
        return Tensor._make(a**p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, idx) -> Tensor:
        a_shape = self.shape
        out = self.data[idx]

        basic = _is_basic_index(idx)

        def bw(g):
            full = np.zeros(a_shape)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(out, (self,), bw)

    # -- reductions and shape ---------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        a_shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a_shape),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a_shape = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(a_shape),))

    def transpose(self, *axes) -> Tensor:
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swap_last(self) -> Tensor:
        return Tensor._make(np.swapaxes(self.data, -1, -2), (self,), lambda g: (np.swapaxes(g, -1, -2),))

    # -- elementwise functions --------------------------------------------
    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> Tensor:
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def abs(self) -> Tensor:
        a = self.data
        return Tensor._make(np.abs(a), (self,), lambda g: (g * np.sign(a),))

    def sigmoid(self) -> Tensor:
        out = _sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def clamp(self, lo: float | None = None, hi: float | None = None) -> Tensor:
        a = self.data
        out = np.clip(a, lo, hi)
        mask = np.ones(a.shape, dtype=bool)
        if lo is not None:
            mask &= a >= lo
        if hi is not None:
            mask &= a <= hi
        return Tensor._make(out, (self,), lambda g: (g * mask,))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, slice, np.integer)) for p in parts)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


# -- composite and fused ops ----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight of shape (in, out)."""
    xd, wd = x.data, weight.data
    d_in, d_out = wd.shape
    if xd.shape[-1] != d_in:
        raise DimensionError(f"linear: input dim {xd.shape[-1]} != weight rows {d_in}")
    x2 = xd.reshape(-1, d_in)
    out2 = x2 @ wd
    if bias is not None:
        out2 += bias.data
    out = out2.reshape(xd.shape[:-1] + (d_out,))

    def bw(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, bw)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU; smooth everywhere."""
    a = x.data
    c = math.sqrt(2.0 / math.pi)
    a2 = a * a
    t = np.tanh(c * a * (1.0 + 0.044715 * a2))
    out = 0.5 * a * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * a2)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (x,), bw)


def logit(x: Tensor, eps: float = 1e-6) -> Tensor:
    a = np.clip(x.data, eps, 1.0 - eps)
    return Tensor._make(np.log(a / (1.0 - a)), (x,), lambda g: (g / (a * (1.0 - a)),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    pick_a = ad >= bd
    return Tensor._make(
        np.where(pick_a, ad, bd),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, ad.shape), _unbroadcast(g * ~pick_a, bd.shape)),
    )


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    pick_a = ad <= bd
    return Tensor._make(
        np.where(pick_a, ad, bd),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, ad.shape), _unbroadcast(g * ~pick_a, bd.shape)),
    )


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(
        np.where(mask, ad, bd),
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), ad.shape), _unbroadcast(np.where(mask, 0.0, g), bd.shape)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(out, tensors, bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._make(out, tensors, bw)


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape
    out = np.take(x.data, idx, axis=axis)

    def bw(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor._make(out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis with population variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},)")
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        flat_g = g.reshape(-1, d)
        flat_xhat = xhat.reshape(-1, d)
        dgain = (flat_g * flat_xhat).sum(axis=0)
        dbias = flat_g.sum(axis=0)
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return Tensor._make(out, (x, gain, bias), bw)


def attention(queries: Tensor, keys: Tensor, values: Tensor, bias: Tensor | np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention ``softmax(Q K^T / sqrt(d) + bias) V``.

    Leading axes are batch axes. ``bias`` is an optional additive term on the
    logits, broadcast to (..., n_queries, n_keys).
    """
    qd, kd, vd = queries.data, keys.data, values.data
    if kd.shape[-2] == 0:
        raise ContractError("attention over an empty key set")
    if qd.shape[-1] != kd.shape[-1]:
        raise DimensionError(f"query dim {qd.shape[-1]} != key dim {kd.shape[-1]}")
    if kd.shape[-2] != vd.shape[-2]:
        raise DimensionError(f"{kd.shape[-2]} keys but {vd.shape[-2]} values")
    scale = 1.0 / math.sqrt(qd.shape[-1])
    logits = (qd @ np.swapaxes(kd, -1, -2)) * scale
    bias_t = None
    if bias is not None:
        bias_t = as_tensor(bias)
        logits = logits + bias_t.data
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ vd

    def bw(g):
        dp = g @ np.swapaxes(vd, -1, -2)
        dv = _unbroadcast(np.swapaxes(p, -1, -2) @ g, vd.shape)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = _unbroadcast((ds @ kd) * scale, qd.shape)
        dk = _unbroadcast((np.swapaxes(ds, -1, -2) @ qd) * scale, kd.shape)
        if bias_t is None:
            return dq, dk, dv
        return dq, dk, dv, _unbroadcast(ds, bias_t.shape)

    parents = (queries, keys, values) if bias_t is None else (queries, keys, values, bias_t)
    return Tensor._make(out, parents, bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    a = x.data
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)
    return Tensor._make(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-element softmax cross-entropy; ``targets`` are integer class ids."""
    a = logits.data
    t = np.asarray(targets, dtype=np.intp)
    if t.shape != a.shape[:-1]:
        raise DimensionError(f"targets shape {t.shape} != logits batch shape {a.shape[:-1]}")
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=-1, keepdims=True)
    logp_t = np.take_along_axis(shifted, t[..., None], axis=-1)[..., 0] - np.log(z[..., 0])
    sm = e / z

    def bw(g):
        grad = sm * g[..., None]
        np.put_along_axis(
            grad,
            t[..., None],
            np.take_along_axis(grad, t[..., None], axis=-1) - g[..., None],
            axis=-1,
        )
        return (grad,)

    return Tensor._make(-logp_t, (logits,), bw)


def sum_all(tensors: Iterable[Tensor]) -> Tensor:
    total = None
    for t in tensors:
        total = t if total is None else total + t
    if total is None:
        return Tensor(0.0)
    return total
