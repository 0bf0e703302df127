"""Primitive operations with reverse (vjp) and forward (jvp) rules.

Broadcasting is deliberately narrow: operands of binary elementwise ops must
have equal shapes, or one operand's shape must be a trailing suffix of the
other's (this covers scalars, bias vectors and positional tables). Anything
else is a :class:`ShapeError`.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import ShapeError, SliceGrad, Tensor, as_tensor, record

# Large finite negative used for masked attention scores; exp() underflows to
# exactly zero, keeping every public output finite.
MASK_VALUE = -1e30


def _is_suffix(small: tuple, big: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> tuple:
    if a.shape == b.shape:
        return a.shape
    if _is_suffix(b.shape, a.shape):
        return a.shape
    if _is_suffix(a.shape, b.shape):
        return b.shape
    raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def _expand(t, shape):
    return None if t is None else np.broadcast_to(t, shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape("add", a.data, b.data)
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    def jvp(t):
        ta, tb = t
        if ta is None:
            return np.broadcast_to(tb, shape).copy()
        if tb is None:
            return np.broadcast_to(ta, shape).copy()
        return ta + tb

    return record("add", out, (a, b), vjp, jvp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape("sub", a.data, b.data)
    out = a.data - b.data
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    def jvp(t):
        ta, tb = t
        if ta is None:
            return -np.broadcast_to(tb, shape)
        if tb is None:
            return np.broadcast_to(ta, shape).copy()
        return ta - tb

    return record("sub", out, (a, b), vjp, jvp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape("mul", a.data, b.data)
    av, bv = a.data, b.data
    out = av * bv

    def vjp(g):
        ga = _unbroadcast(g * bv, av.shape) if a.node is not None else None
        gb = _unbroadcast(g * av, bv.shape) if b.node is not None else None
        return ga, gb

    def jvp(t):
        ta, tb = t
        res = np.zeros(shape)
        if ta is not None:
            res = res + ta * bv
        if tb is not None:
            res = res + av * tb
        return res

    return record("mul", out, (a, b), vjp, jvp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape("div", a.data, b.data)
    av, bv = a.data, b.data
    out = av / bv

    def vjp(g):
        ga = _unbroadcast(g / bv, av.shape) if a.node is not None else None
        gb = _unbroadcast(-g * out / bv, bv.shape) if b.node is not None else None
        return ga, gb

    def jvp(t):
        ta, tb = t
        res = np.zeros(shape)
        if ta is not None:
            res = res + ta / bv
        if tb is not None:
            res = res - out * tb / bv
        return res

    return record("div", out, (a, b), vjp, jvp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,), lambda t: t[0] * c)


def _unary(kind, a, out, deriv):
    a = as_tensor(a)
    d = deriv(a.data, out)
    return record(kind, out, (a,), lambda g: (g * d,), lambda t: t[0] * d)


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _unary("exp", a, np.exp(a.data), lambda x, y: y)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _unary("log", a, np.log(a.data), lambda x, y: 1.0 / x)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    return _unary("sqrt", a, np.sqrt(a.data), lambda x, y: 0.5 / y)


def _sigmoid(x):
    # tanh form is overflow-free for any finite x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    return _unary("sigmoid", a, _sigmoid(a.data), lambda x, y: y * (1.0 - y))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _unary("tanh", a, np.tanh(a.data), lambda x, y: 1.0 - y * y)


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _unary("silu", a, a.data * s, lambda x, y: s * (1.0 + x * (1.0 - s)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def deriv(x, y):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du

    return _unary("gelu", a, out, deriv)


# ------------------------------------------------------------------ reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", np.asarray(out), (a,), vjp,
                  lambda t: np.asarray(np.sum(t[0], axis=axis, keepdims=keepdims)))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    """Batched matrix product; ``b`` may be 2-D and shared over ``a``'s batch."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")
    if bv.ndim > av.ndim:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} against {b.shape}")
    out = av @ bv

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.node is not None else None
        gb = None
        if b.node is not None:
            if bv.ndim == 2 and av.ndim > 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    def jvp(t):
        ta, tb = t
        res = np.zeros(out.shape)
        if ta is not None:
            res = res + ta @ bv
        if tb is not None:
            res = res + av @ tb
        return res

    return record("matmul", out, (a, b), vjp, jvp)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return record("transpose", np.transpose(a.data, axes), (a,),
                  lambda g: (np.transpose(g, inv),), lambda t: np.transpose(t[0], axes))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from exc
    old = a.shape
    return record("reshape", out, (a,), lambda g: (g.reshape(old),),
                  lambda t: t[0].reshape(out.shape))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    def jvp(t):
        return np.concatenate([np.zeros(x.shape) if v is None else v for x, v in zip(ts, t)], axis=axis)

    return record("concat", out, ts, vjp, jvp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len({t.shape for t in ts}) != 1:
        raise ShapeError(f"stack: shapes differ {[t.shape for t in ts]}")
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    def jvp(t):
        return np.stack([np.zeros(x.shape) if v is None else v for x, v in zip(ts, t)], axis=axis)

    return record("stack", out, ts, vjp, jvp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    a = as_tensor(a)
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: range [{start}, {start + length}) outside axis of size {a.shape[axis]}")
    sl = (slice(None),) * axis + (slice(start, start + length),)
    shape = a.shape

    def vjp(g):
        return (SliceGrad(shape, sl, g),)

    return record("narrow", a.data[sl].copy(), (a,), vjp, lambda t: t[0][sl].copy())


def select(a, axis: int, index: int) -> Tensor:
    """Pick one index along ``axis``, dropping that axis."""
    a = as_tensor(a)
    axis = axis % a.ndim
    sl = (slice(None),) * axis + (index,)
    shape = a.shape

    def vjp(g):
        return (SliceGrad(shape, sl, g),)

    return record("select", a.data[sl].copy(), (a,), vjp, lambda t: t[0][sl].copy())


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` (V×H) at integer ``ids`` of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: token id outside [0, {table.shape[0]})")
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return record("embedding", table.data[ids], (table,), vjp, lambda t: t[0][ids])


# ------------------------------------------------------------- normalisation

def softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    def jvp(t):
        return y * (t[0] - (t[0] * y).sum(axis=-1, keepdims=True))

    return record("softmax", y, (a,), vjp, jvp)


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    out = _log_softmax(a.data)
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    def jvp(t):
        return t[0] - (p * t[0]).sum(axis=-1, keepdims=True)

    return record("log_softmax", out, (a,), vjp, jvp)


def rms_norm(a, weight, eps: float = 1e-6) -> Tensor:
    """``a / rms(a) * weight`` over the last axis."""
    a, weight = as_tensor(a), as_tensor(weight)
    if weight.shape != a.shape[-1:]:
        raise ShapeError(f"rms_norm: weight shape {weight.shape} does not match last axis of {a.shape}")
    x, w = a.data, weight.data
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    n = x * r
    out = n * w

    def vjp(g):
        gn = g * w
        gx = r * (gn - n * (gn * n).mean(axis=-1, keepdims=True)) if a.node is not None else None
        gw = (g * n).reshape(-1, w.shape[0]).sum(axis=0) if weight.node is not None else None
        return gx, gw

    def jvp(t):
        tx, tw = t
        res = np.zeros(out.shape)
        if tx is not None:
            tn = r * (tx - n * (n * tx).mean(axis=-1, keepdims=True))
            res = res + tn * w
        if tw is not None:
            res = res + n * tw
        return res

    return record("rms_norm", out, (a, weight), vjp, jvp)


def causal_scores(q, k, scale_: float, key_mask: np.ndarray | None = None) -> Tensor:
    """Attention logits ``q·kᵀ·scale`` with future (and padded) keys masked.

    ``q``, ``k``: (..., S, d). ``key_mask``: optional boolean (B, S), True for
    keys that may be attended; it is broadcast over any head axis.
    """
    q, k = as_tensor(q), as_tensor(k)
    if q.shape != k.shape:
        raise ShapeError(f"causal_scores: query shape {q.shape} differs from key shape {k.shape}")
    S = q.shape[-2]
    allowed = np.tril(np.ones((S, S), dtype=bool))
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        if km.shape != (q.shape[0], S):
            raise ShapeError(f"causal_scores: key mask shape {km.shape} does not match {(q.shape[0], S)}")
        km = km.reshape((q.shape[0],) + (1,) * (q.ndim - 3) + (1, S))
        allowed = allowed & km
        # A query must see at least itself so every softmax row stays finite.
        allowed = allowed | np.eye(S, dtype=bool)
    allowed = np.broadcast_to(allowed, q.shape[:-2] + (S, S))
    qv, kv = q.data, k.data
    raw = (qv @ np.swapaxes(kv, -1, -2)) * scale_
    out = np.where(allowed, raw, MASK_VALUE)

    def vjp(g):
        g = np.where(allowed, g, 0.0) * scale_
        gq = g @ kv if q.node is not None else None
        gk = np.swapaxes(g, -1, -2) @ qv if k.node is not None else None
        return gq, gk

    def jvp(t):
        tq, tk = t
        res = np.zeros(out.shape)
        if tq is not None:
            res = res + tq @ np.swapaxes(kv, -1, -2)
        if tk is not None:
            res = res + qv @ np.swapaxes(tk, -1, -2)
        return np.where(allowed, res * scale_, 0.0)

    return record("causal_scores", out, (q, k), vjp, jvp)


# ---------------------------------------------------------------------- losses

def _position_weights(shape, weights):
    if weights is None:
        return np.ones(shape)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != shape:
        raise ShapeError(f"loss weights shape {w.shape} does not match positions {shape}")
    return w


def cross_entropy_soft(logits, labels, weights=None) -> Tensor:
    """Weighted mean over positions of ``-Σ_k labels[k]·log softmax(logits)[k]``.

    Differentiable in both ``logits`` and ``labels``; the loss is linear in
    ``labels``.
    """
    logits, labels = as_tensor(logits), as_tensor(labels)
    if logits.shape != labels.shape:
        raise ShapeError(f"cross_entropy_soft: logits {logits.shape} vs labels {labels.shape}")
    w = _position_weights(logits.shape[:-1], weights)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy_soft: weights sum to zero")
    wn = (w / total)[..., None]
    lp = _log_softmax(logits.data)
    p = np.exp(lp)
    y = labels.data
    ysum = y.sum(axis=-1, keepdims=True)
    out = np.asarray(-(wn * y * lp).sum())

    def vjp(g):
        gz = g * wn * (p * ysum - y) if logits.node is not None else None
        gy = -g * wn * lp if labels.node is not None else None
        return gz, gy

    def jvp(t):
        tz, ty = t
        res = 0.0
        if tz is not None:
            res = res - (wn * y * (tz - (p * tz).sum(axis=-1, keepdims=True))).sum()
        if ty is not None:
            res = res - (wn * ty * lp).sum()
        return np.asarray(res)

    return record("cross_entropy_soft", out, (logits, labels), vjp, jvp)


def cross_entropy_hard(logits, targets, weights=None) -> Tensor:
    """Weighted mean over positions of ``-log softmax(logits)[target]``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy_hard: targets {targets.shape} vs logits {logits.shape}")
    V = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"cross_entropy_hard: target id outside [0, {V})")
    w = _position_weights(targets.shape, weights)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy_hard: weights sum to zero")
    wn = w / total
    lp = _log_softmax(logits.data)
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    out = np.asarray(-(wn * picked).sum())

    def vjp(g):
        grad = np.exp(lp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (g * wn[..., None] * grad,)

    def jvp(t):
        tz = t[0]
        p = np.exp(lp)
        tpick = np.take_along_axis(tz, targets[..., None], axis=-1)[..., 0]
        return np.asarray(-(wn * (tpick - (p * tz).sum(axis=-1))).sum())

    return record("cross_entropy_hard", out, (logits,), vjp, jvp)


def l1_norm(a) -> Tensor:
    """Sum of absolute values; subgradient sign(0) = 0."""
    a = as_tensor(a)
    s = np.sign(a.data)
    return record("l1_norm", np.asarray(np.abs(a.data).sum()), (a,),
                  lambda g: (g * s,), lambda t: np.asarray((s * t[0]).sum()))


def l2_norm(a) -> Tensor:
    """Euclidean norm of all elements; gradient taken as zero at the origin."""
    a = as_tensor(a)
    nrm = float(np.sqrt((a.data * a.data).sum()))
    unit = a.data / nrm if nrm > 0 else np.zeros(a.shape)
    return record("l2_norm", np.asarray(nrm), (a,),
                  lambda g: (g * unit,), lambda t: np.asarray((unit * t[0]).sum()))


def cosine_similarity(a, b, eps: float = 1e-12) -> Tensor:
    """Row-wise cosine similarity over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    av, bv = a.data, b.data
    na = np.maximum(np.sqrt((av * av).sum(axis=-1, keepdims=True)), eps)
    nb = np.maximum(np.sqrt((bv * bv).sum(axis=-1, keepdims=True)), eps)
    ua, ub = av / na, bv / nb
    c = (ua * ub).sum(axis=-1, keepdims=True)
    # d cos / d a = (ub - c·ua) / |a|
    da = (ub - c * ua) / na
    db = (ua - c * ub) / nb

    def vjp(g):
        g = g[..., None]
        return (g * da if a.node is not None else None,
                g * db if b.node is not None else None)

    def jvp(t):
        ta, tb = t
        res = np.zeros(c.shape[:-1])
        if ta is not None:
            res = res + (da * ta).sum(axis=-1)
        if tb is not None:
            res = res + (db * tb).sum(axis=-1)
        return res

    return record("cosine_similarity", c[..., 0], (a, b), vjp, jvp)


def pairwise_distance(a) -> Tensor:
    """Euclidean distances between the rows of a 2-D tensor (n×n)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"pairwise_distance: expected 2-D input, got {a.shape}")
    x = a.data
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    inv = np.divide(1.0, d, out=np.zeros_like(d), where=d > 0)

    def vjp(g):
        gs = (g + g.T) * inv
        return ((gs[:, :, None] * diff).sum(axis=1),)

    def jvp(t):
        tx = t[0]
        tdiff = tx[:, None, :] - tx[None, :, :]
        return (diff * tdiff).sum(axis=-1) * inv

    return record("pairwise_distance", d, (a,), vjp, jvp)


PRIMITIVES = (
    "add", "sub", "mul", "div", "scale", "exp", "log", "sqrt", "sigmoid", "tanh",
    "silu", "gelu", "sum", "matmul", "transpose", "reshape", "concat", "stack",
    "narrow", "select", "embedding", "softmax", "log_softmax", "rms_norm",
    "causal_scores", "cross_entropy_soft", "cross_entropy_hard", "l1_norm",
    "l2_norm", "cosine_similarity", "pairwise_distance",
)
