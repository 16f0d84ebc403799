"""Differentiable operations over :class:`Tensor`.

Broadcasting is limited to what attention and feed-forward layers need:
batched matmul against a shared weight and row-wise bias addition.
"""

from __future__ import annotations

import functools
import logging
from typing import Optional, Sequence

import numpy as np

from dslp.errors import ContractError, ShapeError
from dslp.tensor.core import Tensor, as_tensor, make_op

logger = logging.getLogger(__name__)

LN_EPS = 1e-5


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, name: str) -> None:
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot combine shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_op(np.where(pos, x.data, 0.0).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * pos,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.asarray(x.data.sum(axis=axis)), (x,), bwd, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


# ----------------------------------------------------------------------------
# Shape manipulation
# ----------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return make_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    return make_op(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """[B, T, d] -> [B, H, T, d/H]."""
    b, t, d = x.shape
    if d % num_heads:
        raise ShapeError(f"split_heads: dim {d} not divisible by {num_heads} heads")
    out = x.data.reshape(b, t, num_heads, d // num_heads).transpose(0, 2, 1, 3)
    return make_op(out, (x,), lambda g: (g.transpose(0, 2, 1, 3).reshape(b, t, d),), "split_heads")


def merge_heads(x: Tensor) -> Tensor:
    """[B, H, T, dh] -> [B, T, H*dh]."""
    b, h, t, dh = x.shape
    out = x.data.transpose(0, 2, 1, 3).reshape(b, t, h * dh)
    return make_op(out, (x,), lambda g: (g.reshape(b, t, h, dh).transpose(0, 2, 1, 3),), "merge_heads")


# ----------------------------------------------------------------------------
# Linear algebra
# ----------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch dims, ``b`` is 2-D or batched alike."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    if bd.ndim > 2 and bd.shape[:-2] != ad.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions disagree for shapes {a.shape} and {b.shape}")

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_op(ad @ bd, (a, b), bwd, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped [out, in]."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    lead = xd.shape[:-1]
    # One 2-D GEMM instead of a batched loop over leading dims.
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if bias is not None:
        out += bias.data

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out.reshape(*lead, wd.shape[0]), parents, bwd, "linear")


# ----------------------------------------------------------------------------
# Normalisation and probabilities
# ----------------------------------------------------------------------------

def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    p = _softmax_np(x.data, axis)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_op(p, (x,), bwd, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ls = _log_softmax_np(x.data, axis)

    def bwd(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return make_op(ls, (x,), bwd, "log_softmax")


@functools.lru_cache(maxsize=None)
def _averager(d: int, dtype) -> np.ndarray:
    avg = np.full((d, 1), 1.0 / d, dtype=dtype)
    avg.flags.writeable = False
    return avg


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs a normalised dimension of size >= 2")
    x2 = xd.reshape(-1, d)
    avg = _averager(d, xd.dtype)
    # Row means as GEMVs: much cheaper than axis reductions on small rows.
    xc = x2 - x2 @ avg
    inv = 1.0 / np.sqrt((xc * xc) @ avg + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bwd(g):
        g2 = g.reshape(-1, d)
        gxhat = g2 * gd
        gx = inv * (gxhat - gxhat @ avg - xhat * ((gxhat * xhat) @ avg))
        return gx.reshape(xd.shape), (g2 * xhat).sum(axis=0), g2.sum(axis=0)

    return make_op(out.reshape(xd.shape), (x, gain, bias), bwd, "layer_norm")


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention over [B, H, T, dh] operands.

    ``mask`` is boolean, broadcastable to [B, H, Tq, Tk]; ``True`` blocks a key.
    Every query must keep at least one visible key.
    """
    qd, kd, vd = q.data, k.data, v.data
    c = 1.0 / np.sqrt(qd.shape[-1])
    s = (qd @ np.swapaxes(kd, -1, -2)) * c
    if mask is not None:
        s = np.where(mask, -np.inf, s)
    p = _softmax_np(s, -1)
    out = p @ vd

    def bwd(g):
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * c
        return gs @ kd, np.swapaxes(gs, -1, -2) @ qd, np.swapaxes(p, -1, -2) @ g

    return make_op(out, (q, k, v), bwd, "attention")


# ----------------------------------------------------------------------------
# Lookup, pooling, regularisation
# ----------------------------------------------------------------------------

def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; the index array is treated as a constant."""
    ids = np.asarray(ids, dtype=np.int64)
    td = table.data
    if ids.size and (ids.min() < 0 or ids.max() >= td.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {td.shape[0]})")

    def bwd(g):
        gt = np.zeros_like(td)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, td.shape[1]))
        return (gt,)

    return make_op(td[ids], (table,), bwd, "embedding")


def masked_mean(x: Tensor, pad_mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of [B, T, d], skipping positions where ``pad_mask`` is True."""
    keep = (~np.asarray(pad_mask, dtype=bool)).astype(x.dtype)[..., None]
    count = keep.sum(axis=1, keepdims=True)
    if (count == 0).any():
        raise ContractError("masked_mean: a row has no unmasked positions")
    w = keep / count
    return make_op((x.data * w).sum(axis=1), (x,), lambda g: (g[:, None, :] * w,), "masked_mean")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ----------------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------------

def nll_label_smoothed(logits: Tensor, targets, smoothing: float = 0.0, mask=None) -> Tensor:
    """Label-smoothed negative log-likelihood averaged over unmasked positions.

    Per position the loss is ``(1 - s) * NLL(target) + s * mean_v NLL(v)``.
    ``mask`` marks positions to ignore (``True`` = ignored); ignored positions
    contribute nothing and receive zero gradient. When every position is
    ignored the loss is defined as zero.

    Args:
        logits: [..., V] unnormalised scores.
        targets: integer array matching ``logits.shape[:-1]``.
        smoothing: label smoothing fraction in [0, 1).
        mask: optional boolean array matching ``targets``.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ContractError(f"smoothing must lie in [0, 1), got {smoothing}")
    ld = logits.data
    v = ld.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != ld.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {ld.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ContractError(f"targets must lie in [0, {v})")
    keep = np.ones(targets.shape, dtype=bool) if mask is None else ~np.asarray(mask, dtype=bool)
    n = int(keep.sum())
    if n == 0:
        logger.warning("nll_label_smoothed: every position is masked; loss defined as zero")
        return make_op(np.zeros((), dtype=ld.dtype), (logits,), lambda g: (np.zeros_like(ld),), "nll")

    ls = _log_softmax_np(ld, -1)
    nll_t = -np.take_along_axis(ls, targets[..., None], axis=-1)[..., 0]
    nll_u = -ls.mean(axis=-1)
    per = (1.0 - smoothing) * nll_t + smoothing * nll_u
    w = keep.astype(ld.dtype) / n
    value = np.asarray((per * w).sum())

    def bwd(g):
        q = np.full(ld.shape, smoothing / v, dtype=ld.dtype)
        np.put_along_axis(q, targets[..., None],
                          np.take_along_axis(q, targets[..., None], axis=-1) + (1.0 - smoothing), axis=-1)
        return ((np.exp(ls) - q) * (w * g)[..., None],)

    return make_op(value, (logits,), bwd, "nll")


def smoothing_floor(vocab_size: int, smoothing: float) -> float:
    """Minimum attainable label-smoothed loss: entropy of the smoothed target."""
    hi = 1.0 - smoothing + smoothing / vocab_size
    lo = smoothing / vocab_size
    value = -hi * np.log(hi)
    if lo > 0:
        value -= (vocab_size - 1) * lo * np.log(lo)
    return float(value)
