"""Differentiable operators over :class:`~dmtkit.numerics.tensor.Tensor`."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .tensor import ShapeError, Tensor, as_tensor, record_macs
from .window import SlidingWindowSpec, WindowError, fold_array, unfold_array


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return Tensor._from_op(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return Tensor._from_op(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return Tensor._from_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return Tensor._from_op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    return Tensor._from_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def abs(a: Tensor) -> Tensor:  # noqa: A001
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (np.sign(a.data) * g,), "abs")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return Tensor._from_op(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return Tensor._from_op(x * cdf, (a,), bw, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# -- reductions and layout ----------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._from_op(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, bw, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``a[index]`` along the first axis."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(a.data[index], (a,), bw, "take_rows")


def scatter_rows(a: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """Place the rows of ``a`` at ``index`` in a zero array with ``n_rows`` rows."""
    index = np.asarray(index, dtype=np.int64)
    if len(index) != a.shape[0]:
        raise ShapeError(f"{len(index)} indices for {a.shape[0]} rows")
    out = np.zeros((n_rows,) + a.shape[1:])
    out[index] = a.data
    return Tensor._from_op(out, (a,), lambda g: (g[index],), "scatter_rows")


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of ``M x K`` and ``K x N``; equal leading batch axes are allowed."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        if b.ndim != 2:
            raise ShapeError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    record_macs(int(np.prod(out.shape)) * a.shape[-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if gb.ndim > b.ndim:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return Tensor._from_op(out, (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm width {d} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dg = (g * xhat).sum(axis=lead)
        db = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dg, db

    return Tensor._from_op(out, (x, gamma, beta), bw, "layer_norm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for row-vector inputs."""
    y = matmul(x, weight)
    return y if bias is None else y + bias


# -- sliding windows ----------------------------------------------------------


def unfold(x: Tensor, spec: SlidingWindowSpec) -> Tensor:
    """``(..., C, H, W) -> (..., C*k*k, N)``; the adjoint is :func:`fold`."""
    h, w = x.shape[-2:]
    cols = unfold_array(x.data, spec)
    return Tensor._from_op(cols, (x,), lambda g: (fold_array(g, spec, h, w),), "unfold")


def fold(cols: Tensor, spec: SlidingWindowSpec, out_h: int, out_w: int) -> Tensor:
    """Overlap-add ``(..., C*k*k, N) -> (..., C, out_h, out_w)``."""
    out = fold_array(cols.data, spec, out_h, out_w)
    return Tensor._from_op(out, (cols,), lambda g: (unfold_array(g, spec),), "fold")


def _as_batch(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected C x H x W or B x C x H x W, got {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: SlidingWindowSpec) -> Tensor:
    """Cross-correlation of ``(B?) x C_in x H x W`` with ``C_out x C_in x k x k``."""
    xb, squeeze = _as_batch(x)
    c_out, c_in, kh, kw = weight.shape
    if kh != spec.kernel or kw != spec.kernel:
        raise WindowError(f"weight kernel {kh}x{kw} does not match window {spec.kernel}")
    if xb.shape[1] != c_in:
        raise ShapeError(f"conv2d expects {c_in} input channels, got {xb.shape[1]}")
    b, _, h, w = xb.shape
    oh, ow = spec.grid(h, w)
    cols = unfold_array(xb.data, spec)  # (B, C_in*k*k, N)
    wm = weight.data.reshape(c_out, -1)
    out = np.matmul(wm, cols)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(b, c_out, oh, ow)

    def bw(g):
        gm = g.reshape(b, c_out, oh * ow)
        gw = np.einsum("bon,bkn->ok", gm, cols).reshape(weight.shape)
        gcols = np.matmul(wm.T, gm)
        gx = fold_array(gcols, spec, h, w)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=(0, 2)))
        return grads

    parents = (xb, weight) if bias is None else (xb, weight, bias)
    out_t = Tensor._from_op(out, parents, bw, "conv2d")
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: SlidingWindowSpec) -> Tensor:
    """Per-channel ``K x K`` cross-correlation, ``weight`` shaped ``C x 1 x K x K``.

    Only size-preserving windows (odd K, stride 1, padding (K-1)/2) are accepted.
    """
    xb, squeeze = _as_batch(x)
    c, one, k, k2 = weight.shape
    if k % 2 == 0:
        raise WindowError(f"depthwise kernel must be odd, got {k}")
    if one != 1 or k2 != k or spec != SlidingWindowSpec.same(k):
        raise WindowError(f"depthwise conv needs a stride-1 'same' window for kernel {k}, got {spec}")
    if xb.shape[1] != c:
        raise ShapeError(f"depthwise conv expects {c} channels, got {xb.shape[1]}")
    b, _, h, w = xb.shape
    cols = unfold_array(xb.data, spec).reshape(b, c, k * k, h * w)
    wm = weight.data.reshape(c, k * k)
    out = np.einsum("ck,bckn->bcn", wm, cols)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(b, c, h, w)

    def bw(g):
        gm = g.reshape(b, c, h * w)
        gw = np.einsum("bcn,bckn->ck", gm, cols).reshape(weight.shape)
        gcols = (wm[None, :, :, None] * gm[:, :, None, :]).reshape(b, c * k * k, h * w)
        grads = [fold_array(gcols, spec, h, w), gw]
        if bias is not None:
            grads.append(gm.sum(axis=(0, 2)))
        return grads

    parents = (xb, weight) if bias is None else (xb, weight, bias)
    out_t = Tensor._from_op(out, parents, bw, "depthwise_conv2d")
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Repeat every pixel of the last two axes into a 2x2 block."""
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def bw(g):
        *lead, h2, w2 = g.shape
        return (g.reshape(*lead, h2 // 2, 2, w2 // 2, 2).sum(axis=(-3, -1)),)

    return Tensor._from_op(out, (x,), bw, "upsample")
