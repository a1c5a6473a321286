"""Differentiable primitives.

The op set is closed: every function here records one tape entry with its
own backward rule. Elementwise binary ops only broadcast over size-1 axes
and scalars (numpy rules); gradients are summed back to the input shape.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_result

# name -> function, consulted by the gradient-check suite
REGISTRY: dict = {}


def register(fn):
    REGISTRY[fn.__name__] = fn
    return fn


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------

@register
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b), "add",
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


@register
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b), "sub",
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


@register
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), "mul",
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


@register
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), "div", backward)


@register
def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), "neg", lambda g: (-g,))


@register
def power(a, p: float) -> Tensor:
    """``a ** p`` for a constant real exponent."""
    a = as_tensor(a)
    p = float(p)
    ad = a.data
    return make_result(ad ** p, (a,), "power", lambda g: (g * p * ad ** (p - 1.0),))


def square(a) -> Tensor:
    return power(a, 2.0)


@register
def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    pick_a = ad <= bd
    return make_result(np.where(pick_a, ad, bd), (a, b), "minimum",
                       lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), ad.shape),
                                  _unbroadcast(np.where(pick_a, 0.0, g), bd.shape)))


@register
def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return make_result(np.clip(ad, lo, hi), (a,), "clip", lambda g: (g * inside,))


# -- unary nonlinearities -----------------------------------------------

@register
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), "exp", lambda g: (g * out,))


@register
def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if np.any(ad <= 0):
        raise ValueError("log of non-positive value")
    return make_result(np.log(ad), (a,), "log", lambda g: (g / ad,))


@register
def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@register
def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_result(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


@register
def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return make_result(np.where(pos, a.data, 0.0), (a,), "relu", lambda g: (g * pos,))


@register
def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    scale = np.where(pos, 1.0, slope)
    return make_result(a.data * scale, (a,), "leaky_relu", lambda g: (g * scale,))


@register
def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    pos = ad > 0
    em = np.exp(np.minimum(ad, 0.0))
    out = np.where(pos, ad, alpha * (em - 1.0))
    return make_result(out, (a,), "elu", lambda g: (g * np.where(pos, 1.0, alpha * em),))


@register
def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return make_result(out, (a,), "softplus", lambda g: (g * _sigmoid(ad),))


# -- reductions and shape ops -------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


@register
def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), "sum", backward)


@register
def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([shape[i] for i in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_result(np.mean(a.data, axis=axes, keepdims=keepdims), (a,), "mean", backward)


@register
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(src),))


@register
def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,), "transpose",
                       lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


@register
def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return make_result(np.array(a.data[idx], dtype=np.float64), (a,), "getitem", backward)


@register
def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in ts], axis=axis), ts, "concat", backward)


@register
def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return make_result(np.stack([t.data for t in ts], axis=axis), ts, "stack", backward)


# -- linear algebra -----------------------------------------------------

@register
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    For 2-D inputs this is the plain ``m×k @ k×n`` product with
    ``dA = dC·Bᵀ`` and ``dB = Aᵀ·dC``.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), "matmul", backward)


@register
def softmax(a, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stable softmax; ``mask`` (bool, broadcastable) zeroes entries.

    Every slice along ``axis`` must keep at least one unmasked entry.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise ValueError("softmax mask leaves an empty row")
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return make_result(out, (a,), "softmax", backward)


# -- 1-D convolutions over [..., C, T] ----------------------------------

def _conv_offsets(k: int, dilation: int, padding: str):
    if padding == "same":
        if k % 2 == 0:
            raise ValueError(f"'same' padding needs an odd kernel size, got {k}")
        centre = (k - 1) // 2
        # true convolution: tap j reads x[i - d*(j - centre)]
        return [-dilation * (j - centre) for j in range(k)]
    if padding == "causal":
        return [-dilation * j for j in range(k)]
    raise ValueError(f"unknown padding {padding!r}")


def _shift(x: np.ndarray, off: int) -> np.ndarray:
    """``y[..., i] = x[..., i + off]`` with zeros outside the sequence."""
    T = x.shape[-1]
    out = np.zeros_like(x)
    if off >= 0:
        if off < T:
            out[..., : T - off] = x[..., off:]
    else:
        if -off < T:
            out[..., -off:] = x[..., : T + off]
    return out


@register
def dilated_depthwise_conv1d(x, kernel, dilation: int = 1, padding: str = "same") -> Tensor:
    """Per-channel dilated convolution ``y_c(i) = Σ_j K_c(j)·x_c(i − d·j)``.

    ``x`` is ``[..., C, T]`` and ``kernel`` is ``C×k``. With ``padding="same"``
    the taps are centred (pad ``d·(k−1)/2`` each side) so the output keeps
    length T; ``"causal"`` reads only the past.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if kernel.ndim != 2 or x.ndim < 2 or kernel.shape[0] != x.shape[-2]:
        raise ValueError(f"kernel {kernel.shape} does not match input channels of {x.shape}")
    C, k = kernel.shape
    offs = _conv_offsets(k, dilation, padding)
    xd, kd = x.data, kernel.data
    shifted = [_shift(xd, o) for o in offs]
    out = np.zeros_like(xd)
    for j, xs in enumerate(shifted):
        out += kd[:, j, None] * xs
    lead = tuple(range(xd.ndim - 2))

    def backward(g):
        gx = None
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for j, o in enumerate(offs):
                gx += _shift(kd[:, j, None] * g, -o)
        gk = None
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            for j, xs in enumerate(shifted):
                gk[:, j] = np.sum(g * xs, axis=lead + (xd.ndim - 1,))
        return gx, gk

    return make_result(out, (x, kernel), "dilated_depthwise_conv1d", backward)


def depthwise_conv1d(x, kernel, padding: str = "same") -> Tensor:
    """One convolution per input channel: ``Y_c = X_c ∗ K_c``.

    The usual printed form ``Y_c = X_c × X_c`` is a typo; each channel has
    its own kernel.
    """
    return dilated_depthwise_conv1d(x, kernel, dilation=1, padding=padding)


REGISTRY["depthwise_conv1d"] = depthwise_conv1d


@register
def pointwise_conv(x, kernel) -> Tensor:
    """1×1 convolution mixing channels: ``[..., C, T]`` with ``C×C'`` -> ``[..., C', T]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 2 or x.ndim < 2 or kernel.shape[0] != x.shape[-2]:
        raise ValueError(f"pointwise kernel {kernel.shape} does not match channels of {x.shape}")
    xd, kd = x.data, kernel.data
    out = np.einsum("ck,...ct->...kt", kd, xd)

    def backward(g):
        gx = np.einsum("ck,...kt->...ct", kd, g) if x.requires_grad else None
        gk = None
        if kernel.requires_grad:
            gk = np.einsum("nct,nkt->ck", xd.reshape(-1, *xd.shape[-2:]), g.reshape(-1, *g.shape[-2:]))
        return gx, gk

    return make_result(out, (x, kernel), "pointwise_conv", backward)
