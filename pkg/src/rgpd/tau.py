"""Temporal Attention Unit and the plain multi-head self-attention used when TAU is ablated.

TAU was designed for 2-D feature maps; here it runs over ``[..., C, T]``
sequences with the same operator order (depthwise -> dilated depthwise ->
pointwise for static attention, average pool -> FC for dynamic attention).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, ops
from .nn import ParamGroup, xavier_uniform, zeros


def init_tau_params(rng: np.random.Generator, channels: int, k_dw: int = 3, k_dil: int = 3) -> ParamGroup:
    if k_dw % 2 == 0 or k_dil % 2 == 0:
        raise ValueError("TAU kernel sizes must be odd")
    return {
        "dw": xavier_uniform(rng, k_dw, k_dw, shape=(channels, k_dw)),
        "dil": xavier_uniform(rng, k_dil, k_dil, shape=(channels, k_dil)),
        "pw": xavier_uniform(rng, channels, channels),
        "fc_W": xavier_uniform(rng, channels, channels),
        "fc_b": zeros(channels),
    }


def identity_tau_params(channels: int, k_dw: int = 3, k_dil: int = 3) -> ParamGroup:
    """Delta depthwise kernels and identity pointwise/FC weights."""
    dw = np.zeros((channels, k_dw))
    dw[:, k_dw // 2] = 1.0
    dil = np.zeros((channels, k_dil))
    dil[:, k_dil // 2] = 1.0
    return {
        "dw": Tensor(dw, requires_grad=True),
        "dil": Tensor(dil, requires_grad=True),
        "pw": Tensor(np.eye(channels), requires_grad=True),
        "fc_W": Tensor(np.eye(channels), requires_grad=True),
        "fc_b": Tensor(np.zeros(channels), requires_grad=True),
    }


def _check(H: Tensor, params: ParamGroup) -> None:
    C = params["pw"].shape[0]
    if H.ndim < 2 or H.shape[-2] != C:
        raise ValueError(f"TAU expects [..., {C}, T], got {H.shape}")


def static_attention(H: Tensor, params: ParamGroup, dilation: int = 2) -> Tensor:
    """``SA = Conv1x1(DW-D Conv(DW Conv(H)))``, same shape as ``H``."""
    _check(H, params)
    x = ops.depthwise_conv1d(H, params["dw"], padding="same")
    x = ops.dilated_depthwise_conv1d(x, params["dil"], dilation=dilation, padding="same")
    return ops.pointwise_conv(x, params["pw"])


def dynamic_attention(H: Tensor, params: ParamGroup) -> Tensor:
    """``DA = sigmoid(FC(AvgPool_t(H)))`` with shape ``[..., C, 1]``."""
    _check(H, params)
    pooled = ops.mean(H, axis=-1)
    gate = ops.sigmoid(ops.matmul(ops.reshape(pooled, pooled.shape[:-1] + (1, pooled.shape[-1])), params["fc_W"])
                       + params["fc_b"])
    return ops.swapaxes(gate, -1, -2)


def tau_forward(H: Tensor, params: ParamGroup, dilation: int = 2) -> Tensor:
    """``H' = (SA ⊗ DA) ⊙ H``.

    DA carries one weight per channel, so the Kronecker product with the
    ``C×T`` static map is a broadcast over time: ``H'[c,t] = SA[c,t]·DA[c]·H[c,t]``.
    """
    sa = static_attention(H, params, dilation)
    da = dynamic_attention(H, params)
    return sa * da * H


# -- multi-head self-attention -------------------------------------------------

def init_mhsa_params(rng: np.random.Generator, dim: int, heads: int = 2) -> ParamGroup:
    if dim % heads:
        raise ValueError(f"model dim {dim} not divisible by {heads} heads")
    return {
        "Wq": xavier_uniform(rng, dim, dim),
        "Wk": xavier_uniform(rng, dim, dim),
        "Wv": xavier_uniform(rng, dim, dim),
        "Wo": xavier_uniform(rng, dim, dim),
    }


def self_attention_weights(X: Tensor, params: ParamGroup, heads: int):
    """Per-head ``softmax(QKᵀ/√d_k)`` of shape ``[..., heads, T, T]`` and the split values."""
    D = X.shape[-1]
    if D % heads or params["Wq"].shape[0] != D:
        raise ValueError(f"cannot split dim {D} into {heads} heads")
    dk = D // heads
    lead, T = X.shape[:-2], X.shape[-2]

    def split(t: Tensor) -> Tensor:
        t = ops.reshape(t, lead + (T, heads, dk))
        return ops.swapaxes(t, -2, -3)  # [..., heads, T, dk]

    q = split(ops.matmul(X, params["Wq"]))
    k = split(ops.matmul(X, params["Wk"]))
    v = split(ops.matmul(X, params["Wv"]))
    scores = ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dk))
    return ops.softmax(scores, axis=-1), v


def multi_head_self_attention(X: Tensor, params: ParamGroup, heads: int = 2) -> Tensor:
    """Scaled dot-product attention per head over ``X`` (``[..., T, D]``), heads concatenated then projected."""
    attn, v = self_attention_weights(X, params, heads)
    mixed = ops.swapaxes(ops.matmul(attn, v), -2, -3)  # [..., T, heads, dk]
    concat = ops.reshape(mixed, X.shape)
    return ops.matmul(concat, params["Wo"])
