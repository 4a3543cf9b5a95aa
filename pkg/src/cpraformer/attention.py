"""The two self-attention branches: sparse prompt channel attention and
convolutional spatial pixel refinement attention.

The channel branch computes per-head C_h x C_h attention over channel tokens
(spatial positions are the contraction axis) and keeps only the top-k logits
per row, where k is set dynamically by a small learned prompt operator.  The
spatial branch approximates pixel attention with a gated convolution stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .engine import (Tensor, conv2d, depthwise_conv2d, gap, gelu, layernorm,
                     linear, masked_softmax, matmul, mean_over, merge_heads,
                     mul, relu, reshape4, scale, sigmoid, split_channels,
                     split_heads, transpose_last2)


def _detach_params(params):
    kwargs = {}
    for f in fields(params):
        v = getattr(params, f.name)
        kwargs[f.name] = v.detach() if isinstance(v, Tensor) else v
    return type(params)(**kwargs)


@dataclass
class EpgoParams:
    """Prompt-operator weights; hidden width is max(ceil(C/4), 4)."""

    ln_gamma: Tensor
    ln_beta: Tensor
    w1: Tensor
    b1: Tensor | None
    w2: Tensor
    b2: Tensor | None

    def detach(self) -> "EpgoParams":
        return _detach_params(self)


@dataclass
class SpcSaParams:
    """Channel-attention weights: qkv pointwise+depthwise, output projection,
    and a fixed positive per-head temperature multiplier."""

    qkv_pw_w: Tensor
    qkv_pw_b: Tensor | None
    qkv_dw_w: Tensor
    qkv_dw_b: Tensor | None
    out_w: Tensor
    out_b: Tensor | None
    temperature: Tensor
    heads: int

    def detach(self) -> "SpcSaParams":
        return _detach_params(self)


@dataclass
class SprSaParams:
    lin_in_w: Tensor
    lin_in_b: Tensor | None
    dw3_w: Tensor
    dw3_b: Tensor | None
    pw_mid_w: Tensor
    pw_mid_b: Tensor | None
    pw_out_w: Tensor
    pw_out_b: Tensor | None

    def detach(self) -> "SprSaParams":
        return _detach_params(self)


@dataclass
class SparsityTrace:
    """Record of one dynamic-sparsity decision."""

    p: float
    k_per_head: int
    retained_fraction: float


def epgo_hidden_dim(channels: int) -> int:
    return max(math.ceil(channels / 4), 4)


def dynamic_k(p: float, row_len: int) -> int:
    """Row length scaled by the prompt fraction, rounded and clamped to [1, row_len]."""
    return int(np.clip(np.rint(row_len * p), 1, row_len))


def epgo(f: Tensor, params: EpgoParams, heads: int, taped: bool = False
         ) -> tuple[Tensor, np.ndarray, SparsityTrace]:
    """Prompt fraction p and per-item dynamic k for a block input.

    Normalize -> linear -> ReLU -> linear -> sigmoid, then the global mean of
    the sigmoid map per batch item.  By default the whole operator runs
    detached (no gradient flows through the integerized k); `taped` keeps it
    on the tape for the straight-through training experiment.

    Returns the per-item fraction tensor (N,1,1,1), the per-item k values,
    and a trace carrying the batch-mean statistics.
    """
    if not taped:
        f = f.detach()
        params = params.detach()
    h = layernorm(f, params.ln_gamma, params.ln_beta)
    h = relu(linear(h, params.w1, params.b1))
    s = sigmoid(linear(h, params.w2, params.b2))
    p = mean_over(s, (1, 2, 3))

    c = f.shape[1]
    if c % heads != 0:
        raise ValueError(f"epgo: {c} channels not divisible by {heads} heads")
    ch = c // heads
    p_items = p.data.reshape(-1).astype(np.float64)
    k_items = np.array([dynamic_k(pi, ch) for pi in p_items], dtype=np.int64)
    p_mean = float(p_items.mean())
    k_mean = dynamic_k(p_mean, ch)
    trace = SparsityTrace(p=p_mean, k_per_head=k_mean,
                          retained_fraction=k_mean / ch)
    return p, k_items, trace


def topk_row_mask(m: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask keeping the k largest entries of each row of m[..., :, :].

    Ties break toward the lowest column index, so kept sets nest as k grows.
    """
    cols = m.shape[-1]
    if not 1 <= k <= cols:
        raise ValueError(f"topk_row_mask: k={k} outside [1, {cols}]")
    order = np.argsort(-m, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(m.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def spc_sa(f: Tensor, params: SpcSaParams, epgo_params: EpgoParams,
           mask_override: np.ndarray | None = None, ste: bool = False
           ) -> tuple[Tensor, SparsityTrace, np.ndarray]:
    """Sparse prompt channel self-attention.

    Per head, channel tokens Q,K of length H*W form logits Q K^T scaled by
    temperature/sqrt(H*W); each row keeps its top-k entries (k from the
    prompt operator), the rest are excluded from the softmax entirely.
    Returns the output, the sparsity trace, and the boolean mask that was
    applied (so gradient checks can freeze it).
    """
    n, c, h, w = f.shape
    heads = params.heads
    if c % heads != 0:
        raise ValueError(f"spc_sa: {c} channels not divisible by {heads} heads")
    ch = c // heads
    if np.any(params.temperature.data <= 0):
        raise ValueError("spc_sa: temperature must be positive")

    qkv = conv2d(f, params.qkv_pw_w, params.qkv_pw_b)
    qkv = depthwise_conv2d(qkv, params.qkv_dw_w, params.qkv_dw_b)
    q, k, v = split_channels(qkv, 3)
    qh, kh, vh = (split_heads(t, heads) for t in (q, k, v))
    logits = matmul(qh, transpose_last2(kh))
    logits = mul(logits, reshape4(params.temperature, (1, heads, 1, 1)))
    logits = scale(logits, 1.0 / math.sqrt(h * w))

    p, k_items, trace = epgo(f, epgo_params, heads, taped=ste)
    if mask_override is not None:
        mask = mask_override
    else:
        mask = np.zeros(logits.shape, dtype=bool)
        for ni in range(n):
            mask[ni] = topk_row_mask(logits.data[ni], int(k_items[ni]))

    attn = masked_softmax(logits, mask, axis=-1)
    out = matmul(attn, vh)
    if ste:
        # value-preserving ratio p/stop_grad(p) routes a gradient into the
        # prompt operator without changing the forward result
        ratio = mul(p, Tensor(1.0 / p.data))
        out = mul(out, reshape4(ratio, (n, 1, 1, 1)))
    out = merge_heads(out, h, w)
    out = conv2d(out, params.out_w, params.out_b)
    return out, trace, mask


def spr_sa(f: Tensor, params: SprSaParams) -> Tensor:
    """Spatial pixel refinement: gated convolution approximation of attention.

    Linear -> 3x3 depthwise -> pointwise gives the local map; its global
    average reweights it per channel before GELU and the output projection.
    """
    t = linear(f, params.lin_in_w, params.lin_in_b)
    t = depthwise_conv2d(t, params.dw3_w, params.dw3_b)
    f_local = conv2d(t, params.pw_mid_w, params.pw_mid_b)
    f_pooled = gap(f_local)
    return conv2d(gelu(mul(f_pooled, f_local)), params.pw_out_w, params.pw_out_b)
