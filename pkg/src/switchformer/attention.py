"""Transformer sublayers and the four modality-interaction attention modes.

One shared-weight attention operator serves all four modes; a mode is just
a boolean attention mask over the concatenated [visual; text] sequence.
Convention used throughout: the visual sequence occupies rows/columns
[0, n_img) and text occupies [n_img, n_img + n_txt).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateInputError, DimensionError, NumericError

NEG_MASK_FILL = -1e9


class InteractionMode(IntEnum):
    """The four ways the two modalities may exchange attention.

    SELF_SELF: each modality attends only itself.
    SELF_CROSS: visual attends itself; text attends the visual tokens.
    CROSS_SELF: visual attends the text tokens; text attends itself.
    JOINT: every token attends the whole combined sequence.
    """

    SELF_SELF = 0
    SELF_CROSS = 1
    CROSS_SELF = 2
    JOINT = 3


ALL_MODES = tuple(InteractionMode)


@dataclass
class AttentionMask:
    """Boolean reachability matrix over the combined token sequence."""

    allowed: np.ndarray  # [n_img+n_txt, n_img+n_txt], True where attention may flow
    n_img: int
    n_txt: int


@dataclass
class LayerParams:
    """One transformer layer's weights, shared by all four attention modes.

    Query/key/value/output projections are stored head-combined as [d, d];
    heads are carved out by reshaping, which is equivalent to per-head
    [d, d/h] blocks side by side.
    """

    wq: T.Tensor
    wk: T.Tensor
    wv: T.Tensor
    wo: T.Tensor
    w1: T.Tensor
    b1: T.Tensor
    w2: T.Tensor
    b2: T.Tensor
    ln1_gain: T.Tensor
    ln1_bias: T.Tensor
    ln2_gain: T.Tensor
    ln2_bias: T.Tensor
    n_heads: int

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @staticmethod
    def create(store: T.ParamStore, prefix: str, d: int, n_heads: int,
               d_ffn: int, rng: np.random.Generator, dtype=np.float32) -> "LayerParams":
        if d % n_heads != 0:
            raise ContractError(f"head count {n_heads} must divide model dim {d}")
        def w(name, shape):
            # fan-in scaling keeps sublayer outputs near unit scale, which
            # matters at desk depth/width where signal must reach the
            # marker tokens within a few layers
            std = 1.0 / math.sqrt(shape[0])
            return store.add(f"{prefix}.{name}",
                             T.Tensor(rng.normal(0.0, std, size=shape), dtype=dtype))
        def const(name, shape, value):
            return store.add(f"{prefix}.{name}",
                             T.Tensor(np.full(shape, value), dtype=dtype))
        return LayerParams(
            wq=w("wq", (d, d)), wk=w("wk", (d, d)), wv=w("wv", (d, d)),
            wo=w("wo", (d, d)),
            w1=w("w1", (d, d_ffn)), b1=const("b1", d_ffn, 0.0),
            w2=w("w2", (d_ffn, d)), b2=const("b2", d, 0.0),
            ln1_gain=const("ln1_gain", d, 1.0), ln1_bias=const("ln1_bias", d, 0.0),
            ln2_gain=const("ln2_gain", d, 1.0), ln2_bias=const("ln2_bias", d, 0.0),
            n_heads=n_heads,
        )


def build_mode_mask(mode: InteractionMode, n_img: int, n_txt: int,
                    pad=None) -> AttentionMask:
    """Reachability mask for one interaction mode.

    ``pad`` is an optional boolean vector over the combined sequence
    (True = padding). Padding columns are removed from every row; rows are
    left as-is and padded-row outputs are discarded downstream.
    """
    if n_img < 1 or n_txt < 1:
        raise ContractError(f"need n_img >= 1 and n_txt >= 1, got {n_img}, {n_txt}")
    n = n_img + n_txt
    if pad is None:
        pad = np.zeros(n, dtype=bool)
    pad = np.asarray(pad, dtype=bool)
    if pad.shape != (n,):
        raise DimensionError(f"pad length {pad.shape} vs sequence {n}")
    if pad[:n_img].all():
        raise DegenerateInputError("visual modality is entirely padding")
    if pad[n_img:].all():
        raise DegenerateInputError("text modality is entirely padding")

    allowed = np.zeros((n, n), dtype=bool)
    img = slice(0, n_img)
    txt = slice(n_img, n)
    if mode == InteractionMode.SELF_SELF:
        allowed[img, img] = True
        allowed[txt, txt] = True
    elif mode == InteractionMode.SELF_CROSS:
        allowed[:, img] = True
    elif mode == InteractionMode.CROSS_SELF:
        allowed[:, txt] = True
    elif mode == InteractionMode.JOINT:
        allowed[:, :] = True
    else:
        raise ContractError(f"unknown interaction mode {mode!r}")
    allowed[:, pad] = False
    return AttentionMask(allowed=allowed, n_img=n_img, n_txt=n_txt)


def mask_bias(mask, dtype=np.float32) -> np.ndarray:
    """Additive pre-softmax bias: 0 where allowed, a large negative fill
    where not. Accepts an AttentionMask or a stacked boolean array."""
    allowed = mask.allowed if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)
    return np.where(allowed, 0.0, NEG_MASK_FILL).astype(dtype)


def _split_heads(x: T.Tensor, n_heads: int) -> T.Tensor:
    # [..., N, d] -> [..., H, N, d/H]
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, n_heads, d // n_heads))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return T.transpose(x, axes)


def _merge_heads(x: T.Tensor) -> T.Tensor:
    # [..., H, N, d/H] -> [..., N, d]
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = T.transpose(x, axes)
    *lead, n, h, dh = x.shape
    return T.reshape(x, (*lead, n, h * dh))


def generalized_mha(x_input: T.Tensor, mask, params: LayerParams,
                    layer_index: int | None = None) -> T.Tensor:
    """Masked multi-head attention over the combined sequence.

    ``x_input`` is [N, d] or [B, N, d]; ``mask`` is an AttentionMask shared
    by the batch or a boolean [B, N, N] array with one mask per sample.
    With an all-ones mask this reduces to standard single-stream MHA.
    """
    d = params.dim
    if x_input.shape[-1] != d:
        raise DimensionError(f"input width {x_input.shape[-1]} vs params dim {d}")
    n = x_input.shape[-2]
    bias = mask_bias(mask, dtype=x_input.dtype)
    if bias.shape[-1] != n:
        raise DimensionError(f"mask size {bias.shape} vs sequence length {n}")
    if bias.ndim == 3:
        bias = bias[:, None, :, :]  # broadcast over heads

    q = _split_heads(T.matmul(x_input, params.wq), params.n_heads)
    k = _split_heads(T.matmul(x_input, params.wk), params.n_heads)
    v = _split_heads(T.matmul(x_input, params.wv), params.n_heads)

    d_head = d // params.n_heads
    axes = list(range(k.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    scores = T.scale(T.matmul(q, T.transpose(k, axes)), 1.0 / math.sqrt(d_head))
    if np.isnan(scores.data).any():
        where = f" at layer {layer_index}" if layer_index is not None else ""
        raise NumericError(f"NaN in attention scores{where}")
    attn = T.softmax_lastdim(T.add_const(scores, bias))
    ctx = _merge_heads(T.matmul(attn, v))
    return T.matmul(ctx, params.wo)


def residual_norm(sublayer_out: T.Tensor, residual_in: T.Tensor,
                  gain: T.Tensor, bias: T.Tensor) -> T.Tensor:
    """Post-sublayer add-and-normalize."""
    if sublayer_out.shape != residual_in.shape:
        raise DimensionError(
            f"residual shapes differ: {sublayer_out.shape} vs {residual_in.shape}")
    return T.layer_norm(T.add(sublayer_out, residual_in), gain, bias)


def ffn_block(x: T.Tensor, params: LayerParams) -> T.Tensor:
    """Feed-forward sublayer with its inner residual and trailing norm."""
    h = T.gelu(T.add_bias(T.matmul(x, params.w1), params.b1))
    inner = T.add_bias(T.matmul(h, params.w2), params.b2)
    return T.layer_norm(T.add(x, inner), params.ln2_gain, params.ln2_bias)


def transformer_layer(x: T.Tensor, mask, params: LayerParams,
                      layer_index: int | None = None) -> T.Tensor:
    """Full layer: masked attention, add+norm, then the FFN block."""
    attn = generalized_mha(x, mask, params, layer_index=layer_index)
    normed = residual_norm(attn, x, params.ln1_gain, params.ln1_bias)
    return ffn_block(normed, params)
