"""Prompt-free SAM-style mask decoder driven by a dense pseudo-mask prompt."""
from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .encoder import CrossAttention, cross_attention, sincos_position_embedding
from .functional import (
    attention,
    conv2d_stride2,
    conv_transpose2d_stride2,
    gelu,
    layer_norm,
    sigmoid,
    upsample_bilinear,
)
from .module import Linear, Module, ones_param, param, xavier, zeros_param
from .tensor import Tensor, concat, getitem, reshape

__all__ = [
    "MaskPromptEncoder",
    "TwoWayBlock",
    "MaskDecoder",
    "decode_features",
    "encode_mask_prompt",
    "two_way_block",
    "decode",
]


class MaskPromptEncoder(Module):
    """``log2(patch)`` stride-2 convs then a bias-free 1x1 projection to ``dim``."""

    def __init__(self, rng: np.random.Generator, patch: int, dim: int):
        n_down = int(np.log2(patch))
        widths = [1] + [min(4 ** (i + 1), 16) for i in range(n_down)]
        self.downs = [Linear(rng, 4 * widths[i], widths[i + 1]) for i in range(n_down)]
        self.proj = Linear(rng, widths[-1], dim, bias=False)


def encode_mask_prompt(pseudo_mask_logits: Tensor, enc: MaskPromptEncoder, image_hw: tuple[int, int] | None = None) -> Tensor:
    """``(N, H, W)`` logits to a ``(N, H/p, W/p, dim)`` dense prompt embedding."""
    n, h, w = pseudo_mask_logits.shape
    if image_hw is not None and (h, w) != tuple(image_hw):
        raise ValueError(f"mask size {h}x{w} does not match image size {image_hw}")
    x = reshape(sigmoid(pseudo_mask_logits), (n, h, w, 1))
    for down in enc.downs:
        x = gelu(conv2d_stride2(x, down.weight, down.bias))
    return enc.proj(x)


def _ln(dim: int):
    return ones_param((dim,)), zeros_param((dim,))


class TwoWayBlock(Module):
    def __init__(self, rng: np.random.Generator, dim: int, mlp_ratio: int = 2):
        self.norm1_w, self.norm1_b = _ln(dim)
        self.self_attn = CrossAttention(rng, dim)
        self.norm2_w, self.norm2_b = _ln(dim)
        self.cross_t2i = CrossAttention(rng, dim)
        self.norm3_w, self.norm3_b = _ln(dim)
        self.fc1 = Linear(rng, dim, mlp_ratio * dim)
        self.fc2 = Linear(rng, mlp_ratio * dim, dim)
        self.norm4_w, self.norm4_b = _ln(dim)
        self.norm5_w, self.norm5_b = _ln(dim)
        self.cross_i2t = CrossAttention(rng, dim)


def two_way_block(tokens: Tensor, image: Tensor, pos: Tensor, blk: TwoWayBlock, heads: int = 1) -> tuple[Tensor, Tensor]:
    """Token self-attention, token-to-image attention, token MLP, image-to-token attention.

    ``tokens`` is ``(N, 1+T, dim)`` (mask token first), ``image`` is ``(N, T, dim)``
    and ``pos`` holds the ``(T, dim)`` image position codes. Every step is a
    pre-norm residual update.
    """
    t = layer_norm(tokens, blk.norm1_w, blk.norm1_b)
    tokens = tokens + cross_attention(t, t, blk.self_attn, heads)
    t = layer_norm(tokens, blk.norm2_w, blk.norm2_b)
    tokens = tokens + _attend(t, image + pos, image, blk.cross_t2i, heads)
    t = layer_norm(tokens, blk.norm3_w, blk.norm3_b)
    tokens = tokens + blk.fc2(gelu(blk.fc1(t)))
    i = layer_norm(image, blk.norm4_w, blk.norm4_b)
    t = layer_norm(tokens, blk.norm5_w, blk.norm5_b)
    image = image + _attend(i + pos, t, t, blk.cross_i2t, heads)
    return tokens, image


def _attend(query: Tensor, keys: Tensor, values: Tensor, xa: CrossAttention, heads: int) -> Tensor:
    return xa.out(attention(xa.q(query), xa.k(keys), xa.v(values), heads))


class _ConvT(Module):
    """Weights of a 2x2 stride-2 transposed conv, ``(cin, 4*cout)`` plus a ``cout`` bias."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int):
        self.weight = xavier(rng, cin, cout, (cin, 4 * cout))
        self.bias = zeros_param((cout,))


class MaskDecoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        dim = cfg.dim
        self.patch = cfg.patch
        self.heads = cfg.heads
        self.prompt = MaskPromptEncoder(rng, cfg.patch, dim)
        self.mask_token = param(rng.normal(0.0, 1.0, (1, 1, dim)))
        self.blocks = [TwoWayBlock(rng, dim) for _ in range(cfg.decoder_depth)]
        self.up1 = _ConvT(rng, dim, dim // 4)
        self.up2 = _ConvT(rng, dim // 4, dim // 8)
        self.hyper = [Linear(rng, dim, dim), Linear(rng, dim, dim), Linear(rng, dim, dim // 8, zero=True)]


def decode_features(image_emb: Tensor, prompt_emb: Tensor, dec: MaskDecoder) -> tuple[Tensor, Tensor]:
    """Upscaled pixel features ``(N, 4h, 4w, dim/8)`` and the mask token's hypernetwork output ``(N, dim/8)``."""
    if image_emb.shape != prompt_emb.shape:
        raise ValueError(f"prompt {prompt_emb.shape} does not match embedding {image_emb.shape}")
    n, gh, gw, dim = image_emb.shape
    src = reshape(image_emb + prompt_emb, (n, gh * gw, dim))
    pos = Tensor(sincos_position_embedding(gh, gw, dim, src.dtype))
    token = dec.mask_token + Tensor(np.zeros((n, 1, dim), src.dtype))
    tokens = concat([token, src + pos], axis=1)
    image = src
    for blk in dec.blocks:
        tokens, image = two_way_block(tokens, image, pos, blk, dec.heads)
    mask_out = getitem(tokens, (slice(None), 0))  # (N, dim)
    for i, layer in enumerate(dec.hyper):
        mask_out = layer(mask_out)
        if i < len(dec.hyper) - 1:
            mask_out = gelu(mask_out)
    up = reshape(image, (n, gh, gw, dim))
    up = gelu(conv_transpose2d_stride2(up, dec.up1.weight, dec.up1.bias))
    up = gelu(conv_transpose2d_stride2(up, dec.up2.weight, dec.up2.bias))
    return up, mask_out


def decode(image_emb: Tensor, prompt_emb: Tensor, dec: MaskDecoder) -> Tensor:
    """Refine ``image_emb + prompt_emb`` (both ``(N, h, w, dim)``) into ``(N, H, W)`` logits."""
    up, mask_out = decode_features(image_emb, prompt_emb, dec)
    n, gh4, gw4, c = up.shape
    gh, gw, dim = gh4 // 4, gw4 // 4, 8 * c
    logits = reshape(up * reshape(mask_out, (n, 1, 1, dim // 8)), (n, 4 * gh, 4 * gw, dim // 8)).sum(axis=-1)
    factor = dec.patch // 4
    if factor > 1:
        logits = reshape(upsample_bilinear(reshape(logits, (n, 4 * gh, 4 * gw, 1)), factor), (n, gh * dec.patch, gw * dec.patch))
    return logits
