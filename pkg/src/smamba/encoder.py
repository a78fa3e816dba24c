"""Frozen toy ViT encoder with cross-attention adapters and the pseudo-mask head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .functional import attention, avg_pool_patches, gelu, layer_norm, linear, patchify, upsample_bilinear
from .module import Linear, Module, ones_param, param, xavier, zeros_param
from .tensor import Tensor, getitem, reshape

__all__ = [
    "sincos_position_embedding",
    "VitBlock",
    "VitBackbone",
    "CrossAttention",
    "Adapter",
    "AdapterStack",
    "EncoderOutput",
    "patch_embed",
    "vit_block",
    "cross_attention",
    "adapter_inject",
    "prior_tokenize",
    "encoder_mask_head",
    "vit_forward",
]


def sincos_position_embedding(gh: int, gw: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Fixed 2-D sine/cosine codes, ``(gh*gw, dim)``; half the width per axis."""
    if dim % 4:
        raise ValueError("position embedding width must be a multiple of 4")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter) / quarter)
    ys, xs = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")

    def encode(pos):
        out = pos.reshape(-1, 1) * omega[None, :]
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([encode(ys), encode(xs)], axis=1).astype(dtype)


class VitBlock(Module):
    def __init__(self, rng: np.random.Generator, dim: int, mlp_ratio: int):
        self.ln1_w = ones_param((dim,))
        self.ln1_b = zeros_param((dim,))
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.ln2_w = ones_param((dim,))
        self.ln2_b = zeros_param((dim,))
        self.fc1 = Linear(rng, dim, mlp_ratio * dim)
        self.fc2 = Linear(rng, mlp_ratio * dim, dim)


class VitBackbone(Module):
    """Patch embedding plus plain pre-norm blocks; frozen after construction."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.patch = cfg.patch
        self.dim = cfg.dim
        self.heads = cfg.heads
        pdim = cfg.patch * cfg.patch * 3
        self.patch_w = xavier(rng, pdim, cfg.dim)
        self.patch_b = zeros_param((cfg.dim,))
        self.blocks = [VitBlock(rng, cfg.dim, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.requires_grad_(False)


def patch_embed(image: Tensor, backbone: VitBackbone) -> Tensor:
    """``(N, H, W, 3) -> (N, T, dim)`` linear patch tokens plus position codes."""
    squeeze = image.ndim == 3
    if squeeze:
        image = reshape(image, (1,) + image.shape)
    n, h, w, _ = image.shape
    p = backbone.patch
    if h % p or w % p:
        raise ValueError(f"patch {p} must divide image size {h}x{w}")
    gh, gw = h // p, w // p
    patches = reshape(patchify(image, p), (n, gh * gw, p * p * 3))
    pos = Tensor(sincos_position_embedding(gh, gw, backbone.dim, image.dtype))
    tokens = linear(patches, backbone.patch_w, backbone.patch_b) + pos
    return reshape(tokens, tokens.shape[1:]) if squeeze else tokens


def vit_block(tokens: Tensor, block: VitBlock, heads: int) -> Tensor:
    """Pre-norm self-attention and GELU MLP, each with a residual connection."""
    b, t, d = tokens.shape
    qkv = reshape(block.qkv(layer_norm(tokens, block.ln1_w, block.ln1_b)), (b, t, 3, d))
    q, k, v = (getitem(qkv, (slice(None), slice(None), i)) for i in range(3))
    x = tokens + block.proj(attention(q, k, v, heads))
    return x + block.fc2(gelu(block.fc1(layer_norm(x, block.ln2_w, block.ln2_b))))


class CrossAttention(Module):
    """Cross-attention with Q/K/V/out linears.

    The key projection carries no bias (softmax is shift-invariant, so its
    gradient is identically zero) and neither does the output projection.
    """

    def __init__(self, rng: np.random.Generator, dim: int, zero_out: bool = False):
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim, bias=False)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim, bias=False, zero=zero_out)


def cross_attention(query: Tensor, context: Tensor, xa: CrossAttention, heads: int = 1) -> Tensor:
    return xa.out(attention(xa.q(query), xa.k(context), xa.v(context), heads))


class Adapter(Module):
    """One injection point: enhance the prior, then inject it behind a zero gate."""

    def __init__(self, rng: np.random.Generator, dim: int, rank: int):
        self.enhance = CrossAttention(rng, dim)
        self.inject = CrossAttention(rng, dim)
        self.down = Linear(rng, dim, rank)
        self.up = Linear(rng, rank, dim)
        self.gamma = param(np.zeros(1))


class AdapterStack(Module):
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.points = cfg.injection_points()
        self.prior_proj = Linear(rng, cfg.prior_channels, cfg.dim)
        self.blocks = [Adapter(rng, cfg.dim, cfg.adapter_rank) for _ in self.points]


def adapter_inject(vit_tokens: Tensor, prior_tokens: Tensor, adapter: Adapter) -> tuple[Tensor, Tensor]:
    prior = prior_tokens + cross_attention(prior_tokens, vit_tokens, adapter.enhance)
    injected = cross_attention(vit_tokens, prior, adapter.inject)
    delta = adapter.up(gelu(adapter.down(injected)))
    return vit_tokens + adapter.gamma * delta, prior


def prior_tokenize(prior_map: Tensor, patch: int, proj: Linear) -> Tensor:
    """Average-pool the prior map onto the patch grid and project to token width."""
    squeeze = prior_map.ndim == 3
    if squeeze:
        prior_map = reshape(prior_map, (1,) + prior_map.shape)
    pooled = avg_pool_patches(prior_map, patch)
    n, gh, gw, c = pooled.shape
    tokens = proj(reshape(pooled, (n, gh * gw, c)))
    return reshape(tokens, tokens.shape[1:]) if squeeze else tokens


def encoder_mask_head(embeddings: Tensor, head: Linear, patch: int) -> Tensor:
    """1x1 conv to a single channel, then bilinear upsampling by ``patch``: ``(N, H, W)`` logits."""
    n, gh, gw, _ = embeddings.shape
    logits = upsample_bilinear(head(embeddings), patch)
    return reshape(logits, (n, gh * patch, gw * patch))


def vit_forward(image: Tensor, backbone: VitBackbone) -> Tensor:
    """Prior-free backbone pass, ``(N, H, W, 3) -> (N, H/p, W/p, dim)``."""
    n, h, w, _ = image.shape
    tokens = patch_embed(image, backbone)
    for block in backbone.blocks:
        tokens = vit_block(tokens, block, backbone.heads)
    return reshape(tokens, (n, h // backbone.patch, w // backbone.patch, backbone.dim))


@dataclass
class EncoderOutput:
    embeddings: Tensor  # (N, H/p, W/p, dim)
    pseudo_mask_logits: Tensor  # (N, H, W)
    prior_map: Tensor | None = None  # (N, H, W, 6*c0)
