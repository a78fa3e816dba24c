"""Mamba-Prior: multi-scale decomposition, channel pooling, Mamba gating, fusion."""
from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .functional import conv2d, global_avg_pool, global_max_pool
from .module import Module, param
from .ssm import MambaLayerParams, mamba_layer
from .tensor import Tensor, concat, reshape

__all__ = [
    "ConvParams",
    "MambaPrior",
    "msd",
    "channel_pool",
    "channel_interaction",
    "fuse",
    "mamba_prior_forward",
]


class ConvParams(Module):
    def __init__(self, rng: np.random.Generator, k: int, cin: int, cout: int):
        self.k = k
        self.weight = param(rng.normal(0.0, 1.0 / np.sqrt(k * k * cin), (k, k, cin, cout)))
        self.bias = param(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class MambaPrior(Module):
    """Parameters of the prior branch.

    With ``use_msd`` the image goes through one same-padded conv per kernel
    size, stacked in the declared order (default 7, 5, 3: coarse scale first).
    Without it a single 3x3 stem produces the ``6*c0``-channel prior directly.
    ``use_mamba`` selects Mamba channel gating; otherwise the gates are 1.
    """

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        self.c0 = cfg.c0
        self.use_msd = cfg.use_msd
        self.use_mamba = cfg.use_mamba and cfg.use_msd
        self.chunk = cfg.scan_chunk or None
        if self.use_msd:
            per_scale = 3 * cfg.c0 // len(cfg.kernels)
            self.convs = [ConvParams(rng, k, 3, per_scale) for k in cfg.kernels]
        else:
            self.stem = ConvParams(rng, 3, 3, 6 * cfg.c0)
        if self.use_mamba:
            kw = dict(expand=cfg.mamba_expand, n_state=cfg.mamba_state, conv_width=cfg.mamba_conv)
            self.mamba_s = MambaLayerParams(rng, 1, **kw)
            self.mamba_c = MambaLayerParams(rng, 1, **kw)

    @property
    def max_kernel(self) -> int:
        return max(c.k for c in self.convs) if self.use_msd else 3

    def __call__(self, image: Tensor) -> Tensor:
        return mamba_prior_forward(image, self)


def msd(image: Tensor, prior: MambaPrior) -> Tensor:
    """``(N, H, W, 3) -> (N, H, W, 3*c0)``: per-scale convs concatenated in pyramid order."""
    h, w = image.shape[-3], image.shape[-2]
    if min(h, w) < prior.max_kernel:
        raise ValueError(f"image {h}x{w} smaller than kernel {prior.max_kernel}")
    return concat([conv(image) for conv in prior.convs], axis=-1)


def channel_pool(m_star: Tensor) -> tuple[Tensor, Tensor]:
    """Saliency (spatial max) and context (spatial mean) vectors, each ``(N, C)``."""
    lead = m_star.shape[:-3]
    c = m_star.shape[-1]
    return reshape(global_max_pool(m_star), lead + (c,)), reshape(global_avg_pool(m_star), lead + (c,))


def channel_interaction(m_s: Tensor, m_c: Tensor, prior: MambaPrior) -> tuple[Tensor, Tensor]:
    """Run each pooled vector through its own Mamba layer along the channel axis."""
    if m_s.shape != m_c.shape:
        raise ValueError(f"pooled vectors differ in shape: {m_s.shape} vs {m_c.shape}")
    expected = 3 * prior.c0
    if m_s.shape[-1] != expected:
        raise ValueError(f"pooled vectors must have length {expected}, got {m_s.shape[-1]}")
    lead = m_s.shape[:-1]
    seq_shape = (int(np.prod(lead)) if lead else 1, expected, 1)
    out_s = mamba_layer(reshape(m_s, seq_shape), prior.mamba_s, prior.chunk)
    out_c = mamba_layer(reshape(m_c, seq_shape), prior.mamba_c, prior.chunk)
    return reshape(out_s, m_s.shape), reshape(out_c, m_c.shape)


def fuse(m_star: Tensor, gate_s: Tensor, gate_c: Tensor) -> Tensor:
    """``concat(gate_s * M*, gate_c * M*)`` with the gates broadcast over space."""
    c = m_star.shape[-1]
    if gate_s.shape[-1] != c or gate_c.shape[-1] != c:
        raise ValueError(f"gate length must equal channel count {c}")
    lead = m_star.shape[:-3]
    gs = reshape(gate_s, lead + (1, 1, c))
    gc = reshape(gate_c, lead + (1, 1, c))
    return concat([m_star * gs, m_star * gc], axis=-1)


def mamba_prior_forward(image: Tensor, prior: MambaPrior) -> Tensor:
    """Image ``(N, H, W, 3)`` to the domain-prior map ``(N, H, W, 6*c0)``."""
    if not prior.use_msd:
        return prior.stem(image)
    m_star = msd(image, prior)
    if not prior.use_mamba:
        ones = Tensor(np.ones(m_star.shape[:-3] + (m_star.shape[-1],), m_star.dtype))
        return fuse(m_star, ones, ones)
    m_s, m_c = channel_pool(m_star)
    gate_s, gate_c = channel_interaction(m_s, m_c, prior)
    return fuse(m_star, gate_s, gate_c)
