"""Boundary-weighted Dice + BCE and the two stage objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .tensor import Tensor, sigmoid, softplus

__all__ = [
    "LossConfig",
    "default_kernel",
    "boundary_weight",
    "weighted_bce",
    "weighted_dice",
    "combined_loss",
    "stage1_loss",
    "stage2_loss",
]


@dataclass(frozen=True)
class LossConfig:
    kernel: int = 0  # 0: default_kernel(size)
    gain: float = 5.0
    smooth: float = 1.0

    def __post_init__(self):
        if self.kernel and self.kernel % 2 == 0:
            raise ValueError("weight kernel must be odd")
        if not self.smooth > 0:
            raise ValueError("smooth must be > 0")

    def kernel_for(self, size: int) -> int:
        return self.kernel or default_kernel(size)


def default_kernel(size: int) -> int:
    """31 at 96 px and above; otherwise the nearest odd integer to ``31*size/96`` (>= 3)."""
    if size >= 96:
        return 31
    k = int(np.floor(31 * size / 96 / 2)) * 2 + 1
    return max(3, k)


def _as_mask(g) -> np.ndarray:
    g = np.asarray(g.data if isinstance(g, Tensor) else g)
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("ground-truth mask must be binary")
    return g


def boundary_weight(g, kernel: int = 31, gain: float = 5.0) -> np.ndarray:
    """``1 + gain * |mean_filter(G) - G|`` with zero padding, per image on ``(..., H, W)``."""
    if kernel % 2 == 0:
        raise ValueError("weight kernel must be odd")
    g = _as_mask(g).astype(np.float64)
    size = (1,) * (g.ndim - 2) + (kernel, kernel)
    local = uniform_filter(g, size=size, mode="constant", cval=0.0)
    return 1.0 + gain * np.abs(local - g)


def _check(logits: Tensor, g: np.ndarray, w: np.ndarray) -> None:
    if logits.shape != g.shape or g.shape != w.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape}, mask {g.shape}, weight {w.shape}")


def _image_axes(x) -> tuple[int, int]:
    return (x.ndim - 2, x.ndim - 1)


def weighted_bce(logits: Tensor, g, w) -> Tensor:
    """``sum(w * bce) / sum(w)`` per image, averaged over leading axes.

    ``bce = softplus(x) - x*g`` is the stable form of the logistic loss.
    """
    g = _as_mask(g)
    w = np.asarray(w)
    _check(logits, g, w)
    gt = Tensor(g.astype(logits.dtype))
    wt = Tensor(w.astype(logits.dtype))
    axes = _image_axes(logits)
    per = (wt * (softplus(logits) - logits * gt)).sum(axis=axes) / Tensor(w.sum(axis=axes).astype(logits.dtype))
    return per.mean()


def weighted_dice(probs: Tensor, g, w, smooth: float = 1.0) -> Tensor:
    """``1 - (2*sum(w*p*g) + eps) / (sum(w*(p+g)) + eps)`` per image, averaged."""
    g = _as_mask(g)
    w = np.asarray(w)
    _check(probs, g, w)
    gt = Tensor(g.astype(probs.dtype))
    wt = Tensor(w.astype(probs.dtype))
    axes = _image_axes(probs)
    inter = (wt * probs * gt).sum(axis=axes)
    union = (wt * (probs + gt)).sum(axis=axes)
    return (1.0 - (inter * 2.0 + smooth) / (union + smooth)).mean()


def combined_loss(logits: Tensor, g, cfg: LossConfig = LossConfig()) -> Tensor:
    """Weighted Dice on ``sigmoid(logits)`` plus weighted BCE on the logits."""
    g = _as_mask(g)
    w = boundary_weight(g, cfg.kernel_for(min(g.shape[-2:])), cfg.gain)
    return weighted_dice(sigmoid(logits), g, w, cfg.smooth) + weighted_bce(logits, g, w)


def stage1_loss(g, pseudo_logits: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    return combined_loss(pseudo_logits, g, cfg)


def stage2_loss(g, decoder_logits: Tensor, pseudo_logits: Tensor | None = None, aux: bool = False, cfg: LossConfig = LossConfig()) -> Tensor:
    """Decoder loss; with ``aux`` the pseudo-mask loss is added as well."""
    loss = combined_loss(decoder_logits, g, cfg)
    if aux:
        if pseudo_logits is None:
            raise ValueError("aux supervision needs the pseudo-mask logits")
        loss = loss + combined_loss(pseudo_logits, g, cfg)
    return loss
