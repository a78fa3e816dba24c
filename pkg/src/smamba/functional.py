"""Neural-network operations built on :mod:`smamba.tensor`.

Image tensors are channels-last: ``(N, H, W, C)`` or ``(H, W, C)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    Tensor,
    _lift,
    _make,
    gelu,
    layer_norm,
    matmul,
    max_,
    mean,
    reshape,
    sigmoid,
    silu,
    softmax,
    softplus,
    transpose,
)

__all__ = [
    "linear",
    "conv2d",
    "conv2d_stride2",
    "conv_transpose2d_stride2",
    "global_max_pool",
    "global_avg_pool",
    "avg_pool_patches",
    "patchify",
    "upsample_bilinear",
    "resize_bilinear",
    "bilinear_matrix",
    "attention",
    "silu",
    "sigmoid",
    "softplus",
    "gelu",
    "softmax",
    "layer_norm",
]


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is ``(Din, Dout)``."""
    x = _lift(x)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear expects trailing dim {weight.shape[0]}, got {x.shape}")
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, -1)), weight), (weight.shape[1],))
    else:
        y = matmul(x, weight)
    return y + bias if bias is not None else y


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # xp: (N, H+k-1, W+k-1, C) -> (N*H*W, k*k*C), column order (dy, dx, c)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N, H, W, C, k, k)
    n, c = xp.shape[0], xp.shape[3]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, k * k * c)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero 'same' padding.

    ``x`` is ``(N, H, W, Cin)`` (or unbatched), ``kernel`` is ``(k, k, Cin, Cout)``
    with odd ``k``.
    """
    x = _lift(x)
    if x.ndim == 3:
        return reshape(conv2d(reshape(x, (1,) + x.shape), kernel, bias), x.shape[:2] + (kernel.shape[3],))
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects (N,H,W,C) input and (k,k,Cin,Cout) kernel")
    k, k2, cin, cout = kernel.shape
    if k != k2:
        raise ValueError("conv2d kernel must be square")
    if k % 2 == 0:
        raise ValueError(f"conv2d kernel size must be odd, got {k}")
    if x.shape[3] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[3]}, kernel {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError("conv2d bias must have shape (Cout,)")
    n, h, w, _ = x.shape
    p = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = _im2col(xp, k, h, w)
    kmat = kernel.data.reshape(k * k * cin, cout)
    out = cols @ kmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, h, w, cout)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def grad_fn(g):
        g2 = g.reshape(n * h * w, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        if not x.requires_grad:  # typically the raw image
            return (None, gk) if bias is None else (None, gk, gb)
        gcols = (g2 @ kmat.T).reshape(n, h, w, k, k, cin)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for dy in range(k):
            for dx in range(k):
                gxp[:, dy : dy + h, dx : dx + w, :] += gcols[:, :, :, dy, dx, :]
        gx = gxp[:, p : p + h, p : p + w, :]
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _make(out, parents, grad_fn)


def patchify(x: Tensor, p: int) -> Tensor:
    """Space-to-depth: ``(N, H, W, C) -> (N, H/p, W/p, p*p*C)``."""
    n, h, w, c = x.shape
    if h % p or w % p:
        raise ValueError(f"patch size {p} must divide spatial size {h}x{w}")
    x = reshape(x, (n, h // p, p, w // p, p, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (n, h // p, w // p, p * p * c))


def conv2d_stride2(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """2x2 convolution with stride 2; ``weight`` is ``(4*Cin, Cout)``."""
    return linear(patchify(x, 2), weight, bias)


def conv_transpose2d_stride2(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """2x2 transposed convolution with stride 2; ``weight`` is ``(Cin, 4*Cout)``."""
    n, h, w, _ = x.shape
    cout = weight.shape[1] // 4
    y = reshape(linear(x, weight), (n, h, w, 2, 2, cout))
    y = reshape(transpose(y, (0, 1, 3, 2, 4, 5)), (n, 2 * h, 2 * w, cout))
    return y + bias if bias is not None else y


def _check_spatial(x: Tensor) -> None:
    if x.ndim < 3 or x.shape[-3] == 0 or x.shape[-2] == 0:
        raise ValueError(f"pooling needs a non-empty spatial extent, got {x.shape}")


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial max, ``(..., H, W, C) -> (..., 1, 1, C)``."""
    _check_spatial(x)
    return max_(x, axis=(-3, -2), keepdims=True)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, ``(..., H, W, C) -> (..., 1, 1, C)``."""
    _check_spatial(x)
    return mean(x, axis=(-3, -2), keepdims=True)


def avg_pool_patches(x: Tensor, p: int) -> Tensor:
    """Non-overlapping ``p x p`` mean pooling of ``(N, H, W, C)``."""
    n, h, w, c = x.shape
    if h % p or w % p:
        raise ValueError(f"patch size {p} must divide spatial size {h}x{w}")
    return mean(reshape(x, (n, h // p, p, w // p, p, c)), axis=(2, 4))


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic ``(n_out, n_in)`` interpolation matrix, half-pixel centres."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(mat, (np.arange(n_out), hi), frac)
    return mat.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of ``(N, H, W, C)`` (align-corners false)."""
    x = _lift(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    _, h, w, _ = x.shape
    if (h, w) == (out_h, out_w):
        out = x
    else:
        ry = Tensor(bilinear_matrix(h, out_h, x.dtype))
        rxt = Tensor(bilinear_matrix(w, out_w, x.dtype).T.copy())
        t = transpose(x, (0, 3, 1, 2))  # (N, C, H, W)
        t = matmul(matmul(ry, t), rxt)
        out = transpose(t, (0, 2, 3, 1))
    return reshape(out, out.shape[1:]) if squeeze else out


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Integer-factor bilinear upsampling of ``(N, H, W, C)`` or ``(H, W, C)``."""
    h, w = x.shape[-3], x.shape[-2]
    return resize_bilinear(x, h * factor, w * factor)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """Scaled dot-product attention on ``(B, T, D)`` inputs, split into heads."""
    b, tq, d = q.shape
    tk = k.shape[1]
    if d % heads:
        raise ValueError("width must be divisible by heads")
    hd = d // heads
    if heads == 1:
        scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(hd))
        return matmul(softmax(scores, axis=-1), v)
    qh = transpose(reshape(q, (b, tq, heads, hd)), (0, 2, 1, 3))
    kh = transpose(reshape(k, (b, tk, heads, hd)), (0, 2, 3, 1))
    vh = transpose(reshape(v, (b, tk, heads, hd)), (0, 2, 1, 3))
    att = softmax(matmul(qh, kh) * (1.0 / np.sqrt(hd)), axis=-1)
    out = matmul(att, vh)
    return reshape(transpose(out, (0, 2, 1, 3)), (b, tq, d))
