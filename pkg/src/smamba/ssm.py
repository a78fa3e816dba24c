"""Selective state-space scan and the gated Mamba layer.

Discretisation per channel ``e`` and state ``n``::

    abar_t = exp(delta_t[e] * A[e, n])
    h_t    = abar_t * h_{t-1} + delta_t[e] * B_t[n] * u_t[e]
    y_t[e] = sum_n C_t[n] * h_t[e, n] + D[e] * u_t[e]

with ``A = -exp(A_log)``, ``B_t = u_t W_B``, ``C_t = u_t W_C`` and
``delta_t = softplus(u_t W_delta + b_delta)``. B uses the Euler shortcut
``delta * B`` instead of the exact zero-order-hold integral.
"""
from __future__ import annotations

import numpy as np

from .functional import linear
from .module import Linear, Module, param
from .tensor import Tensor, _make, concat, exp, getitem, mul, reshape, silu, softplus

__all__ = [
    "scan_sequential",
    "scan_chunked",
    "selective_scan",
    "SsmParams",
    "MambaLayerParams",
    "ssm_scan_seq",
    "ssm_scan_chunked",
    "causal_depthwise_conv",
    "mamba_layer",
]


def _discretize(u, delta, A, B):
    a = np.exp(delta[..., None] * A)  # (Bt, L, E, N)
    b = delta[..., None] * B[:, :, None, :] * u[..., None]
    return a, b


def _readout(h, C, D, u):
    return (h * C[:, :, None, :]).sum(axis=-1) + D * u


def scan_sequential(u, delta, A, B, C, D):
    """Reference recurrence over ``(Bt, L, E)`` inputs; returns ``(y, h_all)``."""
    if u.shape[1] == 0:
        raise ValueError("selective scan needs L >= 1")
    a, b = _discretize(u, delta, A, B)
    hs = np.empty_like(a)
    h = np.zeros_like(a[:, 0])
    for t in range(u.shape[1]):
        h = a[:, t] * h + b[:, t]
        hs[:, t] = h
    return _readout(hs, C, D, u), hs


def scan_chunked(u, delta, A, B, C, D, chunk: int):
    """Two-level scan: independent in-chunk recurrences, then a carry pass.

    Chunks are processed together, so the Python loop runs ``chunk + L/chunk``
    times instead of ``L``.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    bt, L, E = u.shape
    if L == 0:
        raise ValueError("selective scan needs L >= 1")
    a, b = _discretize(u, delta, A, B)
    nc = -(-L // chunk)
    pad = nc * chunk - L
    if pad:
        a = np.concatenate([a, np.ones((bt, pad) + a.shape[2:], a.dtype)], axis=1)
        b = np.concatenate([b, np.zeros((bt, pad) + b.shape[2:], b.dtype)], axis=1)
    N = A.shape[1]
    a = a.reshape(bt, nc, chunk, E, N)
    b = b.reshape(bt, nc, chunk, E, N)
    local = np.empty_like(a)
    decay = np.empty_like(a)
    hl = np.zeros((bt, nc, E, N), a.dtype)
    prod = np.ones((bt, nc, E, N), a.dtype)
    for j in range(chunk):
        hl = a[:, :, j] * hl + b[:, :, j]
        prod = a[:, :, j] * prod
        local[:, :, j] = hl
        decay[:, :, j] = prod
    carry_in = np.empty((bt, nc, E, N), a.dtype)
    carry = np.zeros((bt, E, N), a.dtype)
    for c in range(nc):
        carry_in[:, c] = carry
        carry = local[:, c, -1] + decay[:, c, -1] * carry
    hs = local + decay * carry_in[:, :, None]
    hs = hs.reshape(bt, nc * chunk, E, N)[:, :L]
    return _readout(hs, C, D, u), hs


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor, chunk: int | None = None) -> Tensor:
    """Differentiable scan on ``(Bt, L, E)``; the adjoint runs the recurrence in reverse."""
    ud, dd, Ad, Bd, Cd, Dd = u.data, delta.data, A.data, B.data, C.data, D.data
    if chunk is None:
        y, hs = scan_sequential(ud, dd, Ad, Bd, Cd, Dd)
    else:
        y, hs = scan_chunked(ud, dd, Ad, Bd, Cd, Dd, chunk)

    def grad_fn(gy):
        a = np.exp(dd[..., None] * Ad)
        L = ud.shape[1]
        gh_all = np.empty_like(hs)
        gh = np.zeros_like(hs[:, 0])
        for t in range(L - 1, -1, -1):
            gh = gy[:, t, :, None] * Cd[:, t, None, :] + gh
            gh_all[:, t] = gh
            gh = a[:, t] * gh
        h_prev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
        ga = gh_all * h_prev * a
        gdelta = (ga * Ad).sum(axis=-1)
        gA = (ga * dd[..., None]).sum(axis=(0, 1))
        bu = Bd[:, :, None, :] * ud[..., None]
        gdelta = gdelta + (gh_all * bu).sum(axis=-1)
        gB = (gh_all * (dd * ud)[..., None]).sum(axis=2)
        gu = (gh_all * dd[..., None] * Bd[:, :, None, :]).sum(axis=-1) + gy * Dd
        gC = (gy[..., None] * hs).sum(axis=2)
        gD = (gy * ud).sum(axis=(0, 1))
        return gu, gdelta, gA, gB, gC, gD

    return _make(y, (u, delta, A, B, C, D), grad_fn)


class SsmParams(Module):
    """Selective SSM parameters for ``E`` channels and ``N`` states."""

    def __init__(self, rng: np.random.Generator, E: int, N: int = 16, dt_min: float = 0.01, dt_max: float = 0.1):
        self.A_log = param(np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (E, 1)))
        scale = 1.0 / np.sqrt(E)
        self.W_B = param(rng.normal(0.0, scale, (E, N)))
        self.W_C = param(rng.normal(0.0, scale, (E, N)))
        self.W_delta = param(rng.normal(0.0, scale * 0.1, (E, E)))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), E))
        self.b_delta = param(dt + np.log(-np.expm1(-dt)))  # softplus^-1
        self.D = param(np.ones(E))

    @property
    def E(self) -> int:
        return self.A_log.shape[0]

    def projections(self, u: Tensor):
        A = mul(exp(self.A_log), -1.0)
        B = linear(u, self.W_B)
        C = linear(u, self.W_C)
        delta = softplus(linear(u, self.W_delta, self.b_delta))
        return A, B, C, delta


def _batched(u: Tensor) -> tuple[Tensor, bool]:
    if u.ndim == 2:
        return reshape(u, (1,) + u.shape), True
    return u, False


def ssm_scan_seq(u: Tensor, params: SsmParams) -> Tensor:
    """SSM over ``(L, E)`` or ``(Bt, L, E)`` with the sequential recurrence."""
    return ssm_scan_chunked(u, params, None)


def ssm_scan_chunked(u: Tensor, params: SsmParams, chunk: int | None) -> Tensor:
    u, squeeze = _batched(u)
    if u.shape[1] < 1:
        raise ValueError("selective scan needs L >= 1")
    A, B, C, delta = params.projections(u)
    y = selective_scan(u, delta, A, B, C, params.D, chunk)
    return reshape(y, y.shape[1:]) if squeeze else y


class MambaLayerParams(Module):
    """``phi_in`` (shared by both branches), causal depthwise conv, SSM, ``phi_out``."""

    def __init__(self, rng: np.random.Generator, d_model: int, expand: int = 2, n_state: int = 16, conv_width: int = 4):
        E = expand * d_model
        self.phi_in = Linear(rng, d_model, E)
        bound = 1.0 / np.sqrt(conv_width)
        self.conv_w = param(rng.uniform(-bound, bound, (conv_width, E)))
        self.conv_b = param(np.zeros(E))
        self.ssm = SsmParams(rng, E, n_state)
        self.phi_out = Linear(rng, E, d_model)


def causal_depthwise_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 1-D conv over axis 1 of ``(Bt, L, E)``, left-padded to keep length."""
    bt, L, E = x.shape
    w = weight.shape[0]
    xp = concat([Tensor(np.zeros((bt, w - 1, E), x.dtype)), x], axis=1) if w > 1 else x
    out = None
    for j in range(w):
        term = getitem(xp, (slice(None), slice(j, j + L))) * getitem(weight, j)
        out = term if out is None else out + term
    return out + bias


def mamba_layer(x: Tensor, params: MambaLayerParams, chunk: int | None = None) -> Tensor:
    """``phi_out(SSM(silu(conv(phi_in(x)))) * silu(phi_in(x)))`` on ``(L, D)`` or ``(Bt, L, D)``."""
    x, squeeze = _batched(x)
    if x.shape[1] < 1:
        raise ValueError("mamba layer needs L >= 1")
    z = params.phi_in(x)
    u = silu(causal_depthwise_conv(z, params.conv_w, params.conv_b))
    y = ssm_scan_chunked(u, params.ssm, chunk)
    out = params.phi_out(y * silu(z))
    return reshape(out, out.shape[1:]) if squeeze else out
