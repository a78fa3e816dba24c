"""Finite-difference gradient suites for the model's building blocks (tiny config, 64-bit)."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import tiny_model_config
from .gradcheck import gradcheck
from .losses import LossConfig, combined_loss, stage1_loss, stage2_loss
from .model import SamMamba, model_forward, normalize_image
from .prior import mamba_prior_forward
from .tensor import Parameter, Tensor, default_dtype

__all__ = ["GRADCHECK_TOL", "MODULES", "GradcheckResult", "randomize_for_gradcheck", "run_gradcheck"]

GRADCHECK_TOL = 1e-4
# Central differences are evaluated in extended precision; analytic gradients stay 64-bit.
REFERENCE_DTYPE = np.longdouble
MODULES = ("prior", "encoder", "decoder", "loss")


@dataclass
class GradcheckResult:
    module: str
    max_rel_error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < GRADCHECK_TOL


def randomize_for_gradcheck(model: SamMamba, seed: int = 0) -> None:
    """Move trainable parameters off their special initial values.

    At initialization the gates, heads and the last hypernetwork layer are
    zero and the SSM step sizes are tiny, which leaves many gradients at the
    1e-11 level where central differences measure only rounding noise. The
    check is run at a moderately scaled point instead.
    """
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if name.endswith("b_delta"):
            p.data = rng.uniform(-0.5, 0.5, p.shape)
        elif name.endswith("A_log"):
            p.data = rng.uniform(-1.0, 0.5, p.shape)
        elif name.endswith(("W_B", "W_C", ".D")):
            p.data = rng.normal(0.0, 1.0, p.shape)
        elif "gamma" in name or name.startswith("head") or name.endswith("bias") or "hyper.2" in name:
            p.data = rng.normal(0.0, 0.5, p.shape)


def _fixture(seed: int):
    cfg = tiny_model_config(stop_grad_prompt=False)
    model = SamMamba(cfg, seed=seed)
    randomize_for_gradcheck(model, seed + 1)
    rng = np.random.default_rng(seed + 2)
    image = rng.uniform(size=(1, 16, 16, 3))
    mask = np.zeros((1, 16, 16))
    mask[:, 4:12, 5:11] = 1.0
    return model, image, mask


def _reference(model: SamMamba) -> dict:
    return dict(reference_dtype=REFERENCE_DTYPE, promote=model.parameters())


def _trainable(module) -> list[Parameter]:
    return [p for p in module.parameters() if p.requires_grad]


def _check_prior(seed: int, max_coords: int) -> float:
    model, _, _ = _fixture(seed)
    rng = np.random.default_rng(seed + 3)
    image = normalize_image(rng.uniform(size=(1, 8, 8, 3)))
    probe = Tensor(rng.normal(size=(1, 8, 8, model.cfg.prior_channels)))
    return gradcheck(
        lambda: (mamba_prior_forward(image, model.prior) * probe).sum(),
        _trainable(model.prior),
        max_coords=max_coords,
        seed=seed,
        **_reference(model),
    )


def _check_encoder(seed: int, max_coords: int) -> float:
    model, image, mask = _fixture(seed)
    lc = LossConfig(kernel=5)
    params = _trainable(model.prior) + _trainable(model.adapter) + _trainable(model.head)
    return gradcheck(
        lambda: stage1_loss(mask, model_forward(image, model, run_decoder=False).pseudo_mask_logits, lc),
        params,
        max_coords=max_coords,
        seed=seed,
        **_reference(model),
    )


def _check_decoder(seed: int, max_coords: int) -> float:
    model, image, mask = _fixture(seed)
    lc = LossConfig(kernel=5)
    return gradcheck(
        lambda: stage2_loss(mask, model_forward(image, model).decoder_logits, cfg=lc),
        _trainable(model),
        max_coords=max_coords,
        seed=seed,
        **_reference(model),
    )


def _check_loss(seed: int, max_coords: int) -> float:
    rng = np.random.default_rng(seed)
    logits = Parameter(rng.normal(0.0, 2.0, (2, 12, 12)))
    mask = (rng.uniform(size=(2, 12, 12)) < 0.4).astype(float)
    return gradcheck(
        lambda: combined_loss(logits, mask, LossConfig(kernel=5)),
        [logits],
        max_coords=max_coords,
        seed=seed,
        reference_dtype=REFERENCE_DTYPE,
    )


_CHECKS = {"prior": _check_prior, "encoder": _check_encoder, "decoder": _check_decoder, "loss": _check_loss}


def run_gradcheck(modules=MODULES, seed: int = 0, max_coords: int = 12) -> list[GradcheckResult]:
    """Run the selected suites in 64-bit mode and time each one."""
    results = []
    with default_dtype(np.float64):
        for name in modules:
            if name not in _CHECKS:
                raise ValueError(f"unknown gradcheck module {name!r}")
            start = time.perf_counter()
            err = _CHECKS[name](seed, max_coords)
            results.append(GradcheckResult(name, err, time.perf_counter() - start))
    return results
