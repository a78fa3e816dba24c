"""The full segmentation model: prior, adapted frozen encoder, pseudo-mask head, decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .decoder import MaskDecoder, decode, encode_mask_prompt
from .encoder import (
    AdapterStack,
    EncoderOutput,
    VitBackbone,
    adapter_inject,
    encoder_mask_head,
    patch_embed,
    prior_tokenize,
    vit_block,
)
from .module import Linear, Module
from .prior import MambaPrior, mamba_prior_forward
from .tensor import Tensor, get_default_dtype, reshape

__all__ = ["SamMamba", "ModelOutput", "normalize_image", "encoder_forward", "model_forward", "param_group"]

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def normalize_image(image) -> Tensor:
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4 or data.shape[-1] != 3:
        raise ValueError(f"expected (N, H, W, 3) image, got {data.shape}")
    return Tensor(((data - PIXEL_MEAN) / PIXEL_STD).astype(get_default_dtype()))


class SamMamba(Module):
    """All parameters of the model.

    Parameter names start with their group: ``prior.``, ``backbone.``,
    ``adapter.``, ``head.`` or ``decoder.``. The backbone is built from its
    own seed so that every config sharing ``backbone_seed`` sees the same
    frozen weights.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.prior = MambaPrior(rng, cfg)
        self.backbone = VitBackbone(np.random.default_rng(cfg.backbone_seed), cfg)
        self.adapter = AdapterStack(rng, cfg)
        self.head = Linear(rng, cfg.dim, 1, zero=True)
        self.decoder = MaskDecoder(rng, cfg)

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            out.setdefault(param_group(name), []).append(name)
        return out


def param_group(name: str) -> str:
    return name.split(".", 1)[0]


def encoder_forward(image: Tensor, model: SamMamba, use_prior: bool = True) -> EncoderOutput:
    """Normalized image ``(N, H, W, 3)`` to embeddings and pseudo-mask logits.

    With ``use_prior=False`` the adapters are skipped and the output is the
    plain frozen backbone (plus the head).
    """
    cfg = model.cfg
    n, h, w, _ = image.shape
    p = cfg.patch
    if h % p or w % p:
        raise ValueError(f"patch {p} must divide image size {h}x{w}")
    tokens = patch_embed(image, model.backbone)
    prior_map = None
    prior_tokens = None
    if use_prior and model.adapter.points:
        prior_map = mamba_prior_forward(image, model.prior)
        prior_tokens = prior_tokenize(prior_map, p, model.adapter.prior_proj)
    slots = {point: i for i, point in enumerate(model.adapter.points)}
    for depth, block in enumerate(model.backbone.blocks):
        if prior_tokens is not None and depth in slots:
            tokens, prior_tokens = adapter_inject(tokens, prior_tokens, model.adapter.blocks[slots[depth]])
        tokens = vit_block(tokens, block, model.backbone.heads)
    emb = reshape(tokens, (n, h // p, w // p, cfg.dim))
    return EncoderOutput(emb, encoder_mask_head(emb, model.head, p), prior_map)


@dataclass
class ModelOutput:
    encoder: EncoderOutput
    decoder_logits: Tensor | None

    @property
    def pseudo_mask_logits(self) -> Tensor:
        return self.encoder.pseudo_mask_logits


def model_forward(image, model: SamMamba, run_decoder: bool = True) -> ModelOutput:
    """Raw ``[0, 1]`` image(s) through the encoder and, optionally, the decoder."""
    x = normalize_image(image)
    enc = encoder_forward(x, model)
    if not run_decoder:
        return ModelOutput(enc, None)
    pseudo = enc.pseudo_mask_logits
    if model.cfg.stop_grad_prompt:
        pseudo = pseudo.detach()
    prompt = encode_mask_prompt(pseudo, model.decoder.prompt, x.shape[1:3])
    return ModelOutput(enc, decode(enc.embeddings, prompt, model.decoder))
