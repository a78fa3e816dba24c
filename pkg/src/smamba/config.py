"""Configuration records and the ``key = value`` run-config text format.

A run config has three sections, ``[model]``, ``[train]`` and ``[data]``,
whose keys mirror the fields of :class:`ModelConfig`, :class:`TrainConfig`
and :class:`GenSpec`. ``#`` starts a comment. Unknown sections or keys are
rejected with :class:`ConfigError`.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field

__all__ = [
    "ConfigError",
    "ModelConfig",
    "TrainConfig",
    "GenSpec",
    "RunConfig",
    "ABLATIONS",
    "apply_ablation",
    "parse_run_config",
    "serialize_run_config",
    "load_run_config",
    "tiny_model_config",
]


class ConfigError(ValueError):
    """Invalid configuration text or value."""


@dataclass(frozen=True)
class ModelConfig:
    kernels: tuple[int, ...] = (7, 5, 3)  # pyramid order, coarse first
    c0: int = 16
    use_msd: bool = True
    use_mamba: bool = True
    mamba_expand: int = 2
    mamba_state: int = 16
    mamba_conv: int = 4
    scan_chunk: int = 0  # 0 selects the sequential scan
    patch: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    inject_at: str = "all"
    adapter_rank: int = 16
    decoder_depth: int = 2
    stop_grad_prompt: bool = True
    backbone_seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        if self.dim % 8:
            raise ConfigError("dim must be a multiple of 8")
        if self.patch < 4 or self.patch & (self.patch - 1):
            raise ConfigError("patch must be a power of two >= 4")
        if not self.kernels or any(k % 2 == 0 or k < 1 for k in self.kernels):
            raise ConfigError("kernels must be odd positive sizes")
        if (3 * self.c0) % len(self.kernels):
            raise ConfigError("3*c0 must be divisible by the number of kernels")
        self.injection_points()

    def injection_points(self) -> tuple[int, ...]:
        spec = self.inject_at.strip().lower()
        if spec == "all":
            return tuple(range(self.depth))
        if spec in ("none", ""):
            return ()
        try:
            points = tuple(sorted({int(s) for s in spec.split(",")}))
        except ValueError as exc:
            raise ConfigError(f"bad inject_at {self.inject_at!r}") from exc
        if any(p < 0 or p >= self.depth for p in points):
            raise ConfigError(f"inject_at {self.inject_at!r} outside depth {self.depth}")
        return points

    @property
    def prior_channels(self) -> int:
        return 6 * self.c0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs_stage1: int = 60
    epochs_stage2: int = 140
    batch: int = 4
    seed: int = 0
    stage2_aux_sup: bool = False
    input_size: int = 64
    scales: tuple[float, ...] = (0.75, 1.0, 1.25)
    precision: str = "32"
    loss_kernel: int = 0  # 0 picks the size-scaled default
    loss_gain: float = 5.0
    loss_smooth: float = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.precision not in ("32", "64"):
            raise ConfigError("precision must be 32 or 64")


@dataclass(frozen=True)
class GenSpec:
    n: int = 200
    size: int = 64
    split: str = "train"
    contrast: float = 0.08
    blur_sigma: float = 1.0
    texture_amp: float = 0.06
    secondary_prob: float = 0.3
    max_secondary: int = 2

    def __post_init__(self):
        if not self.contrast > 0:
            raise ConfigError("contrast must be > 0")
        if self.size < 32:
            raise ConfigError("size must be >= 32")
        if self.n < 0:
            raise ConfigError("n must be >= 0")
        if self.split not in ("train", "test-seen", "test-unseen"):
            raise ConfigError(f"unknown split {self.split!r}")

    @property
    def family(self) -> str:
        return "unseen" if self.split == "test-unseen" else "seen"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: GenSpec = field(default_factory=GenSpec)


ABLATIONS = {
    "adapter": dict(use_msd=False, use_mamba=False),
    "msd": dict(use_msd=True, use_mamba=False, kernels=(7, 5, 3)),
    "multi": dict(use_msd=True, use_mamba=False, kernels=(7, 5, 3)),
    "full": dict(use_msd=True, use_mamba=True, kernels=(7, 5, 3)),
    "uni3": dict(use_msd=True, use_mamba=True, kernels=(3,)),
    "uni5": dict(use_msd=True, use_mamba=True, kernels=(5,)),
    "uni7": dict(use_msd=True, use_mamba=True, kernels=(7,)),
}


def apply_ablation(cfg: ModelConfig, name: str) -> ModelConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}")
    return dataclasses.replace(cfg, **ABLATIONS[name])


def tiny_model_config(**overrides) -> ModelConfig:
    """The 16x16-input verification configuration."""
    base = dict(c0=2, dim=8, depth=1, heads=2, adapter_rank=4, decoder_depth=1, mamba_state=4, patch=8)
    base.update(overrides)
    return ModelConfig(**base)


# --- text format -------------------------------------------------------------

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": GenSpec}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, typ, key: str):
    text = text.strip()
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text, 0)
        if typ is float:
            return float(text)
        if typ is str:
            return text
        if origin is tuple:
            inner = typing.get_args(typ)[0]
            return tuple(_parse_value(part, inner, key) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    raise ConfigError(f"unsupported field type for {key}")


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def parse_run_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(
        interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",), delimiters=("=",)
    )
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    if parser.defaults():
        raise ConfigError(f"unknown key(s) in DEFAULT section: {sorted(parser.defaults())}")
    parts = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cls = _SECTIONS[section]
        types = _field_types(cls)
        values = {}
        for key, raw in parser.items(section):
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _parse_value(raw, types[key], key)
        try:
            parts[section] = cls(**values)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    return RunConfig(**parts)


def serialize_run_config(cfg: RunConfig) -> str:
    lines = []
    for section, cls in _SECTIONS.items():
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in dataclasses.fields(cls):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read())
