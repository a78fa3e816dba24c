"""Minimal parameter containers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .functional import linear
from .tensor import Parameter, get_default_dtype


class Module:
    """Collects :class:`Parameter` attributes and child modules by attribute name."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{prefix}{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self


def param(data) -> Parameter:
    return Parameter(np.asarray(data, dtype=get_default_dtype()))


def normal(rng: np.random.Generator, shape, std: float) -> Parameter:
    return param(rng.normal(0.0, std, size=shape))


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Parameter:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)))


def zeros_param(shape) -> Parameter:
    return param(np.zeros(shape))


def ones_param(shape) -> Parameter:
    return param(np.ones(shape))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, din: int, dout: int, bias: bool = True, zero: bool = False):
        self.weight = zeros_param((din, dout)) if zero else xavier(rng, din, dout)
        self.bias = zeros_param((dout,)) if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)
