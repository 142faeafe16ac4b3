"""Minimal module system: named parameters, buffers, train/eval mode."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .rng import key_rng
from .tensor import Parameter, Tensor, get_dtype


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal samples redrawn outside two standard deviations.

    ``std`` is the target standard deviation of the truncated distribution.
    """
    # std of a unit normal truncated to [-2, 2]
    scale = std / 0.87962566103423978
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * scale


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Base class; parameters, buffers and submodules are discovered from attributes."""

    _buffer_names: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        """Initialize this module's own parameters (not its children's)."""

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mod_name, module in self.named_modules(prefix):
            for name, value in vars(module).items():
                if isinstance(value, Parameter):
                    yield (f"{mod_name}.{name}" if mod_name else name), value

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, module in self.named_modules(prefix):
            for name in module._buffer_names:
                yield (f"{mod_name}.{name}" if mod_name else name), getattr(module, name)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def initialize(self, seed: int) -> "Module":
        """Re-initialize every parameter from streams keyed by module name."""
        for name, module in self.named_modules():
            module.reset_parameters(key_rng(seed, "init:" + name))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name in list(params) + list(buffers):
            if name not in state:
                raise KeyError(name)
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: expected {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)
        for name, buf in buffers.items():
            value = np.asarray(state[name])
            if value.shape != buf.shape:
                raise ValueError(f"shape mismatch for {name}: expected {buf.shape}, got {value.shape}")
            buf[...] = value


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1, bias: bool = False):
        super().__init__()
        self.stride = stride
        self.weight = Parameter(np.zeros((out_channels, in_channels, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def reset_parameters(self, rng):
        c_out, _, kh, kw = self.weight.shape
        self.weight.data = truncated_normal(rng, self.weight.shape, np.sqrt(2.0 / (c_out * kh * kw))).astype(get_dtype())
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding="same")


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel: int, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.weight = Parameter(np.zeros((channels, 1, kernel, kernel)))

    def reset_parameters(self, rng):
        _, _, kh, kw = self.weight.shape
        self.weight.data = truncated_normal(rng, self.weight.shape, np.sqrt(2.0 / (kh * kw))).astype(get_dtype())

    def forward(self, x: Tensor) -> Tensor:
        return F.depthwise_conv2d(x, self.weight, stride=self.stride, padding="same")


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, zero_init: bool = False):
        super().__init__()
        self.zero_init = zero_init
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=get_dtype())
        self.running_var = np.ones(channels, dtype=get_dtype())

    def reset_parameters(self, rng):
        fill = 0.0 if self.zero_init else 1.0
        self.gamma.data = np.full_like(self.gamma.data, fill)
        self.beta.data = np.zeros_like(self.beta.data)
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.weight = Parameter(np.zeros((in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def reset_parameters(self, rng):
        fan_in, fan_out = self.weight.shape
        self.weight.data = glorot_uniform(rng, fan_in, fan_out, self.weight.shape).astype(get_dtype())
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)
