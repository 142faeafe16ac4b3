"""EfficientNet-style feature extractors built from MBConv, Fused-MBConv and SE blocks."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from . import functional as F
from .nn import BatchNorm2d, Conv2d, DepthwiseConv2d, Module
from .tensor import Tensor

BLOCK_KINDS = ("mbconv", "fused_mbconv")
PRESETS = ("micro", "b0", "v2b0")


class ConfigError(ValueError):
    """Invalid backbone or model configuration."""


@dataclass(frozen=True)
class StageSpec:
    block_kind: str
    expansion_ratio: float
    out_channels: int
    num_repeats: int
    stride: int = 1
    kernel: int = 3
    se_ratio: float = 0.0

    def validate(self) -> None:
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.block_kind!r}; expected one of {BLOCK_KINDS}")
        if self.expansion_ratio <= 0:
            raise ConfigError("expansion_ratio must be positive")
        if self.out_channels < 1 or self.num_repeats < 1:
            raise ConfigError("out_channels and num_repeats must be positive")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.kernel not in (3, 5):
            raise ConfigError(f"kernel must be 3 or 5, got {self.kernel}")
        if not 0.0 <= self.se_ratio <= 1.0:
            raise ConfigError(f"se_ratio must lie in [0, 1], got {self.se_ratio}")


@dataclass(frozen=True)
class BackboneConfig:
    name: str
    stem_channels: int
    stages: tuple[StageSpec, ...]
    head_channels: int
    input_resolution: int
    in_channels: int = 1

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError(f"backbone {self.name!r} has no stages")
        for stage in self.stages:
            stage.validate()
        if self.head_channels < self.stages[-1].out_channels:
            raise ConfigError("head_channels must be >= the last stage's out_channels")
        if self.stem_channels < 1 or self.in_channels < 1:
            raise ConfigError("stem_channels and in_channels must be positive")
        if self.input_resolution % self.total_stride:
            raise ConfigError(
                f"input_resolution {self.input_resolution} is not divisible by total stride {self.total_stride}"
            )

    @property
    def total_stride(self) -> int:
        return 2 * int(np.prod([s.stride for s in self.stages]))

    @property
    def feature_resolution(self) -> int:
        return self.input_resolution // self.total_stride

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        return cls(**d)

    def replace(self, **changes) -> "BackboneConfig":
        return dataclasses.replace(self, **changes)


_STAGE_KEYS = {"e": "expansion_ratio", "c": "out_channels", "r": "num_repeats", "s": "stride", "k": "kernel", "se": "se_ratio"}


def parse_stage(text: str) -> StageSpec:
    """Parse ``"mbconv e=6 c=24 r=2 s=2 k=3 se=0.25"``."""
    parts = text.split()
    if not parts:
        raise ConfigError("empty stage line")
    kind, values = parts[0], {}
    for item in parts[1:]:
        key, sep, value = item.partition("=")
        if not sep or key not in _STAGE_KEYS:
            raise ConfigError(f"bad stage field {item!r}; expected one of {sorted(_STAGE_KEYS)}")
        field_name = _STAGE_KEYS[key]
        if field_name in ("expansion_ratio", "se_ratio"):
            values[field_name] = float(Fraction(value))
        else:
            values[field_name] = int(value)
    spec = StageSpec(block_kind=kind, **values)
    spec.validate()
    return spec


def parse_backbone_config(text: str, source: str = "<string>") -> BackboneConfig:
    fields: dict = {}
    stages = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        try:
            if key == "stage":
                stages.append(parse_stage(value))
            elif key == "name":
                fields["name"] = value
            elif key in ("stem_channels", "head_channels", "input_resolution", "in_channels"):
                fields[key] = int(value)
            else:
                raise ConfigError(f"unknown backbone key {key!r}")
        except (ConfigError, ValueError) as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    missing = {"name", "stem_channels", "head_channels", "input_resolution"} - set(fields)
    if missing:
        raise ConfigError(f"{source}: missing keys {sorted(missing)}")
    config = BackboneConfig(stages=tuple(stages), **fields)
    config.validate()
    return config


def load_backbone_config(name_or_path: str) -> BackboneConfig:
    """Load a shipped preset (``micro``, ``b0``, ``v2b0``) or a config file path."""
    if name_or_path in PRESETS:
        text = resources.files("fetalplane.configs").joinpath(f"backbone_{name_or_path}.cfg").read_text()
        return parse_backbone_config(text, source=name_or_path)
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(f"unknown backbone {name_or_path!r}: not a preset {PRESETS} and no such file")
    return parse_backbone_config(path.read_text(), source=str(path))


# -- blocks ----------------------------------------------------------------


def se_block(x: Tensor, reduce_w: Tensor, reduce_b: Tensor, expand_w: Tensor, expand_b: Tensor) -> Tensor:
    """Squeeze-and-excitation: ``x * sigmoid(W2 silu(W1 gap(x) + b1) + b2)`` per channel.

    ``reduce_w`` is ``[C, S]`` and ``expand_w`` is ``[S, C]``.
    """
    squeezed = F.global_avg_pool2d(x)
    hidden = F.silu(F.linear(squeezed, reduce_w, reduce_b))
    gate = F.sigmoid(F.linear(hidden, expand_w, expand_b))
    B, C = gate.shape
    return x * gate.reshape(B, C, 1, 1)


class SqueezeExcite(Module):
    def __init__(self, channels: int, squeeze_channels: int):
        super().__init__()
        if squeeze_channels < 1:
            raise ConfigError("squeeze width must be at least 1")
        # stored as 1x1 conv kernels so pretrained weights map one to one
        self.reduce = Conv2d(channels, squeeze_channels, 1, bias=True)
        self.expand = Conv2d(squeeze_channels, channels, 1, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        C, S = self.expand.weight.shape[:2]
        return se_block(
            x,
            self.reduce.weight.reshape(S, C).T,
            self.reduce.bias,
            self.expand.weight.reshape(C, S).T,
            self.expand.bias,
        )


class MBConv(Module):
    """Inverted bottleneck: expand 1x1, depthwise kxk, SE, project 1x1."""

    def __init__(self, in_channels: int, out_channels: int, expansion: float, kernel: int, stride: int,
                 se_ratio: float, zero_init_residual: bool = True):
        super().__init__()
        self.stride = stride
        self.residual = stride == 1 and in_channels == out_channels
        inner = int(round(in_channels * expansion))
        self.inner_channels = inner
        if expansion != 1:
            self.expand_conv = Conv2d(in_channels, inner, 1)
            self.expand_bn = BatchNorm2d(inner)
        else:
            self.expand_conv = None
            self.expand_bn = None
        self.dw_conv = DepthwiseConv2d(inner, kernel, stride)
        self.dw_bn = BatchNorm2d(inner)
        squeeze = max(1, int(in_channels * se_ratio))
        self.se = SqueezeExcite(inner, squeeze) if se_ratio > 0 else None
        self.project_conv = Conv2d(inner, out_channels, 1)
        self.project_bn = BatchNorm2d(out_channels, zero_init=zero_init_residual and self.residual)
        self.last_expanded: Tensor | None = None

    def forward(self, x: Tensor) -> Tensor:
        h = x
        if self.expand_conv is not None:
            h = F.silu(self.expand_bn(self.expand_conv(h)))
        self.last_expanded = h
        h = F.silu(self.dw_bn(self.dw_conv(h)))
        if self.se is not None:
            h = self.se(h)
        h = self.project_bn(self.project_conv(h))
        return x + h if self.residual else h


class FusedMBConv(Module):
    """Fused inverted bottleneck: one kxk conv replaces expand + depthwise.

    With expansion 1 the kxk conv maps straight to the output width and is
    followed by the activation; there is no separate projection.
    """

    def __init__(self, in_channels: int, out_channels: int, expansion: float, kernel: int, stride: int,
                 se_ratio: float, zero_init_residual: bool = True):
        super().__init__()
        self.stride = stride
        self.residual = stride == 1 and in_channels == out_channels
        zero_last = zero_init_residual and self.residual
        inner = int(round(in_channels * expansion))
        self.inner_channels = inner
        squeeze = max(1, int(in_channels * se_ratio))
        if expansion != 1:
            self.fused_conv = Conv2d(in_channels, inner, kernel, stride)
            self.fused_bn = BatchNorm2d(inner)
            self.se = SqueezeExcite(inner, squeeze) if se_ratio > 0 else None
            self.project_conv = Conv2d(inner, out_channels, 1)
            self.project_bn = BatchNorm2d(out_channels, zero_init=zero_last)
        else:
            self.inner_channels = out_channels
            self.fused_conv = Conv2d(in_channels, out_channels, kernel, stride)
            self.fused_bn = BatchNorm2d(out_channels, zero_init=zero_last)
            self.se = SqueezeExcite(out_channels, squeeze) if se_ratio > 0 else None
            self.project_conv = None
            self.project_bn = None
        self.last_expanded: Tensor | None = None

    def forward(self, x: Tensor) -> Tensor:
        h = F.silu(self.fused_bn(self.fused_conv(x)))
        self.last_expanded = h
        if self.se is not None:
            h = self.se(h)
        if self.project_conv is not None:
            h = self.project_bn(self.project_conv(h))
        return x + h if self.residual else h


def mbconv_block(x: Tensor, block: MBConv) -> Tensor:
    return block(x)


def fused_mbconv_block(x: Tensor, block: FusedMBConv) -> Tensor:
    return block(x)


class ConvBNAct(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel, stride)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return F.silu(self.bn(self.conv(x)))


class Backbone(Module):
    """Stem, stacked stages, and a 1x1 head conv producing the final feature map."""

    def __init__(self, config: BackboneConfig, zero_init_residual: bool = True):
        super().__init__()
        config.validate()
        self.config = config
        self.stem = ConvBNAct(config.in_channels, config.stem_channels, 3, 2)
        blocks = []
        channels = config.stem_channels
        for stage in config.stages:
            cls = MBConv if stage.block_kind == "mbconv" else FusedMBConv
            for i in range(stage.num_repeats):
                blocks.append(
                    cls(channels, stage.out_channels, stage.expansion_ratio, stage.kernel,
                        stage.stride if i == 0 else 1, stage.se_ratio, zero_init_residual)
                )
                channels = stage.out_channels
        self.blocks = blocks
        self.head = ConvBNAct(channels, config.head_channels, 1)

    @property
    def units(self) -> list[Module]:
        return [self.stem, *self.blocks, self.head]

    def forward(self, x: Tensor) -> Tensor:
        return forward_features(self, x)


def build_backbone(config: BackboneConfig, seed: int = 0, zero_init_residual: bool = True) -> Backbone:
    """Allocate and initialize a backbone; raises :class:`ConfigError` on bad configs."""
    return Backbone(config, zero_init_residual=zero_init_residual).initialize(seed)


def forward_features(backbone: Backbone, x: Tensor) -> Tensor:
    """Final convolutional feature map ``[B, head_channels, H/stride, W/stride]`` (pre-pooling)."""
    cfg = backbone.config
    if x.ndim != 4:
        raise ValueError(f"expected [B, C, H, W] input, got shape {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ValueError(f"backbone {cfg.name!r} expects {cfg.in_channels} input channels, got {x.shape[1]}")
    H, W = x.shape[2:]
    if H % cfg.total_stride or W % cfg.total_stride:
        raise ValueError(f"input {H}x{W} is not divisible by total stride {cfg.total_stride}")
    h = backbone.stem(x)
    for block in backbone.blocks:
        h = block(h)
    return backbone.head(h)
