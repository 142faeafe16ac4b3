"""Full classifier: backbone, optional attention, pooling and a 3-layer MLP head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .metrics import topk_indices
from .attention import VARIANTS, attach_attention, make_attention
from .backbone import Backbone, BackboneConfig, ConfigError, forward_features, load_backbone_config
from .nn import Linear, Module
from .rng import key_rng
from .tensor import Tensor, no_grad


@dataclass
class ModelConfig:
    backbone: str = "micro"
    attention: str = "ssa"
    mha_heads: int = 4
    attn_dim: int | None = None
    mlp_hidden: tuple[int, int] = (256, 128)
    num_classes: int = 6
    dropout_p: float = 0.1
    dropout_layers: int = 2
    freeze_prefix: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if len(self.mlp_hidden) != 2 or min(self.mlp_hidden) < 1:
            raise ConfigError("mlp_hidden must be two positive widths")
        if self.attention not in VARIANTS:
            raise ConfigError(f"attention must be one of {VARIANTS}, got {self.attention!r}")
        if self.mha_heads < 1:
            raise ConfigError("mha_heads must be positive")
        if self.attn_dim is not None and self.attn_dim < 1:
            raise ConfigError("attn_dim must be positive")
        if self.dropout_layers not in (1, 2):
            raise ConfigError("dropout_layers must be 1 or 2")
        if self.freeze_prefix < 0:
            raise ConfigError("freeze_prefix must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d


class MLPHead(Module):
    """affine -> silu -> dropout, twice, then the output affine (logits)."""

    def __init__(self, in_features: int, hidden: tuple[int, int], num_classes: int, dropout_p: float,
                 dropout_layers: int = 2):
        super().__init__()
        self.fc1 = Linear(in_features, hidden[0])
        self.fc2 = Linear(hidden[0], hidden[1])
        self.fc3 = Linear(hidden[1], num_classes)
        self.dropout_p = dropout_p
        self.dropout_layers = dropout_layers
        self.rng: np.random.Generator | None = None

    def _drop(self, h: Tensor) -> Tensor:
        return F.dropout(h, self.dropout_p, self.training, self.rng)

    def embed(self, pooled: Tensor) -> Tensor:
        h = F.silu(self.fc1(pooled))
        if self.dropout_layers == 2:
            h = self._drop(h)
        return F.silu(self.fc2(h))

    def forward(self, pooled: Tensor) -> Tensor:
        return self.fc3(self._drop(self.embed(pooled)))


class Model(Module):
    def __init__(self, config: ModelConfig, backbone_config: BackboneConfig | None = None,
                 zero_init_residual: bool = True):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone_config = backbone_config or load_backbone_config(config.backbone)
        self.backbone = Backbone(self.backbone_config, zero_init_residual=zero_init_residual)
        d = self.backbone_config.head_channels
        self.attention = make_attention(config.attention, d, config.mha_heads, config.attn_dim)
        self.head = MLPHead(d, tuple(config.mlp_hidden), config.num_classes, config.dropout_p, config.dropout_layers)
        self._apply_freeze()

    def _apply_freeze(self) -> None:
        units = self.backbone.units
        if self.config.freeze_prefix > len(units):
            raise ConfigError(f"freeze_prefix {self.config.freeze_prefix} exceeds {len(units)} backbone units")
        for unit in units[: self.config.freeze_prefix]:
            for p in unit.parameters():
                p.requires_grad = False

    def train(self, mode: bool = True) -> "Model":
        super().train(mode)
        # frozen units keep using their running statistics
        for unit in self.backbone.units[: self.config.freeze_prefix]:
            unit.train(False)
        return self

    def trainable_parameters(self) -> list:
        return [p for p in self.parameters() if p.requires_grad]

    def named_trainable_parameters(self) -> list:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def parameter_counts(self) -> dict[str, int]:
        """Trainable parameter counts per component plus the total."""

        def count(module):
            return 0 if module is None else int(sum(p.size for p in module.parameters() if p.requires_grad))

        counts = {"backbone": count(self.backbone), "attention": count(self.attention), "head": count(self.head)}
        counts["total"] = sum(counts.values())
        counts["buffers"] = int(sum(b.size for _, b in self.named_buffers()))
        return counts

    @property
    def input_shape(self) -> tuple[int, int, int]:
        cfg = self.backbone_config
        return cfg.in_channels, cfg.input_resolution, cfg.input_resolution

    def set_dropout_rng(self, rng: np.random.Generator | None) -> None:
        self.head.rng = rng

    def features(self, images: Tensor) -> Tensor:
        return forward_features(self.backbone, images)

    def logits_from_features(self, feats: Tensor) -> Tensor:
        refined = attach_attention(feats, self.config.attention, self.attention)
        return self.head(F.global_avg_pool2d(refined))

    def logits(self, images: Tensor) -> Tensor:
        self._check_input(images)
        return self.logits_from_features(self.features(images))

    def forward(self, images: Tensor) -> Tensor:
        return F.softmax(self.logits(images), axis=-1)

    def embed(self, images: Tensor) -> Tensor:
        self._check_input(images)
        refined = attach_attention(self.features(images), self.config.attention, self.attention)
        return self.head.embed(F.global_avg_pool2d(refined))

    def _check_input(self, images: Tensor) -> None:
        expected = self.input_shape
        if images.ndim != 4 or tuple(images.shape[1:]) != expected:
            raise ValueError(f"model expects images shaped [B, {expected[0]}, {expected[1]}, {expected[2]}], "
                             f"got {tuple(images.shape)}")


def build_model(config: ModelConfig, seed: int = 0, backbone_config: BackboneConfig | None = None,
                zero_init_residual: bool = True) -> Model:
    """Instantiate and initialize a model; identical seeds give identical parameters."""
    model = Model(config, backbone_config, zero_init_residual).initialize(seed)
    model.set_dropout_rng(key_rng(seed, "dropout"))
    return model


def _as_batch(images) -> Tensor:
    return images if isinstance(images, Tensor) else Tensor(images)


def _batched(model: Model, images, fn, batch_size: int) -> np.ndarray:
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            chunks = [fn(Tensor(data[i : i + batch_size])).data for i in range(0, len(data), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(chunks, axis=0)


def forward(model: Model, images) -> Tensor:
    return model(_as_batch(images))


def predict_proba(model: Model, images, batch_size: int = 64) -> np.ndarray:
    """Eval-mode class probabilities ``[N, num_classes]``."""
    return _batched(model, images, model.forward, batch_size)


def predict_topk(model: Model, images, k: int) -> list[list[tuple[int, float]]]:
    """Per image, the ``k`` most likely ``(class, prob)`` pairs in descending order."""
    if not 1 <= k <= model.config.num_classes:
        raise ValueError(f"k must be in [1, {model.config.num_classes}], got {k}")
    probs = predict_proba(model, images)
    idx = topk_indices(probs, k)
    return [[(int(c), float(row[c])) for c in cls] for row, cls in zip(probs, idx)]


def extract_embedding(model: Model, images, batch_size: int = 64) -> np.ndarray:
    """Penultimate activations ``[N, mlp_hidden[1]]`` (eval mode)."""
    return _batched(model, images, model.embed, batch_size)
