"""GradCAM heatmaps and colour overlays."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from .attention import attach_attention
from .model import Model
from .tensor import Tensor, no_grad

LAYERS = ("features", "attention")
SCORES = ("logit", "prob")

# (position, R, G, B); linear interpolation between neighbouring stops
JET_STOPS = np.array(
    [
        [0.00, 0.0, 0.0, 1.0],
        [0.25, 0.0, 1.0, 1.0],
        [0.50, 0.0, 1.0, 0.0],
        [0.75, 1.0, 1.0, 0.0],
        [1.00, 1.0, 0.0, 0.0],
    ]
)


@dataclass
class Heatmap:
    values: np.ndarray  # [H, W], in [0, 1]
    raw: np.ndarray  # [H_f, W_f], ReLU(sum_k alpha_k A_k) before upsampling
    weights: np.ndarray  # alpha, one per channel
    target_class: int
    predicted_class: int

    @property
    def argmax(self) -> tuple[int, int]:
        return tuple(int(i) for i in np.unravel_index(np.argmax(self.values), self.values.shape))


def gradcam(model: Model, image, target_class: int | None = None, channel_weights=None,
            layer: str = "features", score: str = "logit") -> Heatmap:
    """Class-activation map for one image ``[C, H, W]``.

    The backbone runs without a tape; only the part after the target layer is
    differentiated.  ``channel_weights`` replaces the gradient-derived alphas.
    """
    if layer not in LAYERS:
        raise ValueError(f"layer must be one of {LAYERS}, got {layer!r}")
    if score not in SCORES:
        raise ValueError(f"score must be one of {SCORES}, got {score!r}")
    if model.training:
        raise ValueError("gradcam needs an eval-mode model; call model.eval() first")
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 3:
        raise ValueError(f"expected one image [C, H, W], got shape {data.shape}")
    x = Tensor(data[None].astype(model.backbone.stem.conv.weight.data.dtype, copy=False))
    model._check_input(x)
    K = model.config.num_classes
    if target_class is not None and not 0 <= int(target_class) < K:
        raise ValueError(f"target_class must be in [0, {K}), got {target_class}")

    with no_grad():
        feats = model.features(x)
        if layer == "attention":
            feats = attach_attention(feats, model.config.attention, model.attention)
    A = Tensor(feats.data, requires_grad=True)
    refined = A if layer == "attention" else attach_attention(A, model.config.attention, model.attention)
    logits = model.head(F.global_avg_pool2d(refined))
    predicted = int(np.argmax(logits.data[0]))
    target = predicted if target_class is None else int(target_class)

    a = A.data[0]
    if channel_weights is None:
        out = logits if score == "logit" else F.softmax(logits, axis=-1)
        out[0, target].backward()
        alpha = A.grad[0].mean(axis=(1, 2))
    else:
        alpha = np.broadcast_to(np.asarray(channel_weights, dtype=a.dtype), (a.shape[0],)).copy()
    model.zero_grad()

    raw = np.maximum(np.tensordot(alpha, a, axes=1), 0.0)
    up = F.upsample_bilinear(Tensor(raw), data.shape[1], data.shape[2]).data
    up = np.maximum(up, 0.0)
    peak = up.max()
    values = up / peak if peak > 0 else np.zeros_like(up)
    return Heatmap(values=values, raw=raw, weights=alpha, target_class=target, predicted_class=predicted)


def colormap(values: np.ndarray) -> np.ndarray:
    """Map ``[...]`` values in [0, 1] to ``[..., 3]`` RGB through the 5-stop table."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(v, JET_STOPS[:, 0], JET_STOPS[:, c]) for c in (1, 2, 3)], axis=-1)


def _grayscale(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.mean(axis=0)
    if image.ndim != 2:
        raise ValueError(f"expected [H, W] or [C, H, W] image, got shape {image.shape}")
    return image


def overlay(heatmap, image, alpha: float = 0.4) -> np.ndarray:
    """``(1 - alpha) * gray + alpha * colormap(heatmap)`` as ``[H, W, 3]`` floats in [0, 1].

    An all-zero heatmap leaves the image unblended.
    """
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    gray = _grayscale(image)
    if values.shape != gray.shape:
        raise ValueError(f"heatmap {values.shape} and image {gray.shape} differ in size")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    if not np.any(values):
        return rgb
    return (1.0 - alpha) * rgb + alpha * colormap(values)


def save_heatmap(heatmap: Heatmap, image, out_prefix: str | Path, alpha: float = 0.4) -> list[Path]:
    """Write ``<prefix>_heatmap.png``, ``<prefix>_overlay.png`` and ``<prefix>_heatmap.csv``."""
    from PIL import Image

    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = [prefix.with_name(prefix.name + s) for s in ("_heatmap.png", "_overlay.png", "_heatmap.csv")]
    to_u8 = lambda a: np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(to_u8(colormap(heatmap.values)), mode="RGB").save(paths[0])
    Image.fromarray(to_u8(overlay(heatmap, image, alpha)), mode="RGB").save(paths[1])
    with open(paths[2], "w", newline="") as fh:
        csv.writer(fh).writerows([[f"{v:.6g}" for v in row] for row in heatmap.values])
    return paths
