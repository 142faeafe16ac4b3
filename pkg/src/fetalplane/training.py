"""Loss, optimizer, augmentation, splitting and the training loop."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .functional import bilinear_matrix
from .model import Model
from .rng import key_rng
from .tensor import Tensor

PROB_FLOOR = 1e-12


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or parameter."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rotation: float = 15.0
    zoom: float = 0.1
    resize_jitter: float = 0.1
    hflip: bool = True
    vflip: bool = True
    seed: int = 0
    train_fraction: float = 0.8
    split_mode: str = "image"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie strictly between 0 and 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.split_mode not in ("image", "patient"):
            raise ValueError("split_mode must be 'image' or 'patient'")
        if min(self.rotation, self.zoom, self.resize_jitter) < 0 or self.zoom >= 1 or self.resize_jitter >= 1:
            raise ValueError("augmentation ranges must be >= 0 (zoom and resize_jitter < 1)")

    def to_dict(self) -> dict:
        return asdict(self)


# -- loss ------------------------------------------------------------------


def cce_loss(probs: Tensor, targets) -> Tensor:
    """Mean categorical cross-entropy ``-(1/N) sum_ij y_ij log p_ij``.

    Probabilities are clamped at ``1e-12`` before the log.
    """
    targets = targets if isinstance(targets, Tensor) else Tensor(targets)
    if probs.shape != targets.shape or probs.ndim != 2:
        raise ValueError(f"probs {probs.shape} and targets {targets.shape} must both be [N, K]")
    n = probs.shape[0]
    return -(probs.clip(PROB_FLOOR, None).log() * targets).sum() * (1.0 / n)


def one_hot(labels: Sequence[int], num_classes: int, dtype=None) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, num_classes), dtype=dtype or np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


# -- optimizer -------------------------------------------------------------


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[list[np.ndarray], dict]:
    """One bias-corrected Adam update; returns new parameter arrays and state.

    ``state`` holds ``t`` and per-parameter lists ``m`` and ``v`` (created on
    the first call when empty).
    """
    t = state.get("t", 0) + 1
    m = state.get("m") or [np.zeros_like(p) for p in params]
    v = state.get("v") or [np.zeros_like(p) for p in params]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_params, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = beta1 * mi + (1.0 - beta1) * g
        vi = beta2 * vi + (1.0 - beta2) * (g * g)
        m_hat = mi / c1
        v_hat = vi / c2
        new_params.append((p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False))
        new_m.append(mi.astype(p.dtype, copy=False))
        new_v.append(vi.astype(p.dtype, copy=False))
    return new_params, {"t": t, "m": new_m, "v": new_v}


class Adam:
    def __init__(self, params: Iterable, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {}

    @property
    def steps(self) -> int:
        return self.state.get("t", 0)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state, self.lr,
                                    self.beta1, self.beta2, self.eps)
        for p, value in zip(self.params, new):
            p.data = value


# -- augmentation ------------------------------------------------------------


def rotate(image: np.ndarray, degrees: float, zoom: float = 1.0) -> np.ndarray:
    """Rotate ``[C, H, W]`` counter-clockwise about the centre and magnify by ``zoom``.

    Bilinear sampling; uncovered pixels become 0.
    """
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    # exact quarter turns
    c = 0.0 if abs(c) < 1e-12 else c
    s = 0.0 if abs(s) < 1e-12 else s
    matrix = np.array([[c, s], [-s, c]]) / zoom
    H, W = image.shape[-2:]
    center = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
    offset = center - matrix @ center
    return np.stack([
        ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="constant", cval=0.0)
        for ch in image
    ]).astype(image.dtype, copy=False)


def resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear (half-pixel) resize of ``[C, H, W]`` with the same kernel as ``upsample_bilinear``."""
    H, W = image.shape[-2:]
    if (H, W) == (out_h, out_w):
        return image
    ah = bilinear_matrix(H, out_h)
    aw = bilinear_matrix(W, out_w)
    return (ah @ image @ aw.T).astype(image.dtype, copy=False)


def augment(image: np.ndarray, rng: np.random.Generator, config: TrainConfig) -> np.ndarray:
    """Random rotation, zoom, resize jitter and flips, in that order.

    All random numbers are drawn up front so the stream consumed is the same
    whatever the configuration.
    """
    angle, zoom, jitter, hflip, vflip = rng.uniform(-1.0, 1.0, size=5)
    angle *= config.rotation
    zoom = 1.0 + zoom * config.zoom
    jitter = 1.0 + jitter * config.resize_jitter
    H, W = image.shape[-2:]
    out = image
    if angle != 0.0 or zoom != 1.0:
        out = rotate(out, angle, zoom)
    if jitter != 1.0:
        size_h = max(1, int(round(H * jitter)))
        size_w = max(1, int(round(W * jitter)))
        out = resize(resize(out, size_h, size_w), H, W)
    if config.hflip and hflip < 0.0:
        out = out[..., ::-1]
    if config.vflip and vflip < 0.0:
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)


# -- splitting ---------------------------------------------------------------


def _round_half_away(x: Fraction) -> int:
    return int(math.floor(x + Fraction(1, 2))) if x >= 0 else -int(math.floor(-x + Fraction(1, 2)))


def split_counts(n: int, train_fraction: float) -> tuple[int, int]:
    """``(train, test)`` sizes with ``test = round(n * (1 - train_fraction))``, halves away from zero."""
    frac = Fraction(str(train_fraction))
    test = _round_half_away(n * (1 - frac))
    return n - test, test


def stratified_split_indices(labels: Sequence, train_fraction: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class seeded shuffle, then the first ``train`` items of each class go to training."""
    labels = np.asarray(labels)
    train, test = [], []
    for ci, cls in enumerate(sorted(set(labels.tolist()))):
        idx = np.flatnonzero(labels == cls)
        n_train, _ = split_counts(idx.size, train_fraction)
        order = key_rng(seed, f"split:{cls}", ci).permutation(idx.size)
        shuffled = idx[order]
        train.extend(shuffled[:n_train].tolist())
        test.extend(shuffled[n_train:].tolist())
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


def patient_split_indices(groups: Sequence, train_fraction: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Whole patients go to one side; patients are shuffled and the test side is
    filled until it holds about ``1 - train_fraction`` of the images."""
    groups = np.asarray(groups)
    patients = sorted(set(groups.tolist()))
    order = key_rng(seed, "patient-split").permutation(len(patients))
    _, target = split_counts(groups.size, train_fraction)
    test_patients, count = set(), 0
    for i in order:
        if count >= target:
            break
        pid = patients[i]
        test_patients.add(pid)
        count += int((groups == pid).sum())
    mask = np.array([g in test_patients for g in groups.tolist()], dtype=bool)
    return np.flatnonzero(~mask), np.flatnonzero(mask)


# -- loop --------------------------------------------------------------------


def train_loop(
    model: Model,
    images: np.ndarray,
    labels: Sequence[int],
    config: TrainConfig,
    callbacks: Sequence[Callable[[dict], None]] = (),
) -> tuple[Model, list[dict]]:
    """Train with Adam on mean CCE for ``epochs * ceil(N / batch_size)`` steps.

    Shuffling, augmentation and dropout draw from streams keyed by the seed
    and the epoch/sample/step index, so a run is reproducible bit for bit.
    Each epoch appends ``{epoch, loss, accuracy, seconds, steps}`` to the
    returned history and passes it to every callback.
    """
    config.validate()
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=int)
    if images.ndim == 3:
        images = images[:, None]
    if len(images) == 0:
        raise ValueError("training data is empty")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    dtype = model.parameters()[0].dtype
    targets_all = one_hot(labels, model.config.num_classes, dtype=dtype)
    optimizer = Adam(model.trainable_parameters(), config.learning_rate, config.beta1, config.beta2, config.eps)
    n = len(images)
    history = []
    step = 0
    model.train()
    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = key_rng(config.seed, "shuffle", epoch).permutation(n)
        loss_sum, correct = 0.0, 0
        for b in range(0, n, config.batch_size):
            idx = order[b : b + config.batch_size]
            batch = np.stack([augment(images[i], key_rng(config.seed, "augment", epoch, int(i)), config) for i in idx])
            model.set_dropout_rng(key_rng(config.seed, "dropout", step))
            optimizer.zero_grad()
            probs = model(Tensor(batch.astype(dtype, copy=False)))
            loss = cce_loss(probs, Tensor(targets_all[idx]))
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch + 1}, step {step + 1}")
            loss.backward()
            optimizer.step()
            step += 1
            loss_sum += value * len(idx)
            correct += int((probs.data.argmax(axis=1) == labels[idx]).sum())
        for name, p in model.named_trainable_parameters():
            if not np.isfinite(p.data).all():
                raise TrainingError(f"non-finite values in {name} after epoch {epoch + 1}, step {step}")
        record = {
            "epoch": epoch + 1,
            "loss": loss_sum / n,
            "accuracy": correct / n,
            "seconds": time.perf_counter() - start,
            "steps": step,
        }
        history.append(record)
        for cb in callbacks:
            cb(record)
    model.eval()
    return model, history
