"""Dataset manifests, image loading and the synthetic ultrasound-like dataset."""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .rng import key_rng
from .training import resize

PLANE_LABELS = ("FA", "FB", "FF", "FT", "MC", "O")
PLANE_NAMES = {
    "FA": "Fetal Abdomen",
    "FB": "Fetal Brain",
    "FF": "Fetal Femur",
    "FT": "Fetal Thorax",
    "MC": "Maternal Cervix",
    "O": "Others",
}
MANIFEST_COLUMNS = ("image_path", "plane_label", "patient_id")


class DataError(ValueError):
    """Bad dataset input (manifest, image or archive)."""


class ManifestError(DataError):
    pass


class ImageError(DataError):
    pass


@dataclass(frozen=True)
class Record:
    image_path: str
    plane_label: str
    patient_id: str


@dataclass
class DatasetManifest:
    records: list[Record]
    vocabulary: tuple[str, ...] = PLANE_LABELS
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def labels(self) -> np.ndarray:
        index = {name: i for i, name in enumerate(self.vocabulary)}
        return np.array([index[r.plane_label] for r in self.records], dtype=int)

    @property
    def patients(self) -> list[str]:
        return [r.patient_id for r in self.records]

    def resolve(self, record: Record) -> Path:
        path = Path(record.image_path)
        return path if path.is_absolute() else self.root / path

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest([self.records[i] for i in indices], self.vocabulary, self.root)

    def class_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in self.vocabulary}
        for r in self.records:
            counts[r.plane_label] += 1
        return counts

    def load_images(self, resolution: int | None = None, channels: int = 1) -> np.ndarray:
        if not self.records:
            return np.zeros((0, channels, resolution or 0, resolution or 0))
        return np.stack([load_image(self.resolve(r), resolution, channels) for r in self.records])

    def write(self, path: str | Path) -> None:
        """Write as CSV; image paths are rewritten relative to the new file's directory."""
        path = Path(path)
        rows = []
        for r in self.records:
            target = self.resolve(r).resolve()
            rel = os.path.relpath(target, path.parent.resolve())
            rows.append((Path(rel).as_posix(), r.plane_label, r.patient_id))
        _atomic_write_rows(path, rows)


def _atomic_write_rows(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_COLUMNS)
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_manifest(path: str | Path, vocabulary: Sequence[str] = PLANE_LABELS) -> DatasetManifest:
    """Read and validate a CSV manifest (header ``image_path,plane_label,patient_id``).

    Extra columns are ignored.  Errors name the offending line.
    """
    path = Path(path)
    vocabulary = tuple(vocabulary)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ManifestError(f"{path}: cannot read manifest: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}:1: empty manifest, header row is mandatory")
        header = [h.strip() for h in header]
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"{path}:1: missing column(s) {', '.join(missing)}")
        cols = [header.index(c) for c in MANIFEST_COLUMNS]
        records, seen = [], {}
        for lineno, row in enumerate(reader, 2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            image_path, label, patient = (row[i].strip() for i in cols)
            if label not in vocabulary:
                raise ManifestError(f"{path}:{lineno}: unknown label {label!r}; expected one of {list(vocabulary)}")
            if not image_path:
                raise ManifestError(f"{path}:{lineno}: empty image_path")
            if image_path in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {image_path!r} (first on line {seen[image_path]})")
            seen[image_path] = lineno
            records.append(Record(image_path, label, patient))
    return DatasetManifest(records, vocabulary, path.parent)


def load_image(path: str | Path, target_resolution: int | None = None, channels: int = 1) -> np.ndarray:
    """Load PNG/PGM/PPM as ``[channels, H, W]`` in [0, 1], bilinearly resized if asked."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.format not in ("PNG", "PPM"):
                raise ImageError(f"{path}: unsupported image format {img.format}")
            img.load()
            if img.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(img, dtype=np.float64)
                arr = arr / (65535.0 if arr.max() > 255 else 255.0)
                arr = arr[None]
            elif img.mode in ("L", "1", "P", "LA") or channels == 1:
                arr = np.asarray(img.convert("L"), dtype=np.float64)[None] / 255.0
            else:
                arr = np.asarray(img.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    except ImageError:
        raise
    except FileNotFoundError:
        raise ImageError(f"{path}: no such file") from None
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageError(f"{path}: corrupt or unreadable image ({exc})") from None
    if arr.shape[0] == 1 and channels > 1:
        arr = np.repeat(arr, channels, axis=0)
    elif arr.shape[0] != channels:
        raise ImageError(f"{path}: cannot convert {arr.shape[0]} channels to {channels}")
    if target_resolution is not None:
        arr = resize(arr, target_resolution, target_resolution)
    return arr


def save_png(path: str | Path, array: np.ndarray) -> None:
    """Save ``[H, W]`` or ``[H, W, 3]`` values in [0, 1] as 8-bit PNG."""
    img = np.clip(np.round(np.asarray(array) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")


# -- synthetic data -------------------------------------------------------------

SHAPE_FAMILIES = ("ellipse", "double_ellipse", "bar", "ring", "wedge", "speckle")
# max shape-centre offset from the image centre, in pixels at 64x64
POSITION_JITTER = 4.0


def _grid(res: int):
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    return yy, xx


def _rotated(yy, xx, cy, cx, angle):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    return dx * c + dy * s, -dx * s + dy * c


def _soft(d: np.ndarray) -> np.ndarray:
    """Anti-aliased inside indicator from a signed 'distance' (negative inside)."""
    return np.clip(0.5 - d, 0.0, 1.0)


def render_shape(family: str, rng: np.random.Generator, res: int) -> np.ndarray:
    """Soft mask in [0, 1] of one random instance of a shape family."""
    yy, xx = _grid(res)
    scale = res / 64.0
    angle = rng.uniform(0, np.pi)
    cy, cx = res / 2.0 + rng.uniform(-POSITION_JITTER, POSITION_JITTER, size=2) * scale
    if family == "ellipse":
        a, b = rng.uniform(9, 14) * scale, rng.uniform(6, 9) * scale
        u, v = _rotated(yy, xx, cy, cx, angle)
        r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        return _soft((r - 1.0) * min(a, b))
    if family == "double_ellipse":
        a, b = rng.uniform(8, 11) * scale, rng.uniform(4, 6) * scale
        gap = b + rng.uniform(1.5, 3.0) * scale
        u, v = _rotated(yy, xx, cy, cx, angle)
        masks = [_soft((np.sqrt((u / a) ** 2 + ((v - o) / b) ** 2) - 1.0) * b) for o in (-gap, gap)]
        return np.maximum(*masks)
    if family == "bar":
        length, width = rng.uniform(14, 19) * scale, rng.uniform(2.0, 3.0) * scale
        u, v = _rotated(yy, xx, cy, cx, angle)
        return _soft(np.maximum(np.abs(u) - length, np.abs(v) - width))
    if family == "ring":
        radius, thickness = rng.uniform(9, 14) * scale, rng.uniform(2.5, 3.5) * scale
        r = np.hypot(yy - cy, xx - cx)
        return _soft(np.abs(r - radius) - thickness / 2)
    if family == "wedge":
        radius = rng.uniform(14, 19) * scale
        span = rng.uniform(np.pi / 4, np.pi / 2)
        r = np.hypot(yy - cy, xx - cx)
        phi = np.angle(np.exp(1j * (np.arctan2(yy - cy, xx - cx) - 2 * angle)))
        return _soft(np.maximum(r - radius, (np.abs(phi) - span / 2) * r))
    if family == "speckle":
        return np.zeros((res, res))
    raise ValueError(f"unknown shape family {family!r}")


def render_synthetic(family: str, rng: np.random.Generator, res: int = 64) -> tuple[np.ndarray, tuple | None]:
    """One ``[res, res]`` image in [0, 1] plus the shape's bounding box ``(y0, x0, y1, x1)``.

    The shape is drawn over a smooth tissue-like background and the whole
    image is modulated by multiplicative speckle.
    """
    mask = render_shape(family, rng, res)
    background = rng.uniform(0.25, 0.5)
    shading = ndimage.gaussian_filter(rng.standard_normal((res, res)), sigma=6 * res / 64)
    shading = shading / (np.abs(shading).max() + 1e-12)
    tissue = background * (1.0 + 0.5 * shading)
    brightness = rng.uniform(0.3, 0.6)
    clean = tissue + brightness * mask
    speckle = ndimage.gaussian_filter(rng.rayleigh(1.0, (res, res)), sigma=0.7) / np.sqrt(np.pi / 2)
    image = np.clip(clean * speckle, 0.0, 1.0)
    box = None
    if mask.max() > 0.5:
        ys, xs = np.nonzero(mask > 0.5)
        box = (int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max()))
    return image, box


def synth_dataset(out_dir: str | Path, classes: int | Sequence[str] = 6, per_class: int = 100,
                  resolution: int = 64, seed: int = 0) -> DatasetManifest:
    """Render ``per_class`` PNG images for each class and write ``manifest.csv``.

    Class ``i`` uses shape family ``i`` (ellipse, double ellipse, bar, ring,
    wedge, speckle only).  Bounding boxes go to ``boxes.csv``.  Output bytes
    are a pure function of the arguments.
    """
    out_dir = Path(out_dir)
    names = list(PLANE_LABELS[:classes]) if isinstance(classes, int) else list(classes)
    if not 1 <= len(names) <= len(SHAPE_FAMILIES):
        raise ValueError(f"between 1 and {len(SHAPE_FAMILIES)} classes are supported")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records, boxes = [], []
    for ci, name in enumerate(names):
        family = SHAPE_FAMILIES[ci]
        for j in range(per_class):
            image, box = render_synthetic(family, key_rng(seed, "synth", ci, j), resolution)
            rel = f"images/{name}_{j:05d}.png"
            save_png(out_dir / rel, image)
            # ten images per synthetic "patient"
            records.append(Record(rel, name, f"{name}-p{j // 10:04d}"))
            boxes.append((rel, *(box if box else ("", "", "", ""))))
    manifest = DatasetManifest(records, tuple(names), out_dir)
    manifest.write(out_dir / "manifest.csv")
    with open(out_dir / "boxes.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("image_path", "y0", "x0", "y1", "x1"))
        writer.writerows(boxes)
    return manifest


def load_boxes(path: str | Path) -> dict[str, tuple[int, int, int, int]]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["y0"] != "":
                out[row["image_path"]] = tuple(int(row[k]) for k in ("y0", "x0", "y1", "x1"))
    return out
