import hashlib

import numpy as np
import pytest
from PIL import Image

from fetalplane.data import (
    PLANE_LABELS,
    DataError,
    ImageError,
    ManifestError,
    load_boxes,
    load_image,
    load_manifest,
    synth_dataset,
)
from fetalplane.functional import upsample_bilinear
from fetalplane.tensor import Tensor, default_dtype
from fetalplane.training import stratified_split_indices

CLASS_TOTALS = {"FA": 711, "FB": 3092, "FF": 1040, "FT": 1718, "MC": 1626, "O": 4213}
# frozen after calibration: L2-regularized logistic regression on raw pixels
BASELINE_C = 0.01


def _write(path, text):
    path.write_text(text)
    return path


def test_manifest_three_rows(tmp_path):
    m = load_manifest(_write(tmp_path / "m.csv", "image_path,plane_label,patient_id\na.png,FA,p1\nb.png,O,p1\nc.png,MC,p2\n"))
    assert len(m) == 3 and m.labels.tolist() == [0, 5, 4] and m.patients == ["p1", "p1", "p2"]


@pytest.mark.parametrize("body,needle", [
    ("image_path,plane_label,patient_id\na.png,FA,p1\nb.png,XX,p1\n", ":3: unknown label 'XX'"),
    ("image_path,plane_label,patient_id\na.png,FA,p1\na.png,FB,p2\n", ":3: duplicate path"),
    ("image_path,patient_id\na.png,p1\n", ":1: missing column(s) plane_label"),
    ("", "header row is mandatory"),
])
def test_manifest_errors_name_the_line(tmp_path, body, needle):
    with pytest.raises(ManifestError) as exc:
        load_manifest(_write(tmp_path / "m.csv", body))
    assert needle in str(exc.value)


def test_manifest_reference_totals_and_idempotence(tmp_path):
    rows = [f"img_{lab}_{i}.png,{lab},p{i % 97}" for lab, n in CLASS_TOTALS.items() for i in range(n)]
    path = _write(tmp_path / "m.csv", "image_path,plane_label,patient_id,extra\n" + "\n".join(r + ",x" for r in rows) + "\n")
    m = load_manifest(path)
    assert m.class_counts() == CLASS_TOTALS
    m.write(tmp_path / "again.csv")
    again = load_manifest(tmp_path / "again.csv")
    assert again.records == m.records


def test_missing_manifest_is_data_error(tmp_path):
    with pytest.raises(DataError):
        load_manifest(tmp_path / "nope.csv")


def test_pgm_scaling_and_native_resolution(tmp_path):
    arr = np.array([[0, 255], [255, 0]], np.uint8)
    Image.fromarray(arr).save(tmp_path / "x.pgm")
    img = load_image(tmp_path / "x.pgm")
    assert img.shape == (1, 2, 2) and img.tolist() == [[[0.0, 1.0], [1.0, 0.0]]]
    rgb = load_image(tmp_path / "x.pgm", channels=3)
    assert rgb.shape == (3, 2, 2) and np.array_equal(rgb[0], rgb[2])


def test_png_native_is_bit_exact(tmp_path, rng):
    arr = rng.integers(0, 256, (5, 5)).astype(np.uint8)
    Image.fromarray(arr).save(tmp_path / "x.png")
    np.testing.assert_array_equal(load_image(tmp_path / "x.png", 5)[0], arr / 255.0)


def test_resize_shares_bilinear_kernel(tmp_path):
    arr = (np.arange(16).reshape(4, 4) * 17).astype(np.uint8)
    Image.fromarray(arr).save(tmp_path / "g.pgm")
    small = load_image(tmp_path / "g.pgm", 2)
    with default_dtype("float64"):
        ref = upsample_bilinear(Tensor(arr[None] / 255.0), 2, 2).data
    np.testing.assert_allclose(small, ref, rtol=1e-12)
    # half-pixel mapping: each output averages a 2x2 block centre
    np.testing.assert_allclose(small[0, 0, 0], (0 + 17 + 68 + 85) / 4 / 255.0)


def test_bad_images(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"\x89PNG\r\n\x1a\nnot really")
    with pytest.raises(ImageError):
        load_image(tmp_path / "bad.png")
    Image.fromarray(np.zeros((2, 2), np.uint8)).save(tmp_path / "x.bmp")
    with pytest.raises(ImageError, match="unsupported"):
        load_image(tmp_path / "x.bmp")
    with pytest.raises(ImageError):
        load_image(tmp_path / "missing.png")


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_counts_and_determinism(tmp_path):
    a = synth_dataset(tmp_path / "a", 6, 100, 64, seed=0)
    assert len(a) == 600 and len(list((tmp_path / "a" / "images").glob("*.png"))) == 600
    assert len(load_manifest(tmp_path / "a" / "manifest.csv")) == 600
    synth_dataset(tmp_path / "b", 6, 100, 64, seed=0)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_synth_boxes(tmp_path):
    m = synth_dataset(tmp_path, 6, 3, 64, seed=1)
    boxes = load_boxes(tmp_path / "boxes.csv")
    labelled = {r.image_path for r in m.records if r.plane_label != "O"}
    assert set(boxes) == labelled  # the speckle-only class has no shape
    for y0, x0, y1, x1 in boxes.values():
        assert 0 <= y0 < y1 <= 64 and 0 <= x0 < x1 <= 64


def test_synth_vocabulary(tmp_path):
    m = synth_dataset(tmp_path, 3, 2, 32, seed=0)
    assert m.vocabulary == PLANE_LABELS[:3]


def linear_baseline_accuracy(root) -> float:
    from sklearn.linear_model import LogisticRegression

    m = synth_dataset(root, 6, 200, 64, seed=0)
    X = m.load_images(64, 1).reshape(len(m), -1)
    y = m.labels
    tr, te = stratified_split_indices(y, 0.8, 0)
    clf = LogisticRegression(C=BASELINE_C, max_iter=3000).fit(X[tr], y[tr])
    return float(clf.score(X[te], y[te]))


def test_synth_is_learnable_but_not_trivial(tmp_path):
    acc = linear_baseline_accuracy(tmp_path)
    assert 0.60 <= acc < 0.95
