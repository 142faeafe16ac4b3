import zlib

import numpy as np
import pytest

from fetalplane.archive import ArchiveError, load_archive, load_model, save_archive, save_model
from fetalplane.model import ModelConfig, build_model, predict_proba


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(attention="mha"), seed=2).eval()


def _images():
    return np.random.default_rng(0).random((3, 1, 64, 64)).astype(np.float32)


def test_layout_by_hand(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    b = np.array(2.5)
    save_archive(tmp_path / "t.fpta", {"a": a, "b": b}, {"note": {"k": 1}})
    raw = (tmp_path / "t.fpta").read_bytes()
    header = b"FPTA1\n2\na\tf4\t2\t2 3\nb\tf8\t0\t\next\tnote\t{\"k\":1}\nend\n"
    payload = a.astype("<f4").tobytes() + b.astype("<f8").tobytes()
    assert raw == header + payload + zlib.crc32(payload).to_bytes(4, "little")
    tensors, ext = load_archive(tmp_path / "t.fpta")
    assert np.array_equal(tensors["a"], a) and tensors["b"].shape == () and ext == {"note": {"k": 1}}


def test_model_roundtrip_is_bitwise(tmp_path, model):
    save_model(model, tmp_path / "m.fpta", ["FA", "FB", "FF", "FT", "MC", "O"])
    loaded, ext = load_model(tmp_path / "m.fpta")
    assert loaded.config == model.config and loaded.backbone_config == model.backbone_config
    assert ext["class_names"][0] == "FA"
    for (n, p), (m, q) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n == m and p.data.dtype == q.data.dtype and np.array_equal(p.data, q.data)
    np.testing.assert_array_equal(predict_proba(model, _images()), predict_proba(loaded, _images()))


def test_float64_roundtrip(tmp_path):
    from fetalplane.tensor import default_dtype

    with default_dtype("float64"):
        m = build_model(ModelConfig(attention="none"), 0).eval()
    save_model(m, tmp_path / "m.fpta")
    loaded, _ = load_model(tmp_path / "m.fpta")
    assert loaded.head.fc1.weight.dtype == np.float64


def test_truncated_file_rejected_with_crc_message(tmp_path, model):
    path = tmp_path / "m.fpta"
    save_model(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 1000])
    with pytest.raises(ArchiveError, match="CRC-32"):
        load_model(path)


def test_flipped_byte_rejected(tmp_path, model):
    path = tmp_path / "m.fpta"
    save_model(model, path)
    raw = bytearray(path.read_bytes())
    raw[-100] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ArchiveError, match="CRC-32 mismatch"):
        load_archive(path)


def test_renamed_tensor_is_named(tmp_path, model):
    path = tmp_path / "m.fpta"
    save_model(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw.replace(b"head.fc2.bias\t", b"head.fc2.bais\t", 1))
    with pytest.raises(ArchiveError, match="head.fc2.bias"):
        load_model(path)


def test_shape_mismatch_vs_config(tmp_path, model):
    state = model.state_dict()
    state["head.fc1.bias"] = np.zeros(3, np.float32)
    save_archive(tmp_path / "m.fpta", state, {"model_config": model.config.to_dict(),
                                              "backbone_config": model.backbone_config.to_dict()})
    with pytest.raises(ArchiveError, match="head.fc1.bias"):
        load_model(tmp_path / "m.fpta")


def test_bad_magic_and_no_config(tmp_path):
    (tmp_path / "x.fpta").write_bytes(b"NOPE\n")
    with pytest.raises(ArchiveError, match="magic"):
        load_archive(tmp_path / "x.fpta")
    save_archive(tmp_path / "y.fpta", {"w": np.zeros(2)})
    with pytest.raises(ArchiveError, match="configuration"):
        load_model(tmp_path / "y.fpta")


def test_failed_write_leaves_old_file(tmp_path):
    path = tmp_path / "a.fpta"
    save_archive(path, {"w": np.ones(2)})
    before = path.read_bytes()
    with pytest.raises(ArchiveError):
        save_archive(path, {"w": np.ones(2), "bad": np.ones(2, dtype=np.int32)})
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["a.fpta"]
