"""FPTA1 tensor archives: model checkpoints and imported weights.

Layout::

    FPTA1\\n
    <tensor count>\\n
    <name>\\t<dtype>\\t<rank>\\t<dim0 dim1 ...>\\n     (one line per tensor)
    ext\\t<key>\\t<single-line JSON>\\n              (zero or more header extensions)
    end\\n
    <payloads: little-endian IEEE-754, row-major, in header order>
    <CRC-32 of the payload bytes, 4 bytes little-endian>

Dtype codes are ``f4`` and ``f8``.
"""

from __future__ import annotations

import json
import os
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .data import DataError

MAGIC = "FPTA1"
DTYPE_CODES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class ArchiveError(DataError):
    pass


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.float64:
        return "f8"
    raise ArchiveError(f"unsupported dtype {arr.dtype}; archives hold float32/float64 only")


def save_archive(path: str | Path, tensors: dict[str, np.ndarray], extensions: dict | None = None) -> None:
    """Write atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    lines = [MAGIC, str(len(tensors))]
    payload = bytearray()
    for name, arr in tensors.items():
        if not name or any(c in name for c in "\t\n\r"):
            raise ArchiveError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        lines.append(f"{name}\t{code}\t{arr.ndim}\t{' '.join(str(d) for d in arr.shape)}")
        payload += np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
    for key, value in (extensions or {}).items():
        lines.append(f"ext\t{key}\t{json.dumps(value, separators=(',', ':'))}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(payload)
            fh.write(crc.to_bytes(4, "little"))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read and verify an archive; returns ``(tensors, extensions)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ArchiveError(f"{path}: cannot read archive: {exc.strerror}") from None
    if not raw.startswith(MAGIC.encode() + b"\n"):
        raise ArchiveError(f"{path}: not an FPTA1 archive (bad magic)")
    pos = 0
    specs = []
    extensions = {}

    def next_line() -> str:
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise ArchiveError(f"{path}: header truncated")
        line = raw[pos:end].decode("utf-8")
        pos = end + 1
        return line

    next_line()
    try:
        count = int(next_line())
        for _ in range(count):
            name, code, rank, dims = next_line().split("\t")
            shape = tuple(int(d) for d in dims.split()) if dims else ()
            if code not in DTYPE_CODES or len(shape) != int(rank):
                raise ArchiveError(f"{path}: bad record for tensor {name!r}")
            specs.append((name, DTYPE_CODES[code], shape))
        while True:
            line = next_line()
            if line == "end":
                break
            tag, key, value = line.split("\t", 2)
            if tag != "ext":
                raise ArchiveError(f"{path}: unexpected header line {line[:40]!r}")
            extensions[key] = json.loads(value)
    except (ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, ArchiveError):
            raise
        raise ArchiveError(f"{path}: malformed header ({exc})") from None

    expected = sum(int(np.prod(shape)) * dt.itemsize for _, dt, shape in specs)
    payload = raw[pos : pos + expected]
    trailer = raw[pos + expected :]
    if len(payload) != expected or len(trailer) != 4:
        raise ArchiveError(
            f"{path}: CRC-32 check failed: payload is {len(raw) - pos - 4} bytes, header declares {expected} "
            "(file truncated or padded)"
        )
    stored = int.from_bytes(trailer, "little")
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if stored != actual:
        raise ArchiveError(f"{path}: CRC-32 mismatch (stored {stored:08x}, computed {actual:08x})")

    tensors = {}
    offset = 0
    for name, dt, shape in specs:
        n = int(np.prod(shape)) * dt.itemsize
        tensors[name] = np.frombuffer(payload, dtype=dt, count=int(np.prod(shape)), offset=offset).reshape(shape).copy()
        offset += n
    return tensors, extensions


def save_model(model, path: str | Path, class_names=None, extra: dict | None = None) -> None:
    """Parameters, BN running statistics and the full configuration in one archive."""
    ext = {
        "model_config": model.config.to_dict(),
        "backbone_config": model.backbone_config.to_dict(),
    }
    if class_names is not None:
        ext["class_names"] = list(class_names)
    if extra:
        ext.update(extra)
    save_archive(path, model.state_dict(), ext)


def load_model(path: str | Path, dtype=None):
    """Rebuild a model from an archive; returns ``(model, extensions)``."""
    from .backbone import BackboneConfig
    from .model import Model, ModelConfig
    from .tensor import default_dtype, get_dtype

    tensors, ext = load_archive(path)
    if "model_config" not in ext or "backbone_config" not in ext:
        raise ArchiveError(f"{path}: archive carries no model configuration")
    mc = dict(ext["model_config"])
    mc["mlp_hidden"] = tuple(mc["mlp_hidden"])
    if dtype is None:
        dtype = next(iter(tensors.values())).dtype if tensors else get_dtype()
    with default_dtype(dtype):
        model = Model(ModelConfig(**mc), BackboneConfig.from_dict(ext["backbone_config"]))
        expected = dict(model.named_parameters())
        expected.update(model.named_buffers())
        missing = [n for n in expected if n not in tensors]
        unexpected = [n for n in tensors if n not in expected]
        if missing:
            hint = f" (archive has unexpected {unexpected[0]!r})" if unexpected else ""
            raise ArchiveError(f"{path}: missing tensor {missing[0]!r}{hint}")
        if unexpected:
            raise ArchiveError(f"{path}: unexpected tensor {unexpected[0]!r}")
        try:
            model.load_state_dict(tensors)
        except ValueError as exc:
            raise ArchiveError(f"{path}: {exc}") from None
    model.eval()
    return model, ext
