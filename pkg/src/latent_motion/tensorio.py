"""Dense float64 tensors on disk (LMT1 format) and reproducible random streams.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in row-major
order. The LMT1 layout is::

    b"LMT1" | u32 version (=1) | u8 ndim | ndim x u64 dims | f64 data

with every integer and float little-endian.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LMT1"
VERSION = 1
_HEADER = struct.Struct("<4sIB")


class TensorFormatError(ValueError):
    """Raised for unreadable or invalid LMT1 payloads."""


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array (no copy when possible)."""
    return np.ascontiguousarray(x, dtype=np.float64)


def encode_tensor(t) -> bytes:
    t = as_tensor(t)
    if t.ndim == 0:
        t = t.reshape(1)
    if t.ndim > 255:
        raise TensorFormatError(f"too many dimensions: {t.ndim}")
    bad = np.flatnonzero(~np.isfinite(t.ravel()))
    if bad.size:
        raise TensorFormatError(f"non-finite value at flat index {int(bad[0])}")
    head = _HEADER.pack(MAGIC, VERSION, t.ndim)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + dims + t.astype("<f8", copy=False).tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size or buf[:4] != MAGIC:
        raise TensorFormatError("not an LMT1 file")
    _, version, ndim = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise TensorFormatError(f"unsupported LMT1 version {version}")
    off = _HEADER.size
    if len(buf) < off + 8 * ndim:
        raise TensorFormatError("truncated tensor")
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(buf) < off + 8 * count:
        raise TensorFormatError("truncated tensor")
    if len(buf) > off + 8 * count:
        raise TensorFormatError(f"{len(buf) - off - 8 * count} trailing bytes after tensor data")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=off)
    return data.astype(np.float64).reshape(shape)


def write_tensor(t, path) -> None:
    """Write ``t`` to ``path`` in LMT1 format.

    Raises ``TensorFormatError`` for non-finite data and ``OSError`` (with the
    path attached) when the file cannot be written.
    """
    payload = encode_tensor(t)
    path = Path(path)
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write tensor: {exc.strerror}", str(path)) from exc


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        return decode_tensor(path.read_bytes())
    except TensorFormatError as exc:
        raise TensorFormatError(f"{path}: {exc}") from None


def write_tensor_dir(tensors: dict[str, np.ndarray], path, meta: dict) -> None:
    """Persist named tensors as ``<name>.lmt`` files plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, value in tensors.items():
        value = as_tensor(value)
        write_tensor(value, path / f"{name}.lmt")
        entries.append({"name": name, "shape": list(value.shape)})
    manifest = {"meta": meta, "tensors": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_tensor_dir(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    tensors = {}
    for entry in manifest["tensors"]:
        t = read_tensor(path / f"{entry['name']}.lmt")
        if list(t.shape) != entry["shape"]:
            raise TensorFormatError(f"{entry['name']}: shape {list(t.shape)} != manifest {entry['shape']}")
        tensors[entry["name"]] = t
    return tensors, manifest["meta"]


def stream_id(name: str) -> int:
    """Stable 64-bit id for a named substream."""
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by numpy's Philox generator, whose 128-bit key is the pair of
    64-bit integers; draws are identical across runs and platforms.
    Instances are single-owner.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def substream(self, name: str | int) -> RngStream:
        """Independent child stream; depends only on (seed, stream_id, name)."""
        sub = stream_id(name) if isinstance(name, str) else int(name)
        mixed = stream_id(f"{self.stream_id}/{sub}")
        return RngStream(self.seed, mixed)

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)
