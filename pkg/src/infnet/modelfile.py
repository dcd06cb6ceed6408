"""Binary model files: a UTF-8 JSON manifest followed by checksummed tensor records.

Layout (all integers little-endian)::

    magic      8 bytes   b"INFNETMF"
    version    uint32
    length     uint64    manifest byte count
    manifest   UTF-8 JSON (sorted keys)
    crc        uint32    CRC-32 of the manifest bytes
    records    one per tensor named in manifest["tensors"], in that order:
        name_len uint32, name UTF-8, ndim uint32, dims uint64 * ndim,
        data float64 * prod(dims), crc uint32 over everything in the record before it
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"INFNETMF"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    """A model file is truncated, corrupted, or of an unsupported version."""


def _encode_record(name: str, array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype="<f8", order="C")
    raw_name = name.encode("utf-8")
    body = struct.pack("<I", len(raw_name)) + raw_name + struct.pack("<I", array.ndim)
    body += struct.pack(f"<{array.ndim}Q", *array.shape) + array.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(path, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write ``manifest`` and ``tensors``; the manifest gains ``format_version`` and ``tensors``."""
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    manifest["tensors"] = list(tensors)
    raw = json.dumps(manifest, sort_keys=True, ensure_ascii=False).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(raw)), raw, struct.pack("<I", zlib.crc32(raw))]
    parts.extend(_encode_record(name, value) for name, value in tensors.items())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise ModelFileError(f"{self.path}: file truncated while reading {what}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_model(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a model file and return ``(manifest, tensors)``."""
    reader = _Reader(Path(path).read_bytes(), path)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise ModelFileError(f"{path}: not a model file")
    (version,) = reader.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise ModelFileError(f"{path}: model file version {version} is not supported (this build reads version {FORMAT_VERSION})")
    (length,) = reader.unpack("<Q", "manifest length")
    raw = reader.take(length, "manifest")
    (crc,) = reader.unpack("<I", "manifest checksum")
    if zlib.crc32(raw) != crc:
        raise ModelFileError(f"{path}: manifest checksum mismatch")
    manifest = json.loads(raw.decode("utf-8"))
    if manifest.get("format_version") != version:
        raise ModelFileError(
            f"{path}: manifest version {manifest.get('format_version')} disagrees with header version {version}"
        )
    tensors: dict[str, np.ndarray] = {}
    for expected in manifest["tensors"]:
        start = reader.pos
        (name_len,) = reader.unpack("<I", f"record {expected!r}")
        name = reader.take(name_len, f"record {expected!r}").decode("utf-8")
        if name != expected:
            raise ModelFileError(f"{path}: expected record {expected!r}, found {name!r}")
        (ndim,) = reader.unpack("<I", f"record {name!r}")
        dims = reader.unpack(f"<{ndim}Q", f"record {name!r}")
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        data = reader.take(8 * count, f"record {name!r}")
        body = reader.blob[start : reader.pos]
        (crc,) = reader.unpack("<I", f"record {name!r} checksum")
        if zlib.crc32(body) != crc:
            raise ModelFileError(f"{path}: checksum mismatch in tensor record {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f8").reshape(dims).astype(np.float64)
    if reader.pos != len(reader.blob):
        raise ModelFileError(f"{path}: {len(reader.blob) - reader.pos} unexpected trailing bytes")
    return manifest, tensors
