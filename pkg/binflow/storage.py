"""
Binary tensor records (BNFM) and run manifests.

Layout, all integers little-endian:
    magic "BNFM" | version u32 | count u32
    per tensor: name_len u16 | name utf-8 | rank u8 | extents u32 * rank | f64 payload
"""

import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from binflow.errors import FormatError
from binflow.models import RunManifest

MAGIC = b"BNFM"
VERSION = 1

PathLike = Union[str, Path]


def encode_records(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named arrays in insertion order"""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if array.ndim > 0xFF:
            raise ValueError(f"rank {array.ndim} too large for '{name}'")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())
    return b"".join(chunks)


def _unpack(fmt: str, blob: bytes, offset: int, what: str):
    size = struct.calcsize(fmt)
    if offset + size > len(blob):
        raise FormatError(f"truncated {what}", offset)
    return struct.unpack_from(fmt, blob, offset), offset + size


def decode_records(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise FormatError("bad magic, expected BNFM", 0)
    (version, count), offset = _unpack("<II", blob, 4, "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,), offset = _unpack("<H", blob, offset, "name length")
        if offset + name_len > len(blob):
            raise FormatError("truncated tensor name", offset)
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,), offset = _unpack("<B", blob, offset, "rank")
        shape, offset = _unpack(f"<{rank}I", blob, offset, "extents")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise FormatError(f"truncated payload of '{name}'", offset)
        payload = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset)
        tensors[name] = payload.astype(np.float64).reshape(shape)
        offset += nbytes

    if offset != len(blob):
        raise FormatError("trailing bytes after last record", offset)
    return tensors


def write_records(path: PathLike, tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_records(tensors))
    return path


def read_records(path: PathLike) -> Dict[str, np.ndarray]:
    return decode_records(Path(path).read_bytes())


def write_json(path: PathLike, payload: Dict) -> Path:
    """Strict JSON: NaN and infinities raise instead of being written as bare tokens"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def write_manifest(path: PathLike, manifest: RunManifest) -> Path:
    return write_json(path, manifest.model_dump(mode="json"))
