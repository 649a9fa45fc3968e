"""Parameter blob format: a JSON manifest of tensor names/shapes followed by
one flat little-endian float32 payload."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"NDF1"


class BlobFormatError(ValueError):
    pass


def save_params(path: str | Path, params: dict[str, Tensor | np.ndarray]) -> str:
    """Write parameters; returns the sha256 hex digest of the file."""
    entries = []
    chunks = []
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else np.asarray(p)
        arr = np.ascontiguousarray(data, dtype="<f4")
        entries.append([name, list(arr.shape)])
        chunks.append(arr.tobytes())
    header = json.dumps({"tensors": entries}).encode("utf-8")
    blob = MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise BlobFormatError(f"{path}: not a parameter blob")
    (header_len,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    offset = 8 + header_len
    out: dict[str, np.ndarray] = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if offset + nbytes > len(blob):
            raise BlobFormatError(f"{path}: truncated payload at tensor {name!r}")
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype="<f4").reshape(shape)
        out[name] = arr.astype(np.float32)
        offset += nbytes
    if offset != len(blob):
        raise BlobFormatError(f"{path}: trailing bytes after payload")
    return out


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def assign_params(params: dict[str, Tensor], values: dict[str, np.ndarray]) -> None:
    """Load values into an existing parameter dict, shape-checked."""
    missing = set(params) - set(values)
    if missing:
        raise BlobFormatError(f"blob missing parameters: {sorted(missing)[:4]}...")
    for name, p in params.items():
        v = values[name]
        if tuple(v.shape) != tuple(p.data.shape):
            raise BlobFormatError(f"shape mismatch for {name!r}: {v.shape} vs {p.data.shape}")
        p.data = v.astype(p.data.dtype)
