"""RTEN binary tensor files and parameter directories.

Layout (little-endian): ``b"RTEN"``, version byte ``0x01``, dtype byte
(``0x01`` f32, ``0x02`` f64), u32 rank, ``rank`` x u64 extents, then the
row-major payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RTEN"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {"f32": 1, "f64": 2}


class RtenFormatError(ValueError):
    """Raised for truncated or malformed RTEN data."""


def encode_rten(array, dtype: str = "f64") -> bytes:
    if dtype not in _CODES:
        raise ValueError(f"dtype must be one of {sorted(_CODES)}, got {dtype!r}")
    code = _CODES[dtype]
    a = np.asarray(array, dtype=_DTYPES[code], order="C")
    if a.ndim > 5:
        raise ValueError(f"rank {a.ndim} exceeds 5")
    header = MAGIC + struct.pack("<BBI", VERSION, code, a.ndim)
    header += struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + a.tobytes(order="C")


def decode_rten(data: bytes) -> np.ndarray:
    if len(data) < 10 or data[:4] != MAGIC:
        raise RtenFormatError("bad magic")
    version, code, rank = struct.unpack_from("<BBI", data, 4)
    if version != VERSION:
        raise RtenFormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise RtenFormatError(f"unknown dtype code {code}")
    if rank > 5:
        raise RtenFormatError(f"rank {rank} exceeds 5")
    off = 10
    if len(data) < off + 8 * rank:
        raise RtenFormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}Q", data, off)
    off += 8 * rank
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(data) - off != count * dt.itemsize:
        raise RtenFormatError(
            f"payload is {len(data) - off} bytes, expected {count * dt.itemsize} for shape {shape}"
        )
    return np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(shape).copy()


def write_rten(path, array, dtype: str = "f64") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_rten(array, dtype))


def read_rten(path) -> np.ndarray:
    return decode_rten(Path(path).read_bytes())


def save_tensors(tensors: dict, directory, meta: dict | None = None) -> Path:
    """Write ``name -> array`` as RTEN files plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in tensors.items():
        fname = f"{name}.rten"
        write_rten(directory / fname, arr)
        files[name] = fname
    manifest = {"tensors": files, **(meta or {})}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_tensors(directory) -> tuple[dict, dict]:
    """Inverse of :func:`save_tensors`; returns ``(tensors, meta)``."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    files = manifest.pop("tensors")
    tensors = {name: read_rten(directory / fname) for name, fname in files.items()}
    return tensors, manifest
