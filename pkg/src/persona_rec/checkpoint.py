"""Flat binary checkpoints: named parameters -> (shape, float32 payload).

Layout (all integers little-endian):
  8 bytes   magic  b"RECCKPT\\0"
  uint32    format version (currently 1)
  uint32    entry count
  per entry:
    uint16  name length, then UTF-8 name bytes
    uint8   ndim, then ndim x uint32 dims
    row-major little-endian float32 payload (prod(dims) values)

Entries are written in sorted name order so identical parameters produce
byte-identical files.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"RECCKPT\x00"
VERSION = 1


def save_checkpoint(path, named_params: dict) -> None:
    """Write tensors (or arrays) to path; payloads are cast to float32."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(named_params)))
        for name in sorted(named_params):
            value = named_params[name]
            arr = np.ascontiguousarray(getattr(value, "data", value), dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint: expected {n} bytes for {what}")
    return buf


def load_checkpoint(path) -> dict:
    """Read a checkpoint back as a name -> float32 ndarray map."""
    out = {}
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC), "magic") != MAGIC:
            raise FormatError(f"{path}: not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
            n_values = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            payload = _read_exact(f, 4 * n_values, f"payload of {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after {count} entries")
    return out


def apply_checkpoint(model, loaded: dict) -> None:
    """Copy loaded arrays into the model's named parameters, shapes validated."""
    params = model.named_parameters()
    missing = sorted(set(params) - set(loaded))
    extra = sorted(set(loaded) - set(params))
    if missing or extra:
        raise FormatError(
            f"checkpoint/model parameter mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        arr = loaded[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise FormatError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
