"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"OMNI"                 4-byte magic
    uint32 version          currently 1
    uint32 n_entries
    n_entries x {
        uint16 name_len, name (utf-8)
        uint8  dtype code   0 = float32, 1 = float64, 2 = int64
        uint8  ndim
        uint32 dims[ndim]
        raw little-endian element data, row-major
    }

Entries are written in sorted name order so identical states produce
identical bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ShapeError

MAGIC = b"OMNI"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


def encode_state(state: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise DataError(f"checkpoint entry {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(chunks)


def decode_state(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise DataError("not a checkpoint: bad magic bytes")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    pos = 12
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        state[name] = np.frombuffer(blob, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += size
    return state


def save(path, state: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_state(state))
    tmp.replace(path)


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return decode_state(path.read_bytes())


def state_dict(module) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in module.named_parameters()}


def load_state_dict(module, state: dict[str, np.ndarray], strict: bool = True, prefix: str = "") -> list[str]:
    """Copy matching entries into ``module``; returns the names that were loaded."""
    loaded = []
    for name, p in module.named_parameters():
        key = prefix + name
        if key not in state:
            if strict:
                raise ConfigError(f"checkpoint is missing entry {key!r}")
            continue
        value = state[key]
        if value.shape != p.data.shape:
            raise ShapeError(f"checkpoint entry {key!r} has shape {value.shape}, model expects {p.data.shape}")
        p.assign(value)
        loaded.append(key)
    return loaded
