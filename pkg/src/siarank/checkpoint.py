"""Weight checkpoint files and flat key=value config files.

Checkpoint layout (little-endian): magic ``SRWT``, version u16, then one
record per tensor: name length u16, UTF-8 name bytes, rank u8, dims u32
each, IEEE-754 32-bit values in row-major order.  Write -> read -> write
is byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"SRWT"
VERSION = 1


def save_weights(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    with Path(path).open("wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<H", VERSION))
        for name, arr in tensors.items():
            data = np.asarray(arr, dtype="<f4")  # tobytes() serializes C-order
            encoded = name.encode("utf-8")
            handle.write(struct.pack("<H", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                handle.write(struct.pack("<I", dim))
            handle.write(data.tobytes())


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a weight checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    offset = 6
    tensors: dict[str, np.ndarray] = {}
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        tensors[name] = values.reshape(dims).copy()
    return tensors


def write_kv(path: str | Path, values: dict[str, object]) -> None:
    """Write a flat key=value text file; values are stringified with repr-safe text."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        for key, value in values.items():
            text = str(value)
            if "\n" in text or "=" in str(key):
                raise DataError(f"key/value not representable in kv file: {key!r}")
            handle.write(f"{key}={text}\n")


def read_kv(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    with Path(path).open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path} line {line_no}: expected key=value")
            key, _, value = line.partition("=")
            values[key] = value
    return values
