"""Precomputed document embedding store with optional uint8 quantization.

File layout (little-endian): magic ``DRSE``, version u16, dtype u8
(0 = float32, 1 = quantized uint8), dim u32, count u64, then per entry:
key length u32, UTF-8 key bytes, payload.  Float32 payload is dim*4 raw
values; quantized payload is scale f32, zero_point u8, then dim code
bytes.  Entries are written in sorted key order so precomputation is
independent of the parallelism degree.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import DatasetSplit
from .errors import DataError, MissingKeyError

MAGIC = b"DRSE"
VERSION = 1
DTYPE_F32 = 0
DTYPE_QU8 = 1

SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int


def quantize_vector(x: np.ndarray) -> tuple[np.ndarray, QuantParams]:
    """Affine min/max quantization of one vector to uint8 codes.

    A constant vector degenerates to the floored scale with every code at
    the zero point.
    """
    lo = float(x.min())
    hi = float(x.max())
    scale = max((hi - lo) / 255.0, SCALE_FLOOR)
    zero_point = int(np.clip(round(-lo / scale), 0, 255))
    if hi == lo:
        codes = np.full(x.shape, zero_point, dtype=np.uint8)
    else:
        codes = np.clip(np.rint(x / scale) + zero_point, 0, 255).astype(np.uint8)
    return codes, QuantParams(scale=scale, zero_point=zero_point)


def dequantize_vector(codes: np.ndarray, params: QuantParams) -> np.ndarray:
    return (codes.astype(np.float32) - np.float32(params.zero_point)) * np.float32(params.scale)


class EmbeddingStore:
    """Immutable map from document key (URL) to an embedding vector."""

    def __init__(self, dim: int, quantized: bool = False):
        self.dim = dim
        self.quantized = quantized
        self._vectors: dict[str, np.ndarray] = {}
        self._params: dict[str, QuantParams] = {}

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, key: str) -> bool:
        return key in self._vectors

    def keys(self) -> list[str]:
        return list(self._vectors)

    def put(self, key: str, vector: np.ndarray) -> None:
        if self.quantized:
            raise DataError("cannot put raw vectors into a quantized store")
        vector = np.asarray(vector, dtype=np.float32)
        if vector.shape != (self.dim,):
            raise DataError(f"vector shape {vector.shape} does not match dim {self.dim}")
        self._vectors[key] = vector

    def put_quantized(self, key: str, codes: np.ndarray, params: QuantParams) -> None:
        if not self.quantized:
            raise DataError("cannot put codes into a float32 store")
        if codes.shape != (self.dim,) or codes.dtype != np.uint8:
            raise DataError(f"bad quantized payload for key {key!r}")
        self._vectors[key] = codes
        self._params[key] = params

    def lookup(self, key: str) -> np.ndarray:
        """Stored vector, dequantized if needed; missing keys raise."""
        try:
            payload = self._vectors[key]
        except KeyError:
            raise MissingKeyError(f"document key not in store: {key!r}") from None
        if self.quantized:
            return dequantize_vector(payload, self._params[key])
        return payload

    def get(self, key: str, default=None):
        return self.lookup(key) if key in self._vectors else default

    def raw(self, key: str) -> tuple[np.ndarray, QuantParams]:
        """Quantized codes plus parameters, for integer-domain scoring."""
        if not self.quantized:
            raise DataError("raw() is only available on quantized stores")
        if key not in self._vectors:
            raise MissingKeyError(f"document key not in store: {key!r}")
        return self._vectors[key], self._params[key]

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        with Path(path).open("wb") as handle:
            handle.write(MAGIC)
            handle.write(struct.pack("<HBIQ", VERSION,
                                     DTYPE_QU8 if self.quantized else DTYPE_F32,
                                     self.dim, len(self._vectors)))
            for key in self._vectors:
                encoded = key.encode("utf-8")
                handle.write(struct.pack("<I", len(encoded)))
                handle.write(encoded)
                if self.quantized:
                    params = self._params[key]
                    handle.write(struct.pack("<fB", params.scale, params.zero_point))
                    handle.write(self._vectors[key].tobytes())
                else:
                    handle.write(self._vectors[key].astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        path = Path(path)
        blob = path.read_bytes()
        if blob[:4] != MAGIC:
            raise DataError(f"{path}: not an embedding store (bad magic)")
        version, dtype, dim, count = struct.unpack_from("<HBIQ", blob, 4)
        if version != VERSION:
            raise DataError(f"{path}: unsupported store version {version}")
        if dtype not in (DTYPE_F32, DTYPE_QU8):
            raise DataError(f"{path}: unknown dtype byte {dtype}")
        store = cls(dim=dim, quantized=dtype == DTYPE_QU8)
        offset = 4 + 15
        for _ in range(count):
            (key_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            key = blob[offset : offset + key_len].decode("utf-8")
            offset += key_len
            if store.quantized:
                scale, zero_point = struct.unpack_from("<fB", blob, offset)
                offset += 5
                codes = np.frombuffer(blob, dtype=np.uint8, count=dim, offset=offset).copy()
                offset += dim
                store.put_quantized(key, codes, QuantParams(scale, zero_point))
            else:
                values = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).copy()
                offset += 4 * dim
                store.put(key, values)
        return store


def unique_docs(records) -> dict[str, str]:
    """Map url -> doc_repr; duplicate keys with differing text are an error."""
    docs: dict[str, str] = {}
    conflicts: list[str] = []
    for rec in records:
        existing = docs.get(rec.url_raw)
        if existing is None:
            docs[rec.url_raw] = rec.doc_repr
        elif existing != rec.doc_repr:
            conflicts.append(rec.url_raw)
    if conflicts:
        raise DataError(
            "duplicate keys with differing document text: "
            + ", ".join(sorted(set(conflicts))[:10])
        )
    return docs


def precompute(model, docs: DatasetSplit | list, parallelism: int = 1) -> EmbeddingStore:
    """Embed every unique document of a split (or record list) into a store.

    The result is independent of ``parallelism``: keys are sorted and each
    document is embedded in isolation.
    """
    if parallelism < 1:
        raise DataError("parallelism must be >= 1")
    records = docs.records if isinstance(docs, DatasetSplit) else docs
    doc_map = unique_docs(records)
    keys = sorted(doc_map)
    store = EmbeddingStore(dim=model.cfg.hidden, quantized=False)
    if not keys:
        return store
    with threadpool_limits(limits=1):  # keep per-doc math identical at any fan-out
        if parallelism == 1:
            vectors = [model.embed(doc_map[k]) for k in keys]
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                vectors = list(pool.map(lambda k: model.embed(doc_map[k]), keys))
    for key, vec in zip(keys, vectors):
        store.put(key, vec)
    return store


def quantize_store(store: EmbeddingStore) -> EmbeddingStore:
    """Per-vector affine quantization of a float32 store to uint8."""
    if store.quantized:
        raise DataError("store is already quantized")
    if len(store) == 0:
        raise DataError("cannot quantize an empty store")
    out = EmbeddingStore(dim=store.dim, quantized=True)
    for key in store.keys():
        codes, params = quantize_vector(store.lookup(key))
        out.put_quantized(key, codes, params)
    return out
