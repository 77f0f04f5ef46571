"""Frozen-encoder feature stores, two-stream fusion and similarity retrieval.

Feature files ("MSEF", little-endian, no padding)::

    magic  b"MSEF"
    u8     version (1)
    u16    encoder-name byte length, then UTF-8 name
    u32    record count
    u32    dim
    per record: u16 id byte length, UTF-8 id, dim x f32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import DropoutSpec, LinearLayer, apply_dropout

__all__ = [
    "MSEF_MAGIC",
    "MSEF_VERSION",
    "FeatureFormatError",
    "FeatureStore",
    "FusedFeature",
    "load_features",
    "save_features",
    "encode_features",
    "decode_features",
    "fuse",
    "fuse_vectors",
    "cosine_similarity",
    "nearest_neighbors",
]

MSEF_MAGIC = b"MSEF"
MSEF_VERSION = 1


class FeatureFormatError(ValueError):
    pass


@dataclass
class FeatureStore:
    encoder_name: str
    dim: int
    records: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError(f"feature dim must be positive, got {self.dim}")
        for image_id, vec in self.records.items():
            vec = np.asarray(vec, dtype=np.float32)
            if vec.shape != (self.dim,):
                raise ValueError(f"record {image_id!r} has shape {vec.shape}, expected ({self.dim},)")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"record {image_id!r} has non-finite entries")
            self.records[image_id] = vec

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.records

    def __getitem__(self, image_id: str) -> np.ndarray:
        return self.records[image_id]

    def matrix(self, image_ids: Sequence[str]) -> np.ndarray:
        """Stack the vectors of ``image_ids`` into float64 rows."""
        return np.stack([self.records[i] for i in image_ids]).astype(np.float64)


@dataclass
class FusedFeature:
    image_id: str
    projected: Tensor


def encode_features(store: FeatureStore) -> bytes:
    name = store.encoder_name.encode("utf-8")
    parts = [MSEF_MAGIC, struct.pack("<BH", MSEF_VERSION, len(name)), name,
             struct.pack("<II", len(store.records), store.dim)]
    for image_id, vec in store.records.items():
        raw = image_id.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(np.asarray(vec, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_features(data: bytes) -> FeatureStore:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FeatureFormatError(f"truncated file: need {n} bytes for {what} at offset {pos}, "
                                     f"only {len(data) - pos} left")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MSEF_MAGIC:
        raise FeatureFormatError("bad magic at offset 0, not an MSEF feature file")
    version, name_len = struct.unpack("<BH", take(3, "header"))
    if version != MSEF_VERSION:
        raise FeatureFormatError(f"unsupported MSEF version {version} at offset 4")
    name = take(name_len, "encoder name").decode("utf-8")
    count, dim = struct.unpack("<II", take(8, "record count and dim"))
    if dim == 0:
        raise FeatureFormatError(f"dim is zero at offset {pos - 4}")
    records: dict[str, np.ndarray] = {}
    for idx in range(count):
        start = pos
        (id_len,) = struct.unpack("<H", take(2, f"record {idx} id length"))
        image_id = take(id_len, f"record {idx} id").decode("utf-8")
        vec = np.frombuffer(take(4 * dim, f"record {idx} payload"), dtype="<f4").astype(np.float32)
        if image_id in records:
            raise FeatureFormatError(f"duplicate id {image_id!r} in record {idx} at offset {start}")
        if not np.all(np.isfinite(vec)):
            raise FeatureFormatError(f"non-finite value in record {idx} ({image_id!r}) at offset {start}")
        records[image_id] = vec
    if pos != len(data):
        raise FeatureFormatError(f"{len(data) - pos} trailing bytes after offset {pos}")
    return FeatureStore(name, dim, records)


def load_features(path) -> FeatureStore:
    return decode_features(Path(path).read_bytes())


def save_features(store: FeatureStore, path) -> None:
    Path(path).write_bytes(encode_features(store))


def fuse_vectors(l1: LinearLayer, vec_a: np.ndarray, vec_b: np.ndarray,
                 dropout: DropoutSpec | None = None) -> Tensor:
    """Concatenate the two encoder vectors (rows = images) and project with L1."""
    va = Tensor._wrap(np.atleast_2d(np.asarray(vec_a, dtype=np.float64)))
    vb = Tensor._wrap(np.atleast_2d(np.asarray(vec_b, dtype=np.float64)))
    joined = apply_dropout(dropout, ad.concat([va, vb], axis=1))
    return l1(joined)


def fuse(a: FeatureStore, b: FeatureStore, l1: LinearLayer, dropout: DropoutSpec | None,
         image_id: str) -> FusedFeature:
    if image_id not in a:
        raise KeyError(f"image {image_id!r} missing from stream A ({a.encoder_name})")
    if image_id not in b:
        raise KeyError(f"image {image_id!r} missing from stream B ({b.encoder_name})")
    if l1.in_dim != a.dim + b.dim:
        raise ValueError(f"L1 expects width {l1.in_dim}, streams give {a.dim} + {b.dim}")
    return FusedFeature(image_id, fuse_vectors(l1, a[image_id], b[image_id], dropout))


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ValueError(f"cosine: length mismatch {u.shape[0]} vs {v.shape[0]}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def nearest_neighbors(query: FusedFeature, pool: Sequence[FusedFeature], k: int = 4) -> list[str]:
    """Top-``k`` pool ids by cosine similarity to ``query`` (query's own id excluded).

    Ties go to the lexicographically smaller id.
    """
    candidates = [p for p in pool if p.image_id != query.image_id]
    if k > len(candidates):
        raise ValueError(f"asked for {k} neighbours from a pool of {len(candidates)}")
    q = query.projected.values
    scored = [(-cosine_similarity(q, p.projected.values), p.image_id) for p in candidates]
    scored.sort()
    return [image_id for _, image_id in scored[:k]]
