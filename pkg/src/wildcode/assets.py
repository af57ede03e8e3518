"""Exact cosine-similarity retrieval over per-(asset, yaw bin) embeddings.

Store file layout (little-endian), see ``docs/formats.md``::

    magic b"WCAE", version u16, reserved u16, dim u32, count u32
    count records of: asset_id u32, category u8, yaw_bin u8, embedding f32[dim]
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from wildcode.rotmath import N_YAW_BINS

CATEGORIES = ("boulder", "bush", "tree", "carnivore", "herbivore", "bird")
ORIENTABLE = frozenset({"carnivore", "herbivore", "bird"})

MAGIC = b"WCAE"
VERSION = 1
_HEADER = struct.Struct("<4sHHII")


class DimensionMismatch(ValueError):
    pass


class EmptyIndex(LookupError):
    pass


@dataclass(frozen=True, eq=False)
class AssetEntry:
    asset_id: int
    category: str
    yaw_bin: int
    embedding: np.ndarray

    @property
    def key(self) -> tuple[int, int]:
        return self.asset_id, self.yaw_bin


class AssetIndex:
    """Brute-force index. Reads work on an immutable snapshot of the
    normalized matrix; writes take a lock and invalidate it."""

    def __init__(self, dim: int):
        self.dim = int(dim)
        self._entries: dict[tuple[int, int], AssetEntry] = {}
        self._category: dict[int, str] = {}
        self._lock = threading.Lock()
        self._snapshot = None

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(list(self._entries.values()))

    def insert(self, e: AssetEntry) -> None:
        emb = np.asarray(e.embedding, dtype=np.float64)
        if emb.shape != (self.dim,):
            raise DimensionMismatch(f"expected dimension {self.dim}, got {emb.shape}")
        if not np.all(np.isfinite(emb)) or not np.any(emb):
            raise ValueError("embedding must be finite and nonzero")
        if e.category not in CATEGORIES:
            raise ValueError(f"unknown category {e.category!r}")
        if not 0 <= e.yaw_bin < N_YAW_BINS:
            raise ValueError(f"yaw bin {e.yaw_bin} out of range")
        with self._lock:
            self._entries[e.key] = AssetEntry(int(e.asset_id), e.category, int(e.yaw_bin), emb)
            self._category[int(e.asset_id)] = e.category
            self._snapshot = None

    def get(self, asset_id: int, yaw_bin: int) -> AssetEntry:
        return self._entries[(asset_id, yaw_bin)]

    def category_of(self, asset_id: int) -> str | None:
        return self._category.get(int(asset_id))

    def _arrays(self):
        snap = self._snapshot
        if snap is None:
            with self._lock:
                entries = sorted(self._entries.values(), key=lambda e: e.key)
                mat = np.stack([e.embedding for e in entries]) if entries else np.zeros((0, self.dim))
                unit = mat / np.linalg.norm(mat, axis=1, keepdims=True)
                ids = np.array([e.asset_id for e in entries], dtype=np.int64)
                bins = np.array([e.yaw_bin for e in entries], dtype=np.int64)
                snap = self._snapshot = (entries, unit, ids, bins)
        return snap

    def similarities(self, q) -> np.ndarray:
        _, unit, _, _ = self._arrays()
        q = np.asarray(q, dtype=np.float64)
        return unit @ (q / np.linalg.norm(q))

    def query(self, q, k: int = 1) -> list[tuple[AssetEntry, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise DimensionMismatch(f"expected dimension {self.dim}, got {q.shape}")
        if not np.any(q):
            raise ValueError("query must be nonzero")
        entries, unit, ids, bins = self._arrays()
        if not entries:
            raise EmptyIndex("query on an empty index")
        sims = unit @ (q / np.linalg.norm(q))
        order = np.lexsort((bins, ids, -sims))[:k]
        return [(entries[i], float(sims[i])) for i in order]

    def save(self, path) -> None:
        entries, _, _, _ = self._arrays()
        rec = _record_dtype(self.dim)
        arr = np.zeros(len(entries), dtype=rec)
        for i, e in enumerate(entries):
            arr[i] = (e.asset_id, CATEGORIES.index(e.category), e.yaw_bin, e.embedding.astype(np.float32))
        Path(path).write_bytes(_HEADER.pack(MAGIC, VERSION, 0, self.dim, len(entries)) + arr.tobytes())

    @classmethod
    def load(cls, path) -> AssetIndex:
        data = Path(path).read_bytes()
        magic, version, _, dim, count = _HEADER.unpack_from(data)
        if magic != MAGIC or version != VERSION:
            raise ValueError(f"{path}: not an asset store (magic {magic!r}, version {version})")
        rec = _record_dtype(dim)
        if len(data) != _HEADER.size + count * rec.itemsize:
            raise ValueError(f"{path}: size does not match header count {count}")
        arr = np.frombuffer(data, dtype=rec, count=count, offset=_HEADER.size)
        idx = cls(dim)
        for r in arr:
            idx.insert(AssetEntry(int(r["asset_id"]), CATEGORIES[r["category"]], int(r["yaw_bin"]),
                                  r["embedding"].astype(np.float64)))
        return idx


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("asset_id", "<u4"), ("category", "u1"), ("yaw_bin", "u1"), ("embedding", "<f4", (dim,))])


def cosine_embedding_loss(pred, target, lam: float = 0.1) -> torch.Tensor:
    """(1 - cos) plus ``lam * (|pred| - |target|)^2``; the norm term pins the
    scale that cosine similarity ignores. Batched inputs are averaged."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    pn = torch.linalg.vector_norm(pred, dim=-1)
    tn = torch.linalg.vector_norm(target, dim=-1)
    cos = (pred * target).sum(-1) / (pn * tn)
    return ((1.0 - cos) + lam * (pn - tn) ** 2).mean()
