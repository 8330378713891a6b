"""Descriptor database over reference tiles with exact top-K search."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .features import LocalFeatureSet
from .geometry import GeoPoint
from .tiles import TileGrid, TileRecord
from .vlad import VladDescriptor, Vocabulary, encode

DB_MAGIC = b"FLDB"
DEFAULT_TOP_K = 5


class FingerprintMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Match:
    tile_id: int
    similarity: float
    position: GeoPoint


@dataclass(frozen=True)
class RetrievalResult:
    matches: tuple[Match, ...]
    query_id: object = None

    def __len__(self) -> int:
        return len(self.matches)

    @property
    def tile_ids(self) -> list[int]:
        return [m.tile_id for m in self.matches]

    def positions(self) -> np.ndarray:
        return np.array([m.position.as_array() for m in self.matches]).reshape(-1, 2)

    def similarities(self) -> np.ndarray:
        return np.array([m.similarity for m in self.matches])


@dataclass(frozen=True, eq=False)
class DescriptorDb:
    tile_ids: np.ndarray
    positions: np.ndarray
    descriptors: np.ndarray
    n_c: int
    d: int
    vocab_fingerprint: int

    def __post_init__(self):
        ids = np.asarray(self.tile_ids, dtype=np.int64).reshape(-1)
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        desc = np.asarray(self.descriptors, dtype=np.float32).astype(np.float64)
        if len(ids) < 1:
            raise ValueError("descriptor database is empty")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("tile ids must be unique")
        if desc.shape != (len(ids), self.n_c * self.d) or len(pos) != len(ids):
            raise ValueError("database arrays have inconsistent shapes")
        for a in (ids, pos, desc):
            a.setflags(write=False)
        object.__setattr__(self, "tile_ids", ids)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "descriptors", desc)

    def __len__(self) -> int:
        return len(self.tile_ids)

    def descriptor(self, row: int) -> VladDescriptor:
        return VladDescriptor(self.descriptors[row], self.n_c, self.d, self.vocab_fingerprint)

    def row_of(self, tile_id: int) -> int:
        hit = np.nonzero(self.tile_ids == tile_id)[0]
        if not len(hit):
            raise KeyError(tile_id)
        return int(hit[0])


def db_build(
    grid: TileGrid, vocab: Vocabulary, provider: Callable[[TileRecord], LocalFeatureSet]
) -> DescriptorDb:
    """Encode one descriptor per tile, in manifest order."""
    if len(grid) == 0:
        raise ValueError("grid has no tiles")
    rows = []
    for tile in grid.tiles:
        try:
            rows.append(encode(provider(tile), vocab).values)
        except Exception as exc:
            raise RuntimeError(f"feature provider failed for tile {tile.tile_id}: {exc}") from exc
    return DescriptorDb(grid.tile_ids, grid.centers, np.array(rows), vocab.n_c, vocab.d, vocab.fingerprint)


def _check(db: DescriptorDb, q: VladDescriptor) -> None:
    if len(db) == 0:
        raise ValueError("empty database")
    if q.vocab_fingerprint is not None and q.vocab_fingerprint != db.vocab_fingerprint:
        raise FingerprintMismatch(
            f"query vocabulary {q.vocab_fingerprint:#018x} != database vocabulary {db.vocab_fingerprint:#018x}"
        )
    if (q.n_c, q.d) != (db.n_c, db.d):
        raise ValueError("query descriptor shape does not match the database")


def ranking(db: DescriptorDb, q: VladDescriptor) -> tuple[np.ndarray, np.ndarray]:
    """Full ranking (row order, similarities) by descending similarity, ties by tile id."""
    _check(db, q)
    sims = db.descriptors @ q.values if not q.degenerate else np.zeros(len(db))
    order = np.lexsort((db.tile_ids, -sims))
    return order, sims


def query_topk(db: DescriptorDb, q: VladDescriptor, k: int = DEFAULT_TOP_K, query_id=None) -> RetrievalResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    order, sims = ranking(db, q)
    matches = tuple(
        Match(int(db.tile_ids[r]), float(sims[r]), GeoPoint(float(db.positions[r, 0]), float(db.positions[r, 1])))
        for r in order[:k]
    )
    return RetrievalResult(matches, query_id)


_ENTRY_HEAD = struct.Struct("<Idd")


def save_db(path, db: DescriptorDb) -> None:
    with Path(path).open("wb") as fh:
        fh.write(DB_MAGIC + struct.pack("<IIQI", db.n_c, db.d, db.vocab_fingerprint, len(db)))
        for tid, (e, n), desc in zip(db.tile_ids, db.positions, db.descriptors):
            fh.write(_ENTRY_HEAD.pack(int(tid), float(e), float(n)))
            fh.write(np.ascontiguousarray(desc, dtype="<f4").tobytes())


def load_db(path) -> DescriptorDb:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 24 or raw[:4] != DB_MAGIC:
        raise ValueError(f"{path}: not a descriptor database (expected FLDB magic)")
    n_c, d, fp, count = struct.unpack_from("<IIQI", raw, 4)
    entry = _ENTRY_HEAD.size + 4 * n_c * d
    if len(raw) != 24 + count * entry:
        raise ValueError(f"{path}: size does not match {count} entries of n_c={n_c}, d={d}")
    ids, pos, desc = [], [], []
    off = 24
    for _ in range(count):
        tid, e, n = _ENTRY_HEAD.unpack_from(raw, off)
        off += _ENTRY_HEAD.size
        desc.append(np.frombuffer(raw, dtype="<f4", count=n_c * d, offset=off))
        off += 4 * n_c * d
        ids.append(tid)
        pos.append((e, n))
    return DescriptorDb(np.array(ids), np.array(pos), np.array(desc), n_c, d, fp)
