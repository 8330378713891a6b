"""Georeferenced reference tile lattice standing in for the satellite database."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import GeoPoint

# Area of interest: 400 m x 350 m ~ 140,000 m^2.
DEFAULT_EXTENT = (400.0, 350.0)
DEFAULT_SPACING = 40.0
DEFAULT_FOV = 60.0

MANIFEST_HEADER = ["tile_id", "easting", "northing", "fov_m"]


@dataclass(frozen=True)
class TileRecord:
    tile_id: int
    center: GeoPoint
    fov: float

    def __post_init__(self):
        if not self.fov > 0:
            raise ValueError(f"tile {self.tile_id}: fov must be positive")


@dataclass(frozen=True, eq=False)
class TileGrid:
    tiles: tuple[TileRecord, ...]
    spacing: float
    origin: GeoPoint
    extent: tuple[float, float]

    def __post_init__(self):
        ids = [t.tile_id for t in self.tiles]
        if len(set(ids)) != len(ids):
            raise ValueError("tile ids must be unique")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        object.__setattr__(self, "tiles", tuple(self.tiles))
        centers = np.array([t.center.as_array() for t in self.tiles], dtype=float).reshape(-1, 2)
        centers.setflags(write=False)
        object.__setattr__(self, "_centers", centers)
        tid = np.array(ids, dtype=np.int64)
        tid.setflags(write=False)
        object.__setattr__(self, "_ids", tid)

    def __len__(self) -> int:
        return len(self.tiles)

    @property
    def centers(self) -> np.ndarray:
        return self._centers

    @property
    def tile_ids(self) -> np.ndarray:
        return self._ids

    @property
    def fov(self) -> float:
        return self.tiles[0].fov if self.tiles else 0.0

    def by_id(self, tile_id: int) -> TileRecord:
        for t in self.tiles:
            if t.tile_id == tile_id:
                return t
        raise KeyError(tile_id)

    def contains(self, q: GeoPoint) -> bool:
        x0, y0 = self.origin.easting, self.origin.northing
        return x0 <= q.easting <= x0 + self.extent[0] and y0 <= q.northing <= y0 + self.extent[1]


def build_grid(
    origin: GeoPoint = GeoPoint(0.0, 0.0),
    extent: tuple[float, float] = DEFAULT_EXTENT,
    spacing: float = DEFAULT_SPACING,
    fov: float = DEFAULT_FOV,
) -> TileGrid:
    """Lay tiles on ``origin + (i*spacing, j*spacing)``; ids are row-major (rows go north)."""
    ex, ey = float(extent[0]), float(extent[1])
    if not (ex > 0 and ey > 0):
        raise ValueError(f"extent must be positive, got {extent}")
    if not spacing > 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    if not fov > 0:
        raise ValueError(f"fov must be positive, got {fov}")
    nx = int(math.floor(ex / spacing)) + 1
    ny = int(math.floor(ey / spacing)) + 1
    tiles = []
    for j in range(ny):
        for i in range(nx):
            center = GeoPoint(origin.easting + i * spacing, origin.northing + j * spacing)
            tiles.append(TileRecord(j * nx + i, center, float(fov)))
    return TileGrid(tuple(tiles), float(spacing), origin, (ex, ey))


def overlap_fraction(grid: TileGrid) -> float:
    """Per-axis overlap between neighbouring tiles; 0 when tiles are disjoint."""
    fov = grid.fov
    if fov <= grid.spacing:
        return 0.0
    return (fov - grid.spacing) / fov


def ground_truth_neighbors(grid: TileGrid, q: GeoPoint, n: int) -> list[int]:
    """The ``n`` tile ids closest to ``q``; ties go to the lower tile id."""
    if len(grid) == 0:
        raise ValueError("empty grid")
    if not 1 <= n <= len(grid):
        raise ValueError(f"n must be in [1, {len(grid)}], got {n}")
    d = np.hypot(grid.centers[:, 0] - q.easting, grid.centers[:, 1] - q.northing)
    order = np.lexsort((grid.tile_ids, d))
    return [int(i) for i in grid.tile_ids[order[:n]]]


def positives_within_radius(grid: TileGrid, q: GeoPoint, radius: float) -> list[int]:
    """Tile ids whose centers lie within ``radius`` of ``q``, nearest first."""
    d = np.hypot(grid.centers[:, 0] - q.easting, grid.centers[:, 1] - q.northing)
    order = np.lexsort((grid.tile_ids, d))
    return [int(grid.tile_ids[i]) for i in order if d[i] <= radius]


def nearest_tile_error_bound(grid: TileGrid) -> float:
    """Per-axis reference position error bound, half the tile spacing."""
    return grid.spacing / 2.0


def diagonal_error_bound(grid: TileGrid) -> float:
    """Euclidean worst case on a square lattice, spacing * sqrt(2) / 2."""
    return grid.spacing * math.sqrt(2.0) / 2.0


def write_manifest(path, grid: TileGrid) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for t in grid.tiles:
            w.writerow([t.tile_id, repr(t.center.easting), repr(t.center.northing), repr(t.fov)])


def read_manifest(path) -> TileGrid:
    """Load a manifest; spacing, origin and extent are inferred from the centers."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"tile manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ValueError(f"{path}: expected header {','.join(MANIFEST_HEADER)}")
        tiles = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 columns")
            tiles.append(TileRecord(int(row[0]), GeoPoint(float(row[1]), float(row[2])), float(row[3])))
    if not tiles:
        raise ValueError(f"{path}: manifest has no tiles")
    c = np.array([t.center.as_array() for t in tiles])
    steps = []
    for axis in range(2):
        u = np.unique(c[:, axis])
        if len(u) > 1:
            steps.append(float(np.min(np.diff(u))))
    spacing = min(steps) if steps else tiles[0].fov
    lo, hi = c.min(axis=0), c.max(axis=0)
    extent = (max(float(hi[0] - lo[0]), spacing), max(float(hi[1] - lo[1]), spacing))
    return TileGrid(tuple(tiles), spacing, GeoPoint(float(lo[0]), float(lo[1])), extent)
