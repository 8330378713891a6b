"""Dense local feature sources.

The synthetic world replaces a neural extractor: the ground is split into
square cells of ``texture_scale`` meters, each carrying a feature vector that
mixes a shared dictionary atom with a cell-unique component. A footprint is
sampled on a regular patch grid and every patch feature is the bilinear blend
of the surrounding cell vectors, so overlapping footprints share features.

Cell vectors come from a counter-based hash of (seed, stream, i, j, k), which
makes generation a pure function of the world and the footprint.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .geometry import GeoPoint

FEATURE_MAGIC = b"FLF1"

_STREAM_ATOM = 1
_STREAM_UNIQUE = 2
_STREAM_ZONE = 3
_STREAM_NOISE = 4

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


class Style(enum.Enum):
    SATELLITE = "satellite"
    CAMERA = "camera"


@dataclass(frozen=True, eq=False)
class LocalFeatureSet:
    features: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        f = np.asarray(self.features)
        if f.ndim != 2 or f.shape[0] == 0 or f.shape[1] == 0:
            raise ValueError("feature set must be a non-empty (n, d) array")
        object.__setattr__(self, "features", f)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class RepetitionZone:
    """Disc of near-identical appearance (fields, forest, ...)."""

    center: GeoPoint
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("repetition zone radius must be positive")


def _splitmix(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _hash(*keys) -> np.ndarray:
    """Broadcasted 64-bit hash of integer key arrays."""
    arrays = np.broadcast_arrays(*[np.asarray(k, dtype=np.int64) for k in keys])
    h = np.zeros(arrays[0].shape, dtype=np.uint64)
    for a in arrays:
        h = _splitmix(h ^ a.astype(np.uint64))
    return h


def _hash_normal(*keys) -> np.ndarray:
    """Standard normal deviates keyed by integer arrays (Box-Muller on two hashes)."""
    h1 = _hash(*keys, 0)
    h2 = _hash(*keys, 1)
    u1 = ((h1 >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0**53
    u2 = (h2 >> np.uint64(11)).astype(np.float64) / 2.0**53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    seed: int = 0
    texture_scale: float = 10.0
    n_basis: int = 24
    distinctiveness: float = 0.5
    repetition_zones: tuple[RepetitionZone, ...] = ()
    dim: int = 64
    patch_grid: int = 16
    style_strength: float = 0.25
    style_bias: float = 0.05
    _atoms: np.ndarray = field(init=False, repr=False)
    _style_rot: np.ndarray = field(init=False, repr=False)
    _style_shift: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.distinctiveness <= 1.0:
            raise ValueError("distinctiveness must be in [0, 1]")
        if not self.texture_scale > 0:
            raise ValueError("texture_scale must be positive")
        if self.n_basis < 1 or self.dim < 2 or self.patch_grid < 1:
            raise ValueError("n_basis, dim and patch_grid must be positive")
        object.__setattr__(self, "repetition_zones", tuple(self.repetition_zones))
        k = np.arange(self.dim)
        atoms = _normalize_rows(_hash_normal(self.seed, _STREAM_ATOM, np.arange(self.n_basis)[:, None], 0, k))
        gen = np.random.default_rng([self.seed, 7])
        g = gen.standard_normal((self.dim, self.dim))
        skew = (g - g.T) / math.sqrt(2.0 * self.dim)
        rot = expm(self.style_strength * skew)
        shift = self.style_bias * _normalize_rows(gen.standard_normal(self.dim))
        for arr in (atoms, rot, shift):
            arr.setflags(write=False)
        object.__setattr__(self, "_atoms", atoms)
        object.__setattr__(self, "_style_rot", rot)
        object.__setattr__(self, "_style_shift", shift)

    @property
    def features_per_image(self) -> int:
        return self.patch_grid**2

    def style_map(self, f: np.ndarray) -> np.ndarray:
        """Fixed orthogonal map plus bias taking satellite features to the camera domain."""
        return f @ self._style_rot.T + self._style_shift

    def zone_index(self, xy: np.ndarray) -> np.ndarray:
        """Index of the first repetition zone containing each point, or -1."""
        xy = np.atleast_2d(xy)
        out = np.full(len(xy), -1, dtype=np.int64)
        for z, zone in reversed(list(enumerate(self.repetition_zones))):
            d = np.hypot(xy[:, 0] - zone.center.easting, xy[:, 1] - zone.center.northing)
            out[d <= zone.radius] = z
        return out

    def cell_vectors(self, ci: np.ndarray, cj: np.ndarray) -> np.ndarray:
        """Feature vectors of ground cells (ci, cj); returns (..., dim)."""
        ci = np.asarray(ci, dtype=np.int64)
        cj = np.asarray(cj, dtype=np.int64)
        k = np.arange(self.dim)
        atom_idx = _hash(self.seed, _STREAM_ATOM, ci, cj) % np.uint64(self.n_basis)
        atom = self._atoms[atom_idx.astype(np.int64)]
        unique = _normalize_rows(_hash_normal(self.seed, _STREAM_UNIQUE, ci[..., None], cj[..., None], k))
        a = self.distinctiveness
        v = _normalize_rows((1.0 - a) * atom + a * unique)
        if self.repetition_zones:
            centers = (np.stack([ci, cj], axis=-1).reshape(-1, 2) + 0.5) * self.texture_scale
            zone = self.zone_index(centers).reshape(ci.shape)
            inside = zone >= 0
            if np.any(inside):
                zi, zj, zz = ci[inside], cj[inside], zone[inside]
                texture = _hash_normal(self.seed, _STREAM_ZONE, zz[:, None], zi[:, None] % 2, zj[:, None] % 2, k)
                v[inside] = _normalize_rows(texture)
        return v

    def sample_points(self, center: GeoPoint, fov: float) -> np.ndarray:
        n = self.patch_grid
        offs = (np.arange(n) + 0.5) * (fov / n) - fov / 2.0
        gx, gy = np.meshgrid(center.easting + offs, center.northing + offs, indexing="xy")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def clean_features(self, center: GeoPoint, fov: float) -> np.ndarray:
        """Noise-free satellite-domain features of a footprint, float64."""
        p = self.sample_points(center, fov) / self.texture_scale - 0.5
        i0 = np.floor(p).astype(np.int64)
        frac = p - i0
        lo = i0.min(axis=0)
        hi = i0.max(axis=0) + 1
        ii, jj = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing="ij")
        table = self.cell_vectors(ii, jj)
        li, lj = i0[:, 0] - lo[0], i0[:, 1] - lo[1]
        fx, fy = frac[:, :1], frac[:, 1:]
        return (
            (1 - fx) * (1 - fy) * table[li, lj]
            + fx * (1 - fy) * table[li + 1, lj]
            + (1 - fx) * fy * table[li, lj + 1]
            + fx * fy * table[li + 1, lj + 1]
        )


def synth_features(
    world: SyntheticWorld,
    footprint_center: GeoPoint,
    fov: float,
    style: Style = Style.SATELLITE,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> LocalFeatureSet:
    """Features seen by a nadir image of side ``fov`` centered at ``footprint_center``.

    Noise is drawn from ``rng`` when given; otherwise from a generator keyed
    by the footprint, so repeated calls stay reproducible.
    """
    if not fov > 0:
        raise ValueError("fov must be positive")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    f = world.clean_features(footprint_center, fov)
    if style is Style.CAMERA:
        f = world.style_map(f)
    if noise_sigma > 0:
        if rng is None:
            key = struct.unpack("<2q", struct.pack("<2d", footprint_center.easting, footprint_center.northing))
            rng = np.random.default_rng([world.seed, _STREAM_NOISE, key[0] & 0xFFFFFFFF, key[1] & 0xFFFFFFFF])
        f = f + noise_sigma * rng.standard_normal(f.shape)
    source = f"{style.value}@{footprint_center.easting:.3f},{footprint_center.northing:.3f}"
    return LocalFeatureSet(f.astype(np.float32), source)


def save_features(path, fs: LocalFeatureSet) -> None:
    f = np.ascontiguousarray(fs.features, dtype="<f4")
    n, d = f.shape
    with Path(path).open("wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", d, n))
        fh.write(f.tobytes())


def load_features(path) -> LocalFeatureSet:
    """Read a ``FLF1`` feature file: magic, u32 dim, u32 count, f32 rows."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) == 0:
        raise ValueError(f"{path}: empty feature file")
    if len(raw) < 12 or raw[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: malformed header (expected FLF1 magic)")
    d, n = struct.unpack_from("<II", raw, 4)
    if d == 0 or n == 0:
        raise ValueError(f"{path}: header declares no features (d={d}, n={n})")
    body = raw[12:]
    if len(body) != 4 * n * d:
        raise ValueError(f"{path}: payload holds {len(body)} bytes, header implies {4 * n * d}")
    f = np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float32)
    return LocalFeatureSet(f, path.stem)


@dataclass(frozen=True)
class SyntheticTileProvider:
    """Feature source for database tiles: satellite style, no noise."""

    world: SyntheticWorld

    def __call__(self, tile) -> LocalFeatureSet:
        return synth_features(self.world, tile.center, tile.fov, Style.SATELLITE, 0.0)


@dataclass(frozen=True)
class FeatureDirectoryProvider:
    """Loads ``<directory>/<tile_id>.flf`` for each tile."""

    directory: Path

    def __call__(self, tile) -> LocalFeatureSet:
        return load_features(Path(self.directory) / f"{tile.tile_id}.flf")
