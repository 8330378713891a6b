"""Geometric value types, frame transforms and absolute trajectory error.

Easting/Northing are treated as a local planar metric frame (UTM-style).
Everything here is an immutable value or a pure function.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9
UNIT_TOL = 1e-9


@dataclass(frozen=True)
class GeoPoint:
    """Earth-fixed planar position in meters."""

    easting: float
    northing: float

    def __post_init__(self):
        if not (math.isfinite(self.easting) and math.isfinite(self.northing)):
            raise ValueError(f"GeoPoint components must be finite, got {self!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.easting, self.northing], dtype=float)

    def lifted(self) -> np.ndarray:
        """3-vector with zero vertical component."""
        return np.array([self.easting, self.northing, 0.0])

    def distance_to(self, other: GeoPoint) -> float:
        return math.hypot(self.easting - other.easting, self.northing - other.northing)

    @classmethod
    def from_array(cls, xy) -> GeoPoint:
        return cls(float(xy[0]), float(xy[1]))


def _unit(v, tol: float = UNIT_TOL) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(-1)
    if abs(np.linalg.norm(v) - 1.0) > tol:
        raise ValueError(f"expected a unit vector, got norm {np.linalg.norm(v)!r}")
    return v


@dataclass(frozen=True, eq=False)
class OdomPose:
    """Timestamped pose in the local odometry frame.

    ``orientation`` is a (w, x, y, z) unit quaternion rotating body to odometry.
    """

    timestamp: float
    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        quat = _unit(self.orientation)
        if quat.shape != (4,):
            raise ValueError("orientation must be a 4-element quaternion")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", quat)

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.orientation
        return Rotation.from_quat([x, y, z, w]).as_matrix()


class Frame(enum.Enum):
    LOCAL = "local"
    WORLD = "world"


@dataclass(frozen=True, eq=False)
class GravityVector:
    direction: np.ndarray
    frame: Frame = Frame.WORLD

    def __post_init__(self):
        d = _unit(self.direction)
        if d.shape != (3,):
            raise ValueError("gravity direction must be a 3-vector")
        object.__setattr__(self, "direction", d)

    @classmethod
    def down(cls, frame: Frame = Frame.WORLD) -> GravityVector:
        return cls(np.array([0.0, 0.0, -1.0]), frame)


def is_rotation(m: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    m = np.asarray(m, dtype=float)
    return (
        m.shape == (3, 3)
        and np.allclose(m @ m.T, np.eye(3), atol=tol, rtol=0.0)
        and abs(np.linalg.det(m) - 1.0) <= tol
    )


@dataclass(frozen=True, eq=False)
class AnchorTransform:
    """Rigid transform taking odometry-frame points into the Earth frame."""

    rotation: np.ndarray
    translation: np.ndarray
    residual_rms: float = 0.0
    degenerate: bool = False

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float)
        if not is_rotation(rot):
            raise ValueError("rotation is not in SO(3)")
        rot.setflags(write=False)
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> AnchorTransform:
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> AnchorTransform:
        rt = self.rotation.T
        return AnchorTransform(rt, -rt @ self.translation, self.residual_rms, self.degenerate)

    def yaw(self) -> float:
        """Heading of the rotation about the world vertical axis."""
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def as_matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out


def apply_transform(t: AnchorTransform, p) -> np.ndarray:
    """Return ``R p + t``. Accepts a single 3-vector or an (n, 3) array."""
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return t.rotation @ p + t.translation
    return p @ t.rotation.T + t.translation


def yaw_rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-ordered positions, optionally with (w, x, y, z) orientations.

    ``positions`` is (n, 2) for Earth-fixed tracks and (n, 3) for odometry.
    """

    timestamps: np.ndarray
    positions: np.ndarray
    orientations: np.ndarray | None = None

    def __post_init__(self):
        ts = np.array(self.timestamps, dtype=float).reshape(-1)
        pos = np.array(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] not in (2, 3):
            raise ValueError("positions must be (n, 2) or (n, 3)")
        if len(ts) < 1 or len(ts) != len(pos):
            raise ValueError("trajectory needs >= 1 sample and matching lengths")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        ts.setflags(write=False)
        pos.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "positions", pos)
        if self.orientations is not None:
            q = np.array(self.orientations, dtype=float)
            if q.shape != (len(ts), 4):
                raise ValueError("orientations must be (n, 4)")
            if np.any(np.abs(np.linalg.norm(q, axis=1) - 1.0) > UNIT_TOL):
                raise ValueError("orientations must be unit quaternions")
            q.setflags(write=False)
            object.__setattr__(self, "orientations", q)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def xy(self) -> np.ndarray:
        return self.positions[:, :2]

    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))

    def duration(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0])

    def poses(self) -> list[OdomPose]:
        quats = self.orientations
        out = []
        for i, t in enumerate(self.timestamps):
            p = np.zeros(3)
            p[: self.positions.shape[1]] = self.positions[i]
            q = quats[i] if quats is not None else np.array([1.0, 0.0, 0.0, 0.0])
            out.append(OdomPose(float(t), p, q))
        return out

    def geo_points(self) -> list[GeoPoint]:
        return [GeoPoint(float(x), float(y)) for x, y in self.positions[:, :2]]

    @classmethod
    def from_geo(cls, timestamps: Sequence[float], points: Sequence[GeoPoint]) -> Trajectory:
        return cls(np.asarray(timestamps, float), np.array([p.as_array() for p in points]).reshape(-1, 2))


@dataclass(frozen=True)
class AteResult:
    mean: float
    sd: float
    per_point: list[float]
    timestamps: list[float]

    def as_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "count": len(self.per_point)}


def associate(est_ts: np.ndarray, truth_ts: np.ndarray, window: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Pair each estimate with the nearest truth timestamp within ``window`` seconds.

    Returns index arrays (est_idx, truth_idx). Equidistant neighbours resolve
    to the earlier truth sample.
    """
    est_ts = np.asarray(est_ts, float)
    truth_ts = np.asarray(truth_ts, float)
    right = np.clip(np.searchsorted(truth_ts, est_ts), 0, len(truth_ts) - 1)
    left = np.clip(right - 1, 0, len(truth_ts) - 1)
    use_left = np.abs(est_ts - truth_ts[left]) <= np.abs(truth_ts[right] - est_ts)
    nearest = np.where(use_left, left, right)
    ok = np.abs(truth_ts[nearest] - est_ts) <= window
    return np.nonzero(ok)[0], nearest[ok]


def ate(estimated: Trajectory, truth: Trajectory, window: float = 0.5) -> AteResult:
    """2D absolute trajectory error with nearest-timestamp association.

    Mean and population standard deviation of the per-pair Euclidean error.
    """
    ei, ti = associate(estimated.timestamps, truth.timestamps, window)
    if len(ei) == 0:
        raise ValueError("no associable pairs")
    err = np.linalg.norm(estimated.xy[ei] - truth.xy[ti], axis=1)
    return AteResult(
        mean=float(np.mean(err)),
        sd=float(np.std(err)),
        per_point=err.tolist(),
        timestamps=estimated.timestamps[ei].tolist(),
    )


ODOM_HEADER = ["timestamp", "x", "y", "z", "qw", "qx", "qy", "qz"]
GEO_HEADER = ["timestamp", "easting", "northing"]


def write_trajectory_csv(path, traj: Trajectory) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if traj.positions.shape[1] == 3:
            w.writerow(ODOM_HEADER)
            quats = traj.orientations
            if quats is None:
                quats = np.tile([1.0, 0.0, 0.0, 0.0], (len(traj), 1))
            for t, p, q in zip(traj.timestamps, traj.positions, quats):
                w.writerow([repr(float(v)) for v in (t, *p, *q)])
        else:
            w.writerow(GEO_HEADER)
            for t, p in zip(traj.timestamps, traj.positions):
                w.writerow([repr(float(v)) for v in (t, *p)])


def read_trajectory_csv(path) -> Trajectory:
    """Read either the odometry or the geo-truth CSV layout.

    Extra trailing columns (e.g. variances in an estimate stream) are ignored
    as long as the leading columns match one of the two headers.
    """
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty trajectory file")
    header = [h.strip() for h in rows[0]]
    if header[: len(ODOM_HEADER)] == ODOM_HEADER:
        data = np.array([[float(v) for v in r[:8]] for r in rows[1:] if r], dtype=float).reshape(-1, 8)
        return Trajectory(data[:, 0], data[:, 1:4], data[:, 4:8])
    if header[: len(GEO_HEADER)] == GEO_HEADER:
        data = np.array([[float(v) for v in r[:3]] for r in rows[1:] if r], dtype=float).reshape(-1, 3)
        return Trajectory(data[:, 0], data[:, 1:3])
    raise ValueError(f"{path}: unrecognised trajectory header {header}")
