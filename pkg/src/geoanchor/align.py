"""Anchoring a window of odometry positions to geo-observations.

Two solvers share one report type: an unconstrained closed-form rigid fit
(degenerates on straight-line windows) and a gravity-constrained fit that
fixes tilt from the gravity directions and solves only the heading about the
world vertical, which stays well posed for colinear tracks.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .geometry import AnchorTransform, GeoPoint, GravityVector

DEFAULT_CAPACITY = 20
DEFAULT_CONDITION_THRESHOLD = 50.0
MIN_PAIRS = 5
MIN_EXTENT = 30.0


@dataclass(frozen=True, eq=False)
class AlignmentReport:
    transform: AnchorTransform
    rms_residual: float
    spread: float
    condition: float
    degenerate: bool
    gravity_flagged: bool = False

    def to_dict(self) -> dict:
        return {
            "rotation": self.transform.rotation.tolist(),
            "translation": self.transform.translation.tolist(),
            "yaw": self.transform.yaw(),
            "rms_residual": self.rms_residual,
            "spread": self.spread,
            "condition": self.condition if math.isfinite(self.condition) else None,
            "degenerate": self.degenerate,
            "gravity_flagged": self.gravity_flagged,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class CorrespondenceWindow:
    """FIFO of (local position, world observation) pairs, oldest evicted first."""

    capacity: int = DEFAULT_CAPACITY
    _local: deque = field(default_factory=deque, repr=False)
    _world: deque = field(default_factory=deque, repr=False)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")

    def __len__(self) -> int:
        return len(self._local)

    @property
    def full(self) -> bool:
        return len(self) == self.capacity

    def local_points(self) -> np.ndarray:
        return np.array(self._local, dtype=float).reshape(-1, 3)

    def world_points(self) -> np.ndarray:
        """Observations lifted to 3D with zero vertical component."""
        w = np.zeros((len(self), 3))
        if len(self):
            w[:, :2] = np.array(self._world, dtype=float)
        return w

    def snapshot(self) -> CorrespondenceWindow:
        return CorrespondenceWindow(self.capacity, deque(self._local), deque(self._world))

    def drop_oldest(self, n: int) -> None:
        for _ in range(min(n, len(self))):
            self._local.popleft()
            self._world.popleft()

    def horizontal_extent(self) -> float:
        """Largest pairwise horizontal distance between local positions."""
        p = self.local_points()[:, :2]
        if len(p) < 2:
            return 0.0
        return float(np.max(np.hypot(p[:, None, 0] - p[None, :, 0], p[:, None, 1] - p[None, :, 1])))

    def ready(self, min_pairs: int = MIN_PAIRS, min_extent: float = MIN_EXTENT) -> bool:
        return len(self) >= min_pairs and self.horizontal_extent() >= min_extent


def push_correspondence(window: CorrespondenceWindow, local, obs: GeoPoint) -> CorrespondenceWindow:
    window._local.append(np.asarray(local, dtype=float).reshape(3).copy())
    window._world.append((obs.easting, obs.northing))
    while len(window._local) > window.capacity:
        window._local.popleft()
        window._world.popleft()
    return window


def horizontal_scatter(local: np.ndarray) -> tuple[float, float]:
    """(spread, condition) from the singular values of the centred horizontal points."""
    xy = local[:, :2] - local[:, :2].mean(axis=0)
    s = np.linalg.svd(xy, compute_uv=False) if len(xy) >= 2 else np.zeros(2)
    s = np.pad(s, (0, 2 - len(s)))
    spread = float(s[0])
    if s[1] <= 1e-12 * max(s[0], 1.0):
        return spread, math.inf
    return spread, float(s[0] / s[1])


def _rms(local: np.ndarray, world: np.ndarray, r: np.ndarray, t: np.ndarray) -> float:
    res = local @ r.T + t - world
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


def rigid_fit(local: np.ndarray, world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation (SVD of the cross-covariance)."""
    ca, cb = local.mean(axis=0), world.mean(axis=0)
    h = (local - ca).T @ (world - cb)
    u, _, vt = np.linalg.svd(h)
    sign = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    return r, cb - r @ ca


def align_rigid(
    window: CorrespondenceWindow, condition_threshold: float = DEFAULT_CONDITION_THRESHOLD
) -> AlignmentReport:
    """Unconstrained rigid alignment; flags windows without 2D spread."""
    if len(window) < 3:
        raise ValueError("rigid alignment needs at least 3 pairs")
    local, world = window.local_points(), window.world_points()
    if not (np.all(np.isfinite(local)) and np.all(np.isfinite(world))):
        raise ValueError("non-finite coordinates in window")
    r, t = rigid_fit(local, world)
    spread, cond = horizontal_scatter(local)
    degenerate = not cond <= condition_threshold
    rms = _rms(local, world, r, t)
    return AlignmentReport(AnchorTransform(r, t, rms, degenerate), rms, spread, cond, degenerate)


def _axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    return Rotation.from_rotvec(axis * angle).as_matrix()


def gravity_rotation(g_local: np.ndarray, g_world: np.ndarray) -> tuple[np.ndarray, bool]:
    """Minimal rotation taking ``g_local`` onto ``g_world``.

    Antiparallel inputs have no unique minimal rotation; a half turn about a
    fixed reference axis is used and flagged.
    """
    axis = np.cross(g_local, g_world)
    s = np.linalg.norm(axis)
    c = float(np.clip(g_local @ g_world, -1.0, 1.0))
    if s < 1e-12:
        if c > 0:
            return np.eye(3), False
        ref = np.array([1.0, 0.0, 0.0])
        if abs(g_local @ ref) > 0.9:
            ref = np.array([0.0, 1.0, 0.0])
        perp = ref - (ref @ g_local) * g_local
        return _axis_angle(perp / np.linalg.norm(perp), math.pi), True
    return _axis_angle(axis / s, math.atan2(s, c)), False


def align_gravity(
    window: CorrespondenceWindow,
    g_local: GravityVector,
    g_world: GravityVector,
    condition_threshold: float = DEFAULT_CONDITION_THRESHOLD,
) -> AlignmentReport:
    """Gravity as a hard constraint: R = R_yaw(theta) R_g with closed-form theta."""
    if len(window) < 2:
        raise ValueError("gravity alignment needs at least 2 pairs")
    local, world = window.local_points(), window.world_points()
    if not (np.all(np.isfinite(local)) and np.all(np.isfinite(world))):
        raise ValueError("non-finite coordinates in window")
    rg, flagged = gravity_rotation(g_local.direction, g_world.direction)
    up = -g_world.direction
    a = (local - local.mean(axis=0)) @ rg.T
    b = world - world.mean(axis=0)
    a = a - np.outer(a @ up, up)
    b = b - np.outer(b @ up, up)
    if np.max(np.linalg.norm(a, axis=1)) < 1e-9:
        raise ValueError("insufficient horizontal extent")
    sin_sum = float(np.sum(np.cross(a, b) @ up))
    cos_sum = float(np.sum(a * b))
    theta = math.atan2(sin_sum, cos_sum)
    r = _axis_angle(up, theta) @ rg
    t = world.mean(axis=0) - r @ local.mean(axis=0)
    spread, cond = horizontal_scatter(local)
    rms = _rms(local, world, r, t)
    # Gravity resolves the heading ambiguity; degenerate only if there is no extent at all.
    return AlignmentReport(AnchorTransform(r, t, rms, False), rms, spread, cond, False, flagged)


def align_gravity_soft(
    window: CorrespondenceWindow,
    g_local: GravityVector,
    g_world: GravityVector,
    gravity_weight: float = 1.0,
    initial: AnchorTransform | None = None,
) -> AlignmentReport:
    """Iterative fit of the summed trajectory residual plus a weighted gravity residual.

    Starts from the hard-constraint solution unless ``initial`` is given.
    """
    if len(window) < 2:
        raise ValueError("alignment needs at least 2 pairs")
    local, world = window.local_points(), window.world_points()
    if initial is None:
        initial = align_gravity(window, g_local, g_world).transform
    sw = math.sqrt(gravity_weight)
    gl, gw = g_local.direction, g_world.direction

    def residuals(x):
        r = Rotation.from_rotvec(x[:3]).as_matrix()
        res = local @ r.T + x[3:] - world
        return np.concatenate([res.ravel(), sw * (r @ gl - gw)])

    x0 = np.concatenate([Rotation.from_matrix(initial.rotation).as_rotvec(), initial.translation])
    sol = least_squares(residuals, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    r = Rotation.from_rotvec(sol.x[:3]).as_matrix()
    t = sol.x[3:]
    spread, cond = horizontal_scatter(local)
    rms = _rms(local, world, r, t)
    return AlignmentReport(AnchorTransform(r, t, rms, False), rms, spread, cond, False)
