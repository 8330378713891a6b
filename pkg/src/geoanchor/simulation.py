"""Flight patterns, a drifting-odometry stand-in for VIO, and keyframe events."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .features import LocalFeatureSet, Style, SyntheticWorld, synth_features
from .geometry import GeoPoint, Trajectory


class Pattern(enum.Enum):
    EIGHT = "eight"
    RECTANGLE = "rectangle"
    LAWNMOWER = "lawnmower"
    CUSTOM = "custom"


@dataclass(frozen=True)
class TrajectorySpec:
    pattern: Pattern = Pattern.RECTANGLE
    length: float = 1000.0
    speed: float = 10.0
    altitude: float = 50.0
    loops: int = 1
    waypoints: tuple[tuple[float, float], ...] = ()
    start_fraction: float = 0.0
    corner_radius: float = 20.0
    lane_spacing: float = 40.0
    lanes: int = 5

    def __post_init__(self):
        if not self.speed > 0:
            raise ValueError("speed must be positive")
        if not self.altitude > 0:
            raise ValueError("altitude must be positive")
        if self.loops < 1:
            raise ValueError("loops must be >= 1")


def _arc(center, radius, a0, a1, n=180) -> np.ndarray:
    a = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)], axis=1)


def pattern_polyline(spec: TrajectorySpec) -> tuple[np.ndarray, bool]:
    """Dense waypoints centred on the origin, and whether the path is a closed loop.

    Generated patterns are rescaled so the polyline length equals ``spec.length``.
    """
    pts, closed = _raw_polyline(spec)
    if spec.pattern is not Pattern.CUSTOM:
        pts = pts * (spec.length / _polyline_length(pts))
    return pts, closed


def _polyline_length(pts: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def _raw_polyline(spec: TrajectorySpec) -> tuple[np.ndarray, bool]:
    if spec.pattern is Pattern.CUSTOM:
        pts = np.asarray(spec.waypoints, dtype=float).reshape(-1, 2)
        if len(pts) < 2:
            raise ValueError("custom pattern needs at least 2 waypoints")
        closed = len(pts) > 2
        if closed and not np.allclose(pts[0], pts[-1]):
            pts = np.vstack([pts, pts[:1]])
        return pts - (pts.min(axis=0) + pts.max(axis=0)) / 2.0, closed
    if not spec.length > 0:
        raise ValueError("zero-length pattern")
    if spec.pattern is Pattern.EIGHT:
        # Two tangent circles traversed in opposite senses, crossing at the origin heading north.
        r = spec.length / (4.0 * math.pi)
        left = _arc((-r, 0.0), r, 0.0, 2.0 * math.pi, 720)
        right = _arc((r, 0.0), r, math.pi, -math.pi, 720)
        return np.vstack([left, right[1:]]), True
    if spec.pattern is Pattern.RECTANGLE:
        # Rounded rectangle with 3:2 aspect whose perimeter equals the requested length.
        rc = spec.corner_radius
        h = (spec.length + 8.0 * rc - 2.0 * math.pi * rc) / 5.0
        w = 1.5 * h
        if h <= 2 * rc:
            raise ValueError("rectangle too short for its corner radius")
        hx, hy = w / 2.0 - rc, h / 2.0 - rc
        pieces = [
            _arc((hx, -hy), rc, -math.pi / 2, 0.0),
            _arc((hx, hy), rc, 0.0, math.pi / 2),
            _arc((-hx, hy), rc, math.pi / 2, math.pi),
            _arc((-hx, -hy), rc, math.pi, 1.5 * math.pi),
        ]
        pts = np.vstack(pieces)
        return np.vstack([pts, pts[:1]]), True
    if spec.pattern is Pattern.LAWNMOWER:
        n, gap = spec.lanes, spec.lane_spacing
        leg = (spec.length - (n - 1) * gap) / n
        if leg <= 0:
            raise ValueError("lawnmower too short for its lanes")
        pts = []
        for i in range(n):
            y = i * gap
            xs = (0.0, leg) if i % 2 == 0 else (leg, 0.0)
            pts += [(xs[0], y), (xs[1], y)]
        pts = np.array(pts)
        return pts - (pts.min(axis=0) + pts.max(axis=0)) / 2.0, False
    raise ValueError(f"unknown pattern {spec.pattern}")


def pattern_extent(spec: TrajectorySpec) -> tuple[float, float]:
    pts, _ = pattern_polyline(spec)
    span = pts.max(axis=0) - pts.min(axis=0)
    return float(span[0]), float(span[1])


def _resample(pts: np.ndarray, s: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    return np.stack([np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])], axis=1)


def generate_truth(spec: TrajectorySpec, world_origin: GeoPoint = GeoPoint(0.0, 0.0), dt: float = 1.0) -> Trajectory:
    """Constant-speed samples along the pattern centred at ``world_origin``.

    Closed patterns are flown ``loops`` times starting ``start_fraction`` of
    the way around; altitude is held constant.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    pts, closed = pattern_polyline(spec)
    loop_len = _polyline_length(pts)
    if loop_len <= 0:
        raise ValueError("zero-length pattern")
    total = loop_len * spec.loops if closed else loop_len
    duration = total / spec.speed
    n = int(math.floor(duration / dt + 1e-9)) + 1
    t = np.arange(n) * dt
    s = spec.speed * t
    if closed:
        s = (s + spec.start_fraction * loop_len) % loop_len
    xy = _resample(pts, s) + world_origin.as_array()
    pos = np.column_stack([xy, np.full(n, spec.altitude)])
    return Trajectory(t, pos, np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)))


@dataclass(frozen=True)
class DriftModel:
    """Odometry error model; ``scale_error`` is a multiplicative factor (1 = exact)."""

    heading_bias: float = 0.0
    heading_random_walk: float = 0.0
    scale_error: float = 1.0
    position_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.scale_error > 0:
            raise ValueError("scale_error must be positive")


def _yaw_quat(psi: np.ndarray) -> np.ndarray:
    return np.stack([np.cos(psi / 2), np.zeros_like(psi), np.zeros_like(psi), np.sin(psi / 2)], axis=1)


def corrupt_odometry(truth: Trajectory, model: DriftModel) -> Trajectory:
    """Integrate truth displacements through the drift model into a local frame.

    The local frame starts at the origin and is rotated by ``heading_bias``
    from north; per-step heading noise has variance ``rw^2 * step_length`` and
    horizontal position noise variance ``position_noise^2 * step_length``.
    """
    rng = np.random.default_rng(model.seed)
    pos = truth.positions if truth.positions.shape[1] == 3 else np.column_stack([truth.positions, np.zeros(len(truth))])
    d = np.diff(pos, axis=0)
    step = np.linalg.norm(d[:, :2], axis=1)
    walk = model.heading_random_walk * np.sqrt(step) * rng.standard_normal(len(step))
    noise = model.position_noise * np.sqrt(step)[:, None] * rng.standard_normal((len(step), 2))
    psi = model.heading_bias + np.concatenate([[0.0], np.cumsum(walk)])
    c, s = np.cos(psi[1:]), np.sin(psi[1:])
    dx = model.scale_error * (c * d[:, 0] - s * d[:, 1]) + noise[:, 0]
    dy = model.scale_error * (s * d[:, 0] + c * d[:, 1]) + noise[:, 1]
    dz = model.scale_error * d[:, 2]
    local = np.zeros_like(pos)
    local[1:] = np.cumsum(np.column_stack([dx, dy, dz]), axis=0)
    return Trajectory(truth.timestamps, local, _yaw_quat(psi))


@dataclass(frozen=True, eq=False)
class KeyframeEvent:
    timestamp: float
    true_position: GeoPoint
    odom_position: np.ndarray
    features: LocalFeatureSet
    index: int = 0


def keyframes(
    truth: Trajectory,
    odom: Trajectory,
    world: SyntheticWorld,
    fov: float,
    noise_sigma: float,
    rng: np.random.Generator,
    rate: float = 1.0,
) -> Iterator[KeyframeEvent]:
    """Camera-style keyframes at ``rate`` Hz (nearest odometry sample per tick)."""
    period = 1.0 / rate
    t0, t1 = truth.timestamps[0], truth.timestamps[-1]
    ticks = t0 + np.arange(int(math.floor((t1 - t0) / period + 1e-9)) + 1) * period
    idx = np.clip(np.searchsorted(truth.timestamps, ticks - 1e-9), 0, len(truth) - 1)
    for n, i in enumerate(idx):
        p = GeoPoint(float(truth.positions[i, 0]), float(truth.positions[i, 1]))
        fs = synth_features(world, p, fov, Style.CAMERA, noise_sigma, rng)
        yield KeyframeEvent(float(truth.timestamps[i]), p, odom.positions[i].copy(), fs, n)
