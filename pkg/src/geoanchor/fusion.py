"""Planar Kalman filter fusing anchored odometry with two position correctors.

State is the Earth-fixed (easting, northing) position only. Propagation uses
the anchored odometry displacement with a distance-scaled random walk; the
long-term memory (latest anchored position) and the instant observation
(latest filtered retrieval) are both direct position measurements.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import GeoPoint

CHI2_2DOF_99 = 9.21


@dataclass(frozen=True)
class FusionConfig:
    process_noise_per_meter: float = 0.05
    memory_obs_variance: float = 20.0**2 / 3.0
    instant_obs_variance: float = 30.0**2
    gate_threshold: float = CHI2_2DOF_99
    # consecutive gated memory updates before the pipeline re-initializes
    reset_after: int = 5

    def __post_init__(self):
        for name in ("process_noise_per_meter", "memory_obs_variance", "instant_obs_variance", "gate_threshold", "reset_after"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True, eq=False)
class FilterState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(2))
    covariance: np.ndarray = field(default_factory=lambda: np.eye(2))
    initialized: bool = False
    last_timestamp: float = float("nan")
    rejected: int = 0
    accepted: int = 0

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(2)
        c = np.array(self.covariance, dtype=float).reshape(2, 2)
        p.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "covariance", c)

    @property
    def geo(self) -> GeoPoint:
        return GeoPoint.from_array(self.position)


class NotInitialized(RuntimeError):
    pass


def check_covariance(p: np.ndarray) -> None:
    if not np.allclose(p, p.T, atol=1e-12, rtol=0.0):
        raise AssertionError("covariance lost symmetry")
    if np.min(np.linalg.eigvalsh(p)) <= 0:
        raise AssertionError("covariance is not positive definite")


def initialize(state: FilterState, first_anchor: GeoPoint, cfg: FusionConfig, timestamp: float = 0.0) -> FilterState:
    if state.initialized:
        raise RuntimeError("filter already initialized")
    return FilterState(first_anchor.as_array(), cfg.memory_obs_variance * np.eye(2), True, timestamp)


def predict(state: FilterState, odom_delta, cfg: FusionConfig, timestamp: float | None = None) -> FilterState:
    """Shift by the anchored displacement; covariance grows by q * |delta| * I."""
    if not state.initialized:
        raise NotInitialized("predict before initialize")
    delta = np.asarray(odom_delta, dtype=float).reshape(2)
    q = cfg.process_noise_per_meter * float(np.linalg.norm(delta))
    return replace(
        state,
        position=state.position + delta,
        covariance=state.covariance + q * np.eye(2),
        last_timestamp=state.last_timestamp if timestamp is None else timestamp,
    )


def mahalanobis2(state: FilterState, z: np.ndarray, variance: float) -> float:
    s = state.covariance + variance * np.eye(2)
    v = z - state.position
    return float(v @ np.linalg.solve(s, v))


def _update(state: FilterState, z: GeoPoint, variance: float, gate: float) -> FilterState:
    if not state.initialized:
        raise NotInitialized("update before initialize")
    zv = z.as_array()
    if mahalanobis2(state, zv, variance) > gate:
        return replace(state, rejected=state.rejected + 1)
    p = state.covariance
    r = variance * np.eye(2)
    s = p + r
    k = np.linalg.solve(s.T, p.T).T
    ikh = np.eye(2) - k
    # Joseph form keeps P symmetric positive definite.
    p_new = ikh @ p @ ikh.T + k @ r @ k.T
    p_new = 0.5 * (p_new + p_new.T)
    return replace(
        state,
        position=state.position + k @ (zv - state.position),
        covariance=p_new,
        accepted=state.accepted + 1,
    )


def update_memory(state: FilterState, anchored_pos: GeoPoint, cfg: FusionConfig) -> FilterState:
    return _update(state, anchored_pos, cfg.memory_obs_variance, cfg.gate_threshold)


def update_instant(state: FilterState, vpr_obs: GeoPoint, cfg: FusionConfig) -> FilterState:
    return _update(state, vpr_obs, cfg.instant_obs_variance, cfg.gate_threshold)
