"""Declarative scenario files.

A scenario is an INI-style key/value file. Every key is optional and
defaults to the values below; unknown sections or keys are rejected by name.

    [world]       seed, texture_scale, n_basis, distinctiveness, dim,
                  patch_grid, style_strength, style_bias,
                  zones = "e,n,r; e,n,r"
    [grid]        origin_e, origin_n, extent_e, extent_n, spacing, fov
    [trajectory]  pattern (eight|rectangle|lawnmower|custom), length, speed,
                  altitude, loops, waypoints = "e,n; e,n; ...", start_fraction
    [drift]       heading_bias, heading_random_walk, scale_error,
                  position_noise, gravity_noise
    [vpr]         n_c, vocab_seed, vocab_samples, max_iters, top_k,
                  camera_noise, query_fov, fp_rate, filtering, eps, min_pts,
                  keyframe_rate, oracle_observations
    [align]       capacity, min_pairs, min_extent, method (gravity|rigid|soft),
                  gravity_weight, condition_threshold, max_residual
    [fusion]      process_noise_per_meter, memory_obs_variance,
                  instant_obs_variance, gate_threshold, reset_after
    [sim]         randomize_heading, randomize_placement, randomize_phase,
                  placement_margin
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .features import RepetitionZone
from .fusion import FusionConfig
from .geometry import GeoPoint
from .simulation import Pattern


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 7
    texture_scale: float = 10.0
    n_basis: int = 24
    distinctiveness: float = 0.5
    dim: int = 64
    patch_grid: int = 16
    style_strength: float = 0.25
    style_bias: float = 0.05
    zones: tuple[RepetitionZone, ...] = (
        RepetitionZone(GeoPoint(60.0, 290.0), 55.0),
        RepetitionZone(GeoPoint(340.0, 50.0), 55.0),
    )


@dataclass(frozen=True)
class GridConfig:
    origin_e: float = 0.0
    origin_n: float = 0.0
    extent_e: float = 400.0
    extent_n: float = 350.0
    spacing: float = 40.0
    fov: float = 60.0


@dataclass(frozen=True)
class TrajectoryConfig:
    pattern: Pattern = Pattern.RECTANGLE
    length: float = 1000.0
    speed: float = 10.0
    altitude: float = 50.0
    loops: int = 1
    waypoints: tuple[tuple[float, float], ...] = ()
    start_fraction: float = 0.0


@dataclass(frozen=True)
class DriftConfig:
    heading_bias: float = 0.0
    heading_random_walk: float = 0.002
    scale_error: float = 1.03
    position_noise: float = 0.05
    gravity_noise: float = 0.002


@dataclass(frozen=True)
class VprConfig:
    n_c: int = 32
    vocab_seed: int = 0
    vocab_samples: int = 64
    max_iters: int = 100
    top_k: int = 5
    camera_noise: float = 0.05
    query_fov: float = 60.0
    fp_rate: float = 0.02
    filtering: bool = True
    eps: float = 60.0
    min_pts: int = 2
    keyframe_rate: float = 1.0
    oracle_observations: bool = False


@dataclass(frozen=True)
class AlignConfig:
    capacity: int = 20
    min_pairs: int = 5
    min_extent: float = 30.0
    method: str = "gravity"
    gravity_weight: float = 1.0
    condition_threshold: float = 50.0
    max_residual: float = 40.0

    def __post_init__(self):
        if self.method not in ("gravity", "rigid", "soft"):
            raise ScenarioError(f"align.method: unknown method {self.method!r}")


@dataclass(frozen=True)
class SimConfig:
    randomize_heading: bool = True
    randomize_placement: bool = True
    randomize_phase: bool = True
    placement_margin: float = 20.0


@dataclass(frozen=True)
class Scenario:
    world: WorldConfig = field(default_factory=WorldConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)
    vpr: VprConfig = field(default_factory=VprConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    sim: SimConfig = field(default_factory=SimConfig)

    def with_updates(self, **sections) -> Scenario:
        """``scenario.with_updates(vpr={"fp_rate": 0.2})``."""
        changes = {name: dataclasses.replace(getattr(self, name), **vals) for name, vals in sections.items()}
        return dataclasses.replace(self, **changes)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_zones(text: str) -> tuple[RepetitionZone, ...]:
    zones = []
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        e, n, r = (float(v) for v in chunk.split(","))
        zones.append(RepetitionZone(GeoPoint(e, n), r))
    return tuple(zones)


def _parse_waypoints(text: str) -> tuple[tuple[float, float], ...]:
    out = []
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        e, n = (float(v) for v in chunk.split(","))
        out.append((e, n))
    return tuple(out)


def _convert(section: str, key: str, default, text: str):
    if key == "zones":
        return _parse_zones(text)
    if key == "waypoints":
        return _parse_waypoints(text)
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        v = float(text)
        if not math.isfinite(v):
            raise ValueError("must be finite")
        return v
    if isinstance(default, Pattern):
        return Pattern(text.strip().lower())
    return text.strip()


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";;"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ScenarioError(f"{source}: {exc}") from None
    base = Scenario()
    updates = {}
    known = {f.name: f for f in fields(Scenario)}
    for section in cp.sections():
        if section not in known:
            raise ScenarioError(f"{source}: unknown section [{section}]")
        current = getattr(base, section)
        defaults = {f.name: getattr(current, f.name) for f in fields(current)}
        vals = {}
        for key, raw in cp.items(section):
            if key not in defaults:
                raise ScenarioError(f"{source}: unknown key {section}.{key}")
            try:
                vals[key] = _convert(section, key, defaults[key], raw)
            except (ValueError, TypeError) as exc:
                raise ScenarioError(f"{source}: bad value for {section}.{key}: {exc}") from None
        updates[section] = vals
    try:
        return base.with_updates(**updates)
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"{source}: {exc}") from None


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.is_file():
        raise ScenarioError(f"scenario file not found: {path}")
    return parse_scenario(path.read_text(encoding="utf-8"), str(path))


def dump_scenario(sc: Scenario) -> str:
    """Render a scenario back to the file format (round-trips through parse_scenario)."""
    lines = []
    for sec in fields(Scenario):
        obj = getattr(sc, sec.name)
        lines.append(f"[{sec.name}]")
        for f in fields(obj):
            v = getattr(obj, f.name)
            if f.name == "zones":
                text = "; ".join(f"{z.center.easting!r},{z.center.northing!r},{z.radius!r}" for z in v)
            elif f.name == "waypoints":
                text = "; ".join(f"{e!r},{n!r}" for e, n in v)
            elif isinstance(v, Pattern):
                text = v.value
            elif isinstance(v, bool):
                text = "true" if v else "false"
            else:
                text = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {text}")
        lines.append("")
    return "\n".join(lines)
