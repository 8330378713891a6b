"""Closed-loop simulation: keyframes -> retrieval -> filtering -> anchoring -> fusion.

Stages run as an in-order event loop over keyframes; each stage consumes the
previous stage's output for the same keyframe, and fusion sees keyframes in
timestamp order.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import fusion as ekf
from .align import (
    AlignmentReport,
    CorrespondenceWindow,
    align_gravity,
    align_gravity_soft,
    align_rigid,
    gravity_rotation,
    push_correspondence,
)
from .features import Style, SyntheticTileProvider, SyntheticWorld, synth_features
from .fpfilter import mean_observation, robust_observation
from .geometry import AnchorTransform, Frame, GeoPoint, GravityVector, Trajectory, apply_transform, ate
from .metrics import EvalRecord, recall_at_n, top_k_at_n
from .retrieval import DescriptorDb, Match, RetrievalResult, db_build, query_topk
from .scenario import AlignConfig, Scenario, VprConfig
from .simulation import DriftModel, TrajectorySpec, corrupt_odometry, generate_truth, keyframes, pattern_extent
from .tiles import TileGrid, build_grid, ground_truth_neighbors
from .vlad import Vocabulary, build_vocabulary, encode

log = logging.getLogger(__name__)

GT_N = 5


@dataclass(frozen=True, eq=False)
class Assets:
    world: SyntheticWorld
    grid: TileGrid
    vocab: Vocabulary
    db: DescriptorDb


def make_world(sc: Scenario) -> SyntheticWorld:
    w = sc.world
    return SyntheticWorld(
        seed=w.seed,
        texture_scale=w.texture_scale,
        n_basis=w.n_basis,
        distinctiveness=w.distinctiveness,
        repetition_zones=w.zones,
        dim=w.dim,
        patch_grid=w.patch_grid,
        style_strength=w.style_strength,
        style_bias=w.style_bias,
    )


def make_grid(sc: Scenario) -> TileGrid:
    g = sc.grid
    return build_grid(GeoPoint(g.origin_e, g.origin_n), (g.extent_e, g.extent_n), g.spacing, g.fov)


def vocabulary_training_sets(world: SyntheticWorld, grid: TileGrid, vpr: VprConfig):
    """Subsampled satellite tile features pooled with camera-style samples over the map."""
    rng = np.random.default_rng([world.seed, vpr.vocab_seed, 11])
    sets = [synth_features(world, t.center, t.fov, Style.SATELLITE) for t in grid.tiles]
    lo = grid.centers.min(axis=0)
    hi = grid.centers.max(axis=0)
    for _ in range(len(grid.tiles) // 2):
        c = GeoPoint.from_array(rng.uniform(lo, hi))
        sets.append(synth_features(world, c, vpr.query_fov, Style.CAMERA, vpr.camera_noise, rng))
    out = []
    for s in sets:
        m = min(vpr.vocab_samples, len(s))
        idx = np.sort(rng.choice(len(s), m, replace=False))
        out.append(type(s)(s.features[idx], s.source_id))
    return out


def build_assets(sc: Scenario) -> Assets:
    world = make_world(sc)
    grid = make_grid(sc)
    vocab = build_vocabulary(
        vocabulary_training_sets(world, grid, sc.vpr), sc.vpr.n_c, sc.vpr.vocab_seed, sc.vpr.max_iters
    )
    db = db_build(grid, vocab, SyntheticTileProvider(world))
    return Assets(world, grid, vocab, db)


@lru_cache(maxsize=8)
def _cached_assets(world_cfg, grid_cfg, vpr_key) -> Assets:
    sc = Scenario(world=world_cfg, grid=grid_cfg).with_updates(vpr=dict(vpr_key))
    return build_assets(sc)


def assets_for(sc: Scenario) -> Assets:
    """Assets depend only on world, grid and vocabulary settings; cached across runs."""
    v = sc.vpr
    key = (
        ("n_c", v.n_c),
        ("vocab_seed", v.vocab_seed),
        ("vocab_samples", v.vocab_samples),
        ("max_iters", v.max_iters),
        ("camera_noise", v.camera_noise),
        ("query_fov", v.query_fov),
    )
    return _cached_assets(sc.world, sc.grid, key)


def corrupt_retrieval(
    result: RetrievalResult, grid: TileGrid, decoy_ids: np.ndarray, fp_rate: float, rng: np.random.Generator
) -> tuple[RetrievalResult, int]:
    """Swap each match, with probability ``fp_rate``, for a decoy tile (recurring-pattern stand-in).

    Replacements keep the rank and similarity of the match they displace and
    never duplicate a tile already in the list.
    """
    flips = rng.random(len(result)) < fp_rate
    picks = rng.random(len(result))
    if not flips.any():
        return result, 0
    used = set(result.tile_ids)
    matches = list(result.matches)
    swapped = 0
    for i in np.nonzero(flips)[0]:
        pool = [t for t in decoy_ids if t not in used]
        if not pool:
            continue
        tid = int(pool[int(picks[i] * len(pool))])
        used.add(tid)
        matches[i] = Match(tid, matches[i].similarity, grid.by_id(tid).center)
        swapped += 1
    return RetrievalResult(tuple(matches), result.query_id), swapped


def decoy_tiles(world: SyntheticWorld, grid: TileGrid) -> np.ndarray:
    inside = world.zone_index(grid.centers) >= 0 if world.repetition_zones else np.zeros(len(grid), bool)
    ids = grid.tile_ids[inside]
    return ids if len(ids) else grid.tile_ids


def _noisy_gravity(sigma: float, rng: np.random.Generator) -> GravityVector:
    g = np.array([0.0, 0.0, -1.0])
    if sigma > 0:
        tilt = sigma * rng.standard_normal(2)
        g = np.array([tilt[0], tilt[1], -1.0])
        g /= np.linalg.norm(g)
    return GravityVector(g, Frame.LOCAL)


def solve_anchor(window: CorrespondenceWindow, cfg: AlignConfig, g_local: GravityVector) -> AlignmentReport:
    g_world = GravityVector.down(Frame.WORLD)
    if cfg.method == "rigid":
        return align_rigid(window, cfg.condition_threshold)
    if cfg.method == "soft":
        return align_gravity_soft(window, g_local, g_world, cfg.gravity_weight)
    return align_gravity(window, g_local, g_world, cfg.condition_threshold)


def consensus_inliers(
    window: CorrespondenceWindow, g_local: GravityVector, radius: float, min_baseline: float = 10.0
) -> np.ndarray:
    """Indices of the largest set of pairs agreeing with a two-pair heading hypothesis.

    Every pair of correspondences at least ``min_baseline`` apart (in the
    local frame) fixes a heading and an offset once gravity is levelled; a
    correspondence supports the hypothesis when it lands within ``radius``.
    A run of mutually consistent aliased matches can pass a residual check
    on its own, but rarely outvotes the rest of the window.
    """
    rg, _ = gravity_rotation(g_local.direction, GravityVector.down(Frame.WORLD).direction)
    local = (window.local_points() @ rg.T)[:, :2]
    world = window.world_points()[:, :2]
    n = len(local)
    i, j = np.triu_indices(n, 1)
    dl = local[j] - local[i]
    keep = np.hypot(dl[:, 0], dl[:, 1]) >= min_baseline
    if not keep.any():
        return np.arange(n)
    i, j, dl = i[keep], j[keep], dl[keep]
    dw = world[j] - world[i]
    yaw = np.arctan2(dw[:, 1], dw[:, 0]) - np.arctan2(dl[:, 1], dl[:, 0])
    c, s_ = np.cos(yaw), np.sin(yaw)
    mid_l = (local[i] + local[j]) / 2.0
    mid_w = (world[i] + world[j]) / 2.0
    tx = mid_w[:, 0] - (c * mid_l[:, 0] - s_ * mid_l[:, 1])
    ty = mid_w[:, 1] - (s_ * mid_l[:, 0] + c * mid_l[:, 1])
    px = c[:, None] * local[None, :, 0] - s_[:, None] * local[None, :, 1] + tx[:, None]
    py = s_[:, None] * local[None, :, 0] + c[:, None] * local[None, :, 1] + ty[:, None]
    err2 = (px - world[None, :, 0]) ** 2 + (py - world[None, :, 1]) ** 2
    support = err2 <= radius * radius
    votes = support.sum(axis=1)
    cost = np.where(support, err2, 0.0).sum(axis=1)
    best = np.lexsort((cost, -votes))[0]
    return np.nonzero(support[best])[0]


def _subwindow(win: CorrespondenceWindow, keep) -> CorrespondenceWindow:
    return CorrespondenceWindow(win.capacity, deque(win._local[i] for i in keep), deque(win._world[i] for i in keep))


def trimmed_anchor(window: CorrespondenceWindow, cfg: AlignConfig, g_local: GravityVector) -> AlignmentReport:
    """Fit on the consensus set, then drop worst-residual pairs while the fit is poor.

    Consensus may exclude any number of pairs as long as what remains still
    satisfies ``min_pairs`` and ``min_extent``; the residual trimming that
    follows removes at most a quarter of the remaining pairs. Works on a
    copy. The caller decides whether the final residual is acceptable.
    """
    win = window.snapshot()
    inliers = consensus_inliers(win, g_local, cfg.max_residual)
    if len(inliers) < len(win):
        core = _subwindow(win, inliers)
        if core.ready(cfg.min_pairs, cfg.min_extent):
            win = core
    floor = max(cfg.min_pairs, math.ceil(0.75 * len(win)))
    rep = solve_anchor(win, cfg, g_local)
    while rep.rms_residual > cfg.max_residual and len(win) > floor:
        local, world = win.local_points(), win.world_points()
        res = apply_transform(rep.transform, local) - world
        worst = int(np.argmax(np.einsum("ij,ij->i", res[:, :2], res[:, :2])))
        trial = _subwindow(win, [i for i in range(len(win)) if i != worst])
        if trial.horizontal_extent() < cfg.min_extent:
            break
        win = trial
        rep = solve_anchor(win, cfg, g_local)
    return rep


@dataclass
class KeyframeLog:
    timestamp: float
    true_e: float
    true_n: float
    obs_e: float | None
    obs_n: float | None
    false_positives: int
    anchored: bool
    est_e: float | None
    est_n: float | None


@dataclass(eq=False)
class PipelineResult:
    estimates: Trajectory | None
    variances: np.ndarray
    truth: Trajectory
    odometry: Trajectory
    report: dict
    anchors: list[tuple[float, AlignmentReport]] = field(default_factory=list)
    log: list[KeyframeLog] = field(default_factory=list)

    @property
    def ate(self):
        if self.estimates is None:
            raise ValueError("no associable pairs")
        return ate(self.estimates, self.truth)


def run_pipeline(
    spec: TrajectorySpec,
    world: SyntheticWorld,
    grid: TileGrid,
    vocab: Vocabulary,
    db: DescriptorDb,
    drift: DriftModel,
    fusion_cfg: ekf.FusionConfig,
    vpr_cfg: VprConfig,
    align_cfg: AlignConfig = AlignConfig(),
    world_origin: GeoPoint | None = None,
    gravity_noise: float = 0.0,
    seed: int = 0,
) -> PipelineResult:
    """Fly ``spec`` over the synthetic world and localize it from scratch.

    The filter is initialised at the first successful anchoring; estimates
    exist from then on.
    """
    if db.vocab_fingerprint != vocab.fingerprint:
        raise ValueError("database was built with a different vocabulary")
    if world_origin is None:
        world_origin = GeoPoint.from_array(grid.centers.mean(axis=0))
    rng = np.random.default_rng([seed, 101])
    fp_rng = np.random.default_rng([seed, 202])
    truth = generate_truth(spec, world_origin, 1.0 / vpr_cfg.keyframe_rate)
    odom = corrupt_odometry(truth, drift)
    decoys = decoy_tiles(world, grid)
    window = CorrespondenceWindow(align_cfg.capacity)
    state = ekf.FilterState()
    anchor: AnchorTransform | None = None
    prev_odom = None
    est_t, est_xy, est_var = [], [], []
    records: list[EvalRecord] = []
    anchors: list[tuple[float, AlignmentReport]] = []
    logs: list[KeyframeLog] = []
    injected = unusable = poor_fits = resets = streak = 0
    init_time = None

    for ev in keyframes(truth, odom, world, vpr_cfg.query_fov, vpr_cfg.camera_noise, rng, vpr_cfg.keyframe_rate):
        n_fp = 0
        try:
            if vpr_cfg.oracle_observations:
                obs = ev.true_position
            else:
                result = query_topk(db, encode(ev.features, vocab), vpr_cfg.top_k, query_id=ev.index)
                result, n_fp = corrupt_retrieval(result, grid, decoys, vpr_cfg.fp_rate, fp_rng)
                injected += n_fp
                gt = ground_truth_neighbors(grid, ev.true_position, min(GT_N, len(grid)))
                records.append(EvalRecord(ev.index, result.tile_ids, gt))
                if vpr_cfg.filtering:
                    obs = robust_observation(result, vpr_cfg.eps, vpr_cfg.min_pts)
                else:
                    obs = mean_observation(result)
        except Exception as exc:
            raise RuntimeError(f"retrieval stage failed at t={ev.timestamp}: {exc}") from exc
        if obs is None:
            unusable += 1
        else:
            push_correspondence(window, ev.odom_position, obs)

        anchored = jumped = False
        if window.ready(align_cfg.min_pairs, align_cfg.min_extent):
            try:
                g_local = _noisy_gravity(gravity_noise, rng)
                rep = trimmed_anchor(window, align_cfg, g_local)
            except ValueError as exc:
                log.debug("alignment skipped at t=%s: %s", ev.timestamp, exc)
            else:
                if rep.rms_residual > align_cfg.max_residual:
                    # the older half may be stale (e.g. a run of aliased matches); retry on the newer half
                    stale = len(window) // 2
                    recent = window.snapshot()
                    recent.drop_oldest(stale)
                    if recent.ready(align_cfg.min_pairs, align_cfg.min_extent):
                        retry = trimmed_anchor(recent, align_cfg, g_local)
                        if retry.rms_residual <= align_cfg.max_residual:
                            window.drop_oldest(stale)
                            rep = retry
                if rep.rms_residual <= align_cfg.max_residual:
                    if anchor is not None:
                        moved = apply_transform(rep.transform, ev.odom_position) - apply_transform(anchor, ev.odom_position)
                        # a jump this large means the consensus switched hypotheses
                        jumped = float(np.hypot(moved[0], moved[1])) > 2.0 * align_cfg.max_residual
                    anchor = rep.transform
                    anchors.append((ev.timestamp, rep))
                    anchored = True
                else:
                    poor_fits += 1

        if anchor is not None:
            anchored_pos = GeoPoint.from_array(apply_transform(anchor, ev.odom_position)[:2])
            if not state.initialized:
                state = ekf.initialize(state, anchored_pos, fusion_cfg, ev.timestamp)
                init_time = ev.timestamp
            else:
                delta = (anchor.rotation @ (ev.odom_position - prev_odom))[:2]
                state = ekf.predict(state, delta, fusion_cfg, ev.timestamp)
                before = state.rejected
                state = ekf.update_memory(state, anchored_pos, fusion_cfg)
                streak = streak + 1 if state.rejected > before else 0
                if streak >= fusion_cfg.reset_after or (jumped and streak):
                    # the filter has lost the anchored track; restart from it
                    counts = dict(rejected=state.rejected, accepted=state.accepted)
                    state = ekf.initialize(ekf.FilterState(), anchored_pos, fusion_cfg, ev.timestamp)
                    state = replace(state, **counts)
                    resets += 1
                    streak = 0
                elif obs is not None:
                    state = ekf.update_instant(state, obs, fusion_cfg)
            est_t.append(ev.timestamp)
            est_xy.append(state.position.copy())
            est_var.append(np.diag(state.covariance).copy())
        prev_odom = ev.odom_position

        logs.append(
            KeyframeLog(
                ev.timestamp,
                ev.true_position.easting,
                ev.true_position.northing,
                None if obs is None else obs.easting,
                None if obs is None else obs.northing,
                n_fp,
                anchored,
                float(state.position[0]) if state.initialized else None,
                float(state.position[1]) if state.initialized else None,
            )
        )

    estimates = Trajectory(np.array(est_t), np.array(est_xy)) if est_t else None
    report: dict = {
        "keyframes": len(logs),
        "anchors": len(anchors),
        "rejected_fits": poor_fits,
        "filter_resets": resets,
        "unusable_queries": unusable,
        "injected_false_positives": injected,
        "updates_accepted": state.accepted,
        "updates_rejected": state.rejected,
        "init_time": init_time,
        "path_length": truth.path_length(),
    }
    if records:
        report["recall_at_1"] = recall_at_n(records, 1)
        report["recall_at_5"] = recall_at_n(records, min(5, vpr_cfg.top_k))
        if vpr_cfg.top_k >= 5:
            report["top_3_at_5"] = top_k_at_n(records, 3, 5)
    if estimates is not None:
        res = ate(estimates, truth)
        report["ate_mean"] = res.mean
        report["ate_sd"] = res.sd
        report["ate_max"] = max(res.per_point)
    return PipelineResult(
        estimates,
        np.array(est_var).reshape(-1, 2),
        truth,
        odom,
        report,
        anchors,
        logs,
    )


def randomized_setup(sc: Scenario, grid: TileGrid, seed: int) -> tuple[TrajectorySpec, DriftModel, GeoPoint]:
    """Per-seed flight: heading offset, placement on the map and start phase."""
    rng = np.random.default_rng([seed, 303])
    tc = sc.trajectory
    heading = float(rng.uniform(-math.pi, math.pi)) if sc.sim.randomize_heading else sc.drift.heading_bias
    phase = float(rng.uniform(0.0, 1.0)) if sc.sim.randomize_phase else tc.start_fraction
    spec = TrajectorySpec(tc.pattern, tc.length, tc.speed, tc.altitude, tc.loops, tc.waypoints, phase)
    lo = grid.centers.min(axis=0)
    hi = grid.centers.max(axis=0)
    center = (lo + hi) / 2.0
    if sc.sim.randomize_placement:
        span = np.array(pattern_extent(spec)) / 2.0 + sc.sim.placement_margin
        a, b = lo + span, hi - span
        center = np.where(a <= b, rng.uniform(np.minimum(a, b), np.maximum(a, b)), center)
    d = sc.drift
    drift = DriftModel(heading, d.heading_random_walk, d.scale_error, d.position_noise, seed)
    return spec, drift, GeoPoint.from_array(center)


def simulate(sc: Scenario, seed: int = 0, assets: Assets | None = None) -> PipelineResult:
    assets = assets or assets_for(sc)
    spec, drift, origin = randomized_setup(sc, assets.grid, seed)
    return run_pipeline(
        spec,
        assets.world,
        assets.grid,
        assets.vocab,
        assets.db,
        drift,
        sc.fusion,
        sc.vpr,
        sc.align,
        origin,
        sc.drift.gravity_noise,
        seed,
    )
