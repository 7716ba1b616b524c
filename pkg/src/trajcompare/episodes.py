"""Episode extraction: car-following pairs, decelerating-to-stop segments,
lane-change events with lead/lag context, and intersection discharge headways.

All extractors are pure functions over immutable trajectory sets and return
deterministic, sorted results. Trajectories must be resampled onto a shared
uniform grid first (see core.resample_set).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import LaneMap, Trajectory, TrajectorySet, derive_kinematics, wrap_angle

log = logging.getLogger(__name__)

PAIR_TYPES = ("HV_HV", "AV_HV", "HV_AV", "AV_AV")

_GRID_TOL = 1e-6


@dataclass(frozen=True)
class CFConfig:
    """Car-following pair criteria."""

    min_duration_s: float = 10.0
    max_gap_m: float = 50.0
    min_peak_speed_mps: float = 3.0
    lateral_band_m: float = 1.8  # mapless leader search: |lateral offset| < band


@dataclass(frozen=True)
class StopThresholds:
    """Decelerating-to-stop segmentation thresholds."""

    alpha_mps: float = 1.0
    beta_s: float = 1.0
    gamma_min_s: float = 3.0
    gamma_max_s: float = 10.0
    delta_m: float = 4.0
    speed_noise_tol: float = 0.05  # allowed per-frame speed rise in the decel run
    stop_speed_eps: float = 0.05  # follower counts as stopped below this


@dataclass(frozen=True)
class LCConfig:
    """Lane-change detection and episode settings."""

    heading_threshold_rad: float = 0.2
    turn_suppression_s: float = 5.0
    window_s: float = 3.0
    max_assign_dist_m: float = 10.0


@dataclass(frozen=True)
class CFEpisode:
    """Car-following episode: per-frame (spacing, relative speed, follower speed)."""

    follower_id: str
    leader_id: str
    follower_kind: str
    start_t: float
    dt: float
    series: np.ndarray  # (n, 3) columns g, dv, vf
    gap_bumper: Optional[np.ndarray] = None  # bumper-to-bumper gap, derived column

    def __post_init__(self):
        series = np.asarray(self.series, dtype=float)
        if series.ndim != 2 or series.shape[1] != 3 or series.shape[0] < 2:
            raise ValueError("series must be (n >= 2, 3)")
        if np.any(series[:, 0] <= 0):
            raise ValueError("spacing must stay positive throughout an episode")
        series.flags.writeable = False
        object.__setattr__(self, "series", series)
        if self.gap_bumper is not None:
            gb = np.asarray(self.gap_bumper, dtype=float)
            gb.flags.writeable = False
            object.__setattr__(self, "gap_bumper", gb)

    @property
    def n_frames(self) -> int:
        return int(self.series.shape[0])

    @property
    def end_t(self) -> float:
        return self.start_t + (self.n_frames - 1) * self.dt

    @property
    def duration(self) -> float:
        return (self.n_frames - 1) * self.dt

    def episode_id(self) -> str:
        return f"{self.follower_id}|{self.leader_id}|{self.start_t:.1f}"


@dataclass(frozen=True)
class StopSegment:
    """Slice of a car-following episode from deceleration onset through
    one second after the follower's stop onset."""

    follower_id: str
    leader_id: str
    follower_kind: str
    start_t: float
    dt: float
    stop_onset_t: float
    series: np.ndarray  # (n, 3) columns g, dv, vf
    parent: Optional[CFEpisode] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        series = np.asarray(self.series, dtype=float)
        if series.ndim != 2 or series.shape[1] != 3 or series.shape[0] < 2:
            raise ValueError("series must be (n >= 2, 3)")
        series.flags.writeable = False
        object.__setattr__(self, "series", series)

    @property
    def n_frames(self) -> int:
        return int(self.series.shape[0])

    @property
    def end_t(self) -> float:
        return self.start_t + (self.n_frames - 1) * self.dt

    @property
    def duration(self) -> float:
        return (self.n_frames - 1) * self.dt

    def segment_id(self) -> str:
        return f"{self.follower_id}|{self.leader_id}|{self.start_t:.1f}"


@dataclass(frozen=True)
class LaneChangeEvent:
    cross_t: float
    from_lane: str
    to_lane: str
    direction: str  # "left" | "right"
    vehicle_id: str = ""


@dataclass(frozen=True)
class LCEpisode:
    """Six-channel lane-change episode over [cross_t - 3 s, cross_t + 3 s].

    Channels: ego displacement (dx, dy) relative to the window start, lead
    and lag spacings (g_l, g_f), lead and lag relative speeds (dv_l, dv_f).
    """

    ego_id: str
    lead_id: str
    lag_id: str
    ego_kind: str
    cross_t: float
    start_t: float
    dt: float
    series: np.ndarray  # (n, 6) columns dx, dy, g_l, g_f, dv_l, dv_f

    def __post_init__(self):
        series = np.asarray(self.series, dtype=float)
        if series.ndim != 2 or series.shape[1] != 6 or series.shape[0] < 2:
            raise ValueError("series must be (n >= 2, 6)")
        series.flags.writeable = False
        object.__setattr__(self, "series", series)

    @property
    def n_frames(self) -> int:
        return int(self.series.shape[0])

    def episode_id(self) -> str:
        return f"{self.ego_id}|{self.cross_t:.1f}"


@dataclass(frozen=True)
class HeadwayRecord:
    lane_id: str
    queue_position: int  # >= 2
    headway: float
    pair_type: str
    leader_id: str = ""
    follower_id: str = ""
    pass_t: float = 0.0

    def __post_init__(self):
        if self.queue_position < 2:
            raise ValueError("queue_position starts at 2")
        if not self.headway > 0:
            raise ValueError("headway must be positive")
        if self.pair_type not in PAIR_TYPES:
            raise ValueError(f"pair_type must be one of {PAIR_TYPES}")


def classify_pair(leader_kind: str, follower_kind: str) -> str:
    if follower_kind == "AV":
        return "AV_HV" if leader_kind == "HV" else "AV_AV"
    return "HV_AV" if leader_kind == "AV" else "HV_HV"


# ---------------------------------------------------------------------------
# Frame alignment helpers

def _common_dt(tset: TrajectorySet) -> float:
    dt = None
    for traj in tset.values():
        traj_dt = traj.uniform_dt()
        if traj_dt is None:
            raise ValueError(f"vehicle {traj.vehicle_id!r} is not uniformly sampled")
        if dt is None:
            dt = traj_dt
        elif abs(dt - traj_dt) > 1e-9:
            raise ValueError("trajectories have differing sampling intervals")
    if dt is None:
        raise ValueError("trajectory set is empty")
    return dt


class _AlignedVehicle:
    """Trajectory indexed by global frame number k = round(t / dt)."""

    def __init__(self, traj: Trajectory, dt: float):
        self.traj = traj
        k0 = traj.t[0] / dt
        if abs(k0 - round(k0)) > _GRID_TOL:
            raise ValueError(
                f"vehicle {traj.vehicle_id!r} is not phase-aligned to the dt grid; "
                "use core.resample_set first"
            )
        self.k0 = int(round(k0))
        self.k1 = self.k0 + traj.n_frames - 1
        if traj.v is None:
            traj = derive_kinematics(traj)
        self.v = traj.v
        self.heading = traj.heading
        self.x = traj.x
        self.y = traj.y

    def has(self, k: int) -> bool:
        return self.k0 <= k <= self.k1

    def idx(self, k: int) -> int:
        return k - self.k0


def _align_all(tset: TrajectorySet, dt: float) -> dict:
    return {vid: _AlignedVehicle(tset[vid], dt) for vid in tset.vehicle_ids()}


# ---------------------------------------------------------------------------
# Lane assignment

def assign_lane(traj: Trajectory, lane_map: LaneMap,
                max_dist_m: float = 10.0) -> list:
    """Per-frame lane assignment.

    The first frame (and any frame after an unassigned one) is assigned to
    the globally nearest centerline; subsequent frames choose the nearest
    among the current lane, its successors, and its immediate left/right
    neighbors. Frames farther than max_dist_m from every candidate are
    unassigned (None).
    """
    if not lane_map.lanes:
        raise ValueError("lane map is empty")
    out = []
    current: Optional[str] = None
    for i in range(traj.n_frames):
        x, y = float(traj.x[i]), float(traj.y[i])
        if current is None:
            lane_id, dist, _ = lane_map.nearest_lane(x, y)
        else:
            lane = lane_map[current]
            candidates = {current, *lane.successors}
            if lane.left_neighbor:
                candidates.add(lane.left_neighbor)
            if lane.right_neighbor:
                candidates.add(lane.right_neighbor)
            lane_id, dist, _ = lane_map.nearest_lane(x, y, candidates)
        if lane_id is None or dist > max_dist_m:
            out.append(None)
            current = None
        else:
            out.append(lane_id)
            current = lane_id
    return out


def detect_lane_changes(traj: Trajectory, lane_map: LaneMap,
                        cfg: LCConfig = LCConfig(),
                        assignments: Optional[Sequence] = None) -> list:
    """Lane-change events: assignment transitions to a left/right neighbor.

    Suppresses transitions to successor lanes, transitions touching
    interpolated lanes, events within the turn-suppression window after an
    allows_turn lane, and events whose heading change across the +/- window
    reaches the heading threshold.
    """
    dt = traj.uniform_dt()
    if dt is None:
        raise ValueError("trajectory must be uniformly sampled")
    if assignments is None:
        assignments = assign_lane(traj, lane_map, cfg.max_assign_dist_m)
    if traj.heading is None:
        traj = derive_kinematics(traj)
    window = int(round(cfg.window_s / dt))
    suppress = int(round(cfg.turn_suppression_s / dt))
    events = []
    for k in range(1, traj.n_frames):
        prev, cur = assignments[k - 1], assignments[k]
        if prev is None or cur is None or prev == cur:
            continue
        prev_lane = lane_map[prev]
        if cur == prev_lane.left_neighbor:
            direction = "left"
        elif cur == prev_lane.right_neighbor:
            direction = "right"
        else:
            continue  # successor / re-seeded assignment, not a lane change
        if prev_lane.is_interpolated or lane_map[cur].is_interpolated:
            continue
        recent = assignments[max(0, k - suppress):k]
        if any(a is not None and lane_map[a].allows_turn for a in recent):
            continue
        i0 = max(0, k - window)
        i1 = min(traj.n_frames - 1, k + window)
        heading_change = abs(wrap_angle(float(traj.heading[i1] - traj.heading[i0])))
        if heading_change >= cfg.heading_threshold_rad:
            continue
        events.append(LaneChangeEvent(
            cross_t=float(traj.t[k]), from_lane=prev, to_lane=cur,
            direction=direction, vehicle_id=traj.vehicle_id,
        ))
    return events


# ---------------------------------------------------------------------------
# Car-following pairs

def _positions_for_cf(tset: TrajectorySet, lane_map: Optional[LaneMap]):
    """Per-vehicle longitudinal positions and same-lane predicate inputs.

    With a map: arc length along the per-frame assigned lane. Without one:
    raw x (assumed to increase along the travel direction) and lateral y.
    """
    if lane_map is not None:
        lanes = {}
        arcs = {}
        for vid in tset.vehicle_ids():
            traj = tset[vid]
            assignment = assign_lane(traj, lane_map)
            s = np.full(traj.n_frames, np.nan)
            for i, lid in enumerate(assignment):
                if lid is not None:
                    s[i] = lane_map[lid].project(float(traj.x[i]), float(traj.y[i]))[1]
            lanes[vid] = assignment
            arcs[vid] = s
        return lanes, arcs
    return None, {vid: tset[vid].x for vid in tset.vehicle_ids()}


def extract_cf_pairs(tset: TrajectorySet, cfg: CFConfig = CFConfig(),
                     lane_map: Optional[LaneMap] = None) -> list:
    """Maximal car-following episodes satisfying duration, gap, and speed criteria.

    The leader at each frame is the nearest vehicle ahead in the same lane
    (lane-map assignment when available, otherwise a lateral-offset band).
    Episodes are maximal runs with a constant leader and gap within bounds;
    runs shorter than the minimum duration or whose follower never exceeds
    the peak-speed threshold are dropped.
    """
    if len(tset) < 2:
        return []
    lane_map = lane_map if lane_map is not None else tset.lane_map
    dt = _common_dt(tset)
    aligned = _align_all(tset, dt)
    lane_assign, positions = _positions_for_cf(tset, lane_map)
    vids = tset.vehicle_ids()
    episodes = []
    for fid in vids:
        fol = aligned[fid]
        fol_traj = tset[fid]
        n = fol_traj.n_frames
        leader_at = [None] * n  # (leader_id, g) per local frame
        for i in range(n):
            k = fol.k0 + i
            pos_f = positions[fid][i]
            if lane_assign is not None:
                lane_f = lane_assign[fid][i]
                if lane_f is None or not np.isfinite(pos_f):
                    continue
            best = None
            for vid in vids:
                if vid == fid:
                    continue
                other = aligned[vid]
                if not other.has(k):
                    continue
                j = other.idx(k)
                if lane_assign is not None:
                    if lane_assign[vid][j] != lane_f:
                        continue
                else:
                    if abs(float(fol_traj.y[i]) - float(other.y[j])) >= cfg.lateral_band_m:
                        continue
                gap = float(positions[vid][j] - pos_f)
                if gap <= 0 or not np.isfinite(gap):
                    continue
                if best is None or gap < best[1] or (gap == best[1] and vid < best[0]):
                    best = (vid, gap)
            if best is not None and best[1] <= cfg.max_gap_m:
                leader_at[i] = best
        episodes.extend(
            _episodes_from_leader_runs(fol_traj, aligned, leader_at, dt, cfg, tset)
        )
    episodes.sort(key=lambda e: (e.follower_id, e.start_t, e.leader_id))
    return episodes


def _episodes_from_leader_runs(fol_traj, aligned, leader_at, dt, cfg, tset):
    out = []
    n = len(leader_at)
    min_frames = int(round(cfg.min_duration_s / dt))
    fid = fol_traj.vehicle_id
    fol = aligned[fid]
    i = 0
    while i < n:
        if leader_at[i] is None:
            i += 1
            continue
        lid = leader_at[i][0]
        j = i
        while j + 1 < n and leader_at[j + 1] is not None and leader_at[j + 1][0] == lid:
            j += 1
        if j - i >= min_frames and j > i:
            vf = fol.v[i:j + 1]
            if np.max(vf) > cfg.min_peak_speed_mps:
                lead = aligned[lid]
                k_range = np.arange(fol.k0 + i, fol.k0 + j + 1)
                g = np.array([leader_at[p][1] for p in range(i, j + 1)])
                vl = lead.v[k_range - lead.k0]
                series = np.column_stack([g, vl - vf, vf])
                half_lengths = (tset[fid].length + tset[lid].length) / 2.0
                out.append(CFEpisode(
                    follower_id=fid,
                    leader_id=lid,
                    follower_kind=fol_traj.kind,
                    start_t=float(fol.k0 + i) * dt,
                    dt=dt,
                    series=series,
                    gap_bumper=g - half_lengths,
                ))
        i = j + 1
    return out


# ---------------------------------------------------------------------------
# Decelerating-to-stop segments

def _runs(mask: np.ndarray) -> list:
    """Maximal runs of True as (start, end) inclusive index pairs."""
    out = []
    start = None
    for i, flag in enumerate(mask):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            out.append((start, i - 1))
            start = None
    if start is not None:
        out.append((start, len(mask) - 1))
    return out


def extract_stop_segments(episodes: Sequence[CFEpisode],
                          th: StopThresholds = StopThresholds()) -> list:
    """Decelerating-to-stop segments of car-following episodes.

    A stopping window requires both vehicles below alpha for at least beta
    seconds. The follower's stop onset is the first frame at or below the
    stop-speed epsilon inside its own slow run (falling back to the run
    start); the segment runs from the deceleration onset (start of the
    maximal non-increasing follower-speed run, with a small per-frame noise
    tolerance) through exactly one second after the stop onset, capped at
    gamma_max. Segments shorter than gamma_min or with spacing above delta
    at any stopped frame are discarded.
    """
    segments = []
    for episode in episodes:
        dt = episode.dt
        g = episode.series[:, 0]
        vf = episode.series[:, 2]
        vlead = episode.series[:, 1] + vf
        n = vf.size
        both_slow = (vf < th.alpha_mps) & (vlead < th.alpha_mps)
        fol_slow = vf < th.alpha_mps
        one_second = int(round(1.0 / dt))
        min_beta = th.beta_s / dt
        seen = set()
        for w0, w1 in _runs(both_slow):
            if (w1 - w0) < min_beta - 1e-9:
                continue
            # follower's own slow run containing the window start
            r0 = w0
            while r0 > 0 and fol_slow[r0 - 1]:
                r0 -= 1
            r1 = w0
            while r1 + 1 < n and fol_slow[r1 + 1]:
                r1 += 1
            stop_onset = None
            for k in range(r0, r1 + 1):
                if vf[k] <= th.stop_speed_eps:
                    stop_onset = k
                    break
            if stop_onset is None:
                stop_onset = r0
            end = stop_onset + one_second
            if end >= n:
                continue  # the required 1 s of stopped data is unavailable
            onset = stop_onset
            while onset > 0 and vf[onset] <= vf[onset - 1] + th.speed_noise_tol:
                onset -= 1
            max_frames = int(round(th.gamma_max_s / dt))
            onset = max(onset, end - max_frames)
            if (end - onset) * dt < th.gamma_min_s - 1e-9:
                continue
            if np.any(g[stop_onset:end + 1] > th.delta_m):
                continue
            key = (episode.episode_id(), onset, end)
            if key in seen:
                continue
            seen.add(key)
            segments.append(StopSegment(
                follower_id=episode.follower_id,
                leader_id=episode.leader_id,
                follower_kind=episode.follower_kind,
                start_t=episode.start_t + onset * dt,
                dt=dt,
                stop_onset_t=episode.start_t + stop_onset * dt,
                series=episode.series[onset:end + 1],
                parent=episode,
            ))
    segments.sort(key=lambda s: (s.follower_id, s.start_t, s.leader_id))
    return segments


# ---------------------------------------------------------------------------
# Lane-change episodes

def build_lc_episode(event: LaneChangeEvent, tset: TrajectorySet,
                     lane_map: LaneMap, cfg: LCConfig = LCConfig()):
    """Six-channel lane-change episode, or None when the window is truncated
    or a lead/lag vehicle is missing from the target lane at any frame."""
    episode, _ = build_lc_episode_with_reason(event, tset, lane_map, cfg)
    return episode


def _lc_context(tset: TrajectorySet, lane_map: LaneMap, cfg: LCConfig):
    dt = _common_dt(tset)
    aligned = _align_all(tset, dt)
    assignments = {
        vid: assign_lane(tset[vid], lane_map, cfg.max_assign_dist_m)
        for vid in tset.vehicle_ids()
    }
    return dt, aligned, assignments


def build_lc_episode_with_reason(event: LaneChangeEvent, tset: TrajectorySet,
                                 lane_map: LaneMap,
                                 cfg: LCConfig = LCConfig(),
                                 _context=None):
    dt, aligned, assignments = _context or _lc_context(tset, lane_map, cfg)
    ego = aligned[event.vehicle_id]
    w = int(round(cfg.window_s / dt))
    k_cross = int(round(event.cross_t / dt))
    k_lo, k_hi = k_cross - w, k_cross + w
    if not (ego.has(k_lo) and ego.has(k_hi)):
        return None, "boundary-truncation"
    target = lane_map[event.to_lane]

    def arc(vid: str, k: int) -> float:
        veh = aligned[vid]
        i = veh.idx(k)
        return target.project(float(veh.x[i]), float(veh.y[i]))[1]

    s_ego_cross = arc(event.vehicle_id, k_cross)
    lead_id, lag_id = None, None
    lead_s, lag_s = math.inf, -math.inf
    for vid in tset.vehicle_ids():
        if vid == event.vehicle_id:
            continue
        veh = aligned[vid]
        if not veh.has(k_cross):
            continue
        if assignments[vid][veh.idx(k_cross)] != event.to_lane:
            continue
        s = arc(vid, k_cross)
        if s > s_ego_cross and s < lead_s:
            lead_id, lead_s = vid, s
        elif s < s_ego_cross and s > lag_s:
            lag_id, lag_s = vid, s
    if lead_id is None:
        return None, "no-lead"
    if lag_id is None:
        return None, "no-lag"
    for vid in (lead_id, lag_id):
        veh = aligned[vid]
        for k in range(k_lo, k_hi + 1):
            if not veh.has(k) or assignments[vid][veh.idx(k)] != event.to_lane:
                return None, "lead-or-lag-absent"

    ks = np.arange(k_lo, k_hi + 1)
    ego_idx = ks - ego.k0
    dx = ego.x[ego_idx] - ego.x[ego_idx[0]]
    dy = ego.y[ego_idx] - ego.y[ego_idx[0]]
    s_ego = np.array([arc(event.vehicle_id, k) for k in ks])
    s_lead = np.array([arc(lead_id, k) for k in ks])
    s_lag = np.array([arc(lag_id, k) for k in ks])
    v_ego = ego.v[ego_idx]
    v_lead = aligned[lead_id].v[ks - aligned[lead_id].k0]
    v_lag = aligned[lag_id].v[ks - aligned[lag_id].k0]
    series = np.column_stack([
        dx, dy, s_lead - s_ego, s_ego - s_lag, v_lead - v_ego, v_ego - v_lag,
    ])
    return LCEpisode(
        ego_id=event.vehicle_id,
        lead_id=lead_id,
        lag_id=lag_id,
        ego_kind=tset[event.vehicle_id].kind,
        cross_t=event.cross_t,
        start_t=float(ks[0]) * dt,
        dt=dt,
        series=series,
    ), None


def extract_lane_changes(tset: TrajectorySet,
                         lane_map: Optional[LaneMap] = None,
                         cfg: LCConfig = LCConfig()) -> tuple:
    """Detect and build all lane-change episodes in a set.

    Returns (episodes, events, rejection counts by reason).
    """
    lane_map = lane_map if lane_map is not None else tset.lane_map
    if lane_map is None:
        raise ValueError("lane-change extraction requires a lane map")
    context = _lc_context(tset, lane_map, cfg)
    assignments = context[2]
    events = []
    for vid in tset.vehicle_ids():
        events.extend(detect_lane_changes(tset[vid], lane_map, cfg,
                                          assignments=assignments[vid]))
    events.sort(key=lambda e: (e.cross_t, e.vehicle_id))
    episodes = []
    rejections: dict = {}
    for event in events:
        episode, reason = build_lc_episode_with_reason(event, tset, lane_map, cfg,
                                                       _context=context)
        if episode is not None:
            episodes.append(episode)
        else:
            rejections[reason] = rejections.get(reason, 0) + 1
    return episodes, events, rejections


# ---------------------------------------------------------------------------
# Discharge headways

def extract_discharge_headways(tset: TrajectorySet,
                               lane_map: Optional[LaneMap] = None,
                               waiting_speed_mps: float = 0.5) -> list:
    """Discharge headways of initially stopped queues on through lanes.

    Per lane with allows_turn False and a stop line: vehicles present and
    waiting (speed below the waiting threshold) at the dataset's first time
    step are ordered by centerline distance to the stop line. The whole lane
    is discarded when the most downstream vehicle is initially moving. A
    vehicle that never passes the stop line, or that turns after passing it,
    truncates the queue from its position upstream. Headways are emitted
    from queue position 2 as differences of front-bumper stop-line crossing
    times.
    """
    lane_map = lane_map if lane_map is not None else tset.lane_map
    if lane_map is None:
        raise ValueError("discharge-headway extraction requires a lane map")
    if len(tset) == 0:
        return []
    dt = _common_dt(tset)
    aligned = _align_all(tset, dt)
    t0 = min(float(tset[vid].t[0]) for vid in tset.vehicle_ids())
    k_first = int(round(t0 / dt))
    assignments = {vid: assign_lane(tset[vid], lane_map) for vid in tset.vehicle_ids()}
    records = []
    for lane_id in lane_map.lane_ids():
        lane = lane_map[lane_id]
        if lane.allows_turn:
            continue
        if lane.stop_line is None:
            log.warning("lane %s has no stop line; skipped", lane_id)
            continue
        s_stop = lane.project(*lane.stop_line)[1]
        queue = []
        for vid in tset.vehicle_ids():
            veh = aligned[vid]
            if not veh.has(k_first):
                continue
            i0 = veh.idx(k_first)
            if assignments[vid][i0] != lane_id:
                continue
            s0 = lane.project(float(veh.x[i0]), float(veh.y[i0]))[1]
            queue.append((s_stop - s0, vid))
        if not queue:
            continue
        queue.sort()
        ordered = [vid for _, vid in queue]
        head = aligned[ordered[0]]
        if head.v[head.idx(k_first)] >= waiting_speed_mps:
            continue  # most downstream vehicle moving: signal presumed green
        retained = []
        for position, vid in enumerate(ordered, start=1):
            veh = aligned[vid]
            if veh.v[veh.idx(k_first)] >= waiting_speed_mps:
                break  # not waiting: free-flow arrival truncates the queue
            pass_t = _stop_line_pass_time(tset[vid], veh, lane, s_stop)
            if pass_t is None:
                break  # never passes the stop line
            if _turns_after(assignments[vid], lane_id, lane_map, veh, pass_t, dt):
                break
            retained.append((position, vid, pass_t))
        for (p_prev, v_prev, t_prev), (p_cur, v_cur, t_cur) in zip(retained, retained[1:]):
            headway = t_cur - t_prev
            if headway <= 0:
                break
            records.append(HeadwayRecord(
                lane_id=lane_id,
                queue_position=p_cur,
                headway=headway,
                pair_type=classify_pair(tset[v_prev].kind, tset[v_cur].kind),
                leader_id=v_prev,
                follower_id=v_cur,
                pass_t=t_cur,
            ))
    records.sort(key=lambda r: (r.lane_id, r.queue_position))
    return records


def _stop_line_pass_time(traj: Trajectory, veh: _AlignedVehicle, lane,
                         s_stop: float) -> Optional[float]:
    """First frame time at which the front bumper reaches the stop line."""
    heading = veh.heading
    if heading is None:
        heading = derive_kinematics(traj).heading
    half = traj.length / 2.0
    for i in range(traj.n_frames):
        fx = float(veh.x[i]) + half * math.cos(heading[i])
        fy = float(veh.y[i]) + half * math.sin(heading[i])
        if lane.project(fx, fy)[1] >= s_stop - 1e-9:
            return float(traj.t[i])
    return None


def _turns_after(assignment, lane_id, lane_map, veh: _AlignedVehicle,
                 pass_t: float, dt: float) -> bool:
    """True when the first lane entered after passing the stop line allows turns."""
    k_pass = int(round(pass_t / dt))
    for i in range(max(0, veh.idx(k_pass)), len(assignment)):
        lid = assignment[i]
        if lid is None or lid == lane_id:
            continue
        return lane_map[lid].allows_turn
    return False


# ---------------------------------------------------------------------------
# Episode archives (JSONL, schema versioned, config echoed)

def _write_archive(path, meta_schema: str, config: Optional[dict], lines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {"schema": meta_schema, "kind": "meta", "config": config or {}}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for doc in lines:
            fh.write(json.dumps(doc, sort_keys=True) + "\n")


def _read_archive(path, expected_schema: str):
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            doc = json.loads(stripped)
            if doc.get("kind") == "meta":
                continue
            if doc.get("schema") != expected_schema:
                raise ValueError(
                    f"{path}: line {line_no}: expected schema {expected_schema!r}"
                )
            yield doc


def save_cf_episodes(episodes: Sequence[CFEpisode], path,
                     config: Optional[dict] = None) -> None:
    _write_archive(path, "cf-episode-archive/1", config, (
        {
            "schema": "cf-episode/1",
            "follower_id": e.follower_id,
            "leader_id": e.leader_id,
            "follower_kind": e.follower_kind,
            "start_t": e.start_t,
            "dt": e.dt,
            "g": e.series[:, 0].tolist(),
            "dv": e.series[:, 1].tolist(),
            "vf": e.series[:, 2].tolist(),
        }
        for e in episodes
    ))


def load_cf_episodes(path) -> list:
    out = []
    for doc in _read_archive(path, "cf-episode/1"):
        out.append(CFEpisode(
            follower_id=doc["follower_id"],
            leader_id=doc["leader_id"],
            follower_kind=doc["follower_kind"],
            start_t=float(doc["start_t"]),
            dt=float(doc["dt"]),
            series=np.column_stack([doc["g"], doc["dv"], doc["vf"]]),
        ))
    return out


def save_stop_segments(segments: Sequence[StopSegment], path,
                       config: Optional[dict] = None) -> None:
    _write_archive(path, "stop-segment-archive/1", config, (
        {
            "schema": "stop-segment/1",
            "follower_id": s.follower_id,
            "leader_id": s.leader_id,
            "follower_kind": s.follower_kind,
            "start_t": s.start_t,
            "dt": s.dt,
            "stop_onset_t": s.stop_onset_t,
            "g": s.series[:, 0].tolist(),
            "dv": s.series[:, 1].tolist(),
            "vf": s.series[:, 2].tolist(),
        }
        for s in segments
    ))


def load_stop_segments(path) -> list:
    out = []
    for doc in _read_archive(path, "stop-segment/1"):
        out.append(StopSegment(
            follower_id=doc["follower_id"],
            leader_id=doc["leader_id"],
            follower_kind=doc["follower_kind"],
            start_t=float(doc["start_t"]),
            dt=float(doc["dt"]),
            stop_onset_t=float(doc["stop_onset_t"]),
            series=np.column_stack([doc["g"], doc["dv"], doc["vf"]]),
        ))
    return out


def save_lc_episodes(episodes: Sequence[LCEpisode], path,
                     config: Optional[dict] = None) -> None:
    _write_archive(path, "lc-episode-archive/1", config, (
        {
            "schema": "lc-episode/1",
            "ego_id": e.ego_id,
            "lead_id": e.lead_id,
            "lag_id": e.lag_id,
            "ego_kind": e.ego_kind,
            "cross_t": e.cross_t,
            "start_t": e.start_t,
            "dt": e.dt,
            "channels": e.series.T.tolist(),
        }
        for e in episodes
    ))


def load_lc_episodes(path) -> list:
    out = []
    for doc in _read_archive(path, "lc-episode/1"):
        out.append(LCEpisode(
            ego_id=doc["ego_id"],
            lead_id=doc["lead_id"],
            lag_id=doc["lag_id"],
            ego_kind=doc["ego_kind"],
            cross_t=float(doc["cross_t"]),
            start_t=float(doc["start_t"]),
            dt=float(doc["dt"]),
            series=np.array(doc["channels"], dtype=float).T,
        ))
    return out
