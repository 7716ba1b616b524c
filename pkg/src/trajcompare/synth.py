"""Scripted synthetic scenes with exact kinematic ground truth.

Vehicle motion is programmed as piecewise-constant-acceleration segments
(speeds clamped at zero) plus optional smooth lateral shifts, integrated in
closed form per 0.1 s step, so every derived quantity has an analytic
oracle. Scenes can inject bivariate Gaussian position noise and emulate the
temporal smoothing of off-board tracking pipelines with a centered moving
average.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .core import (
    DT_DEFAULT,
    Lane,
    LaneMap,
    Trajectory,
    TrajectorySet,
    derive_kinematics,
)
from .errors import ErrorModel2D


class SceneScriptError(ValueError):
    """The script produces an invalid scene (for example, a collision)."""


@dataclass(frozen=True)
class MotionPhase:
    duration_s: float
    accel_mps2: float


@dataclass(frozen=True)
class LateralShift:
    """Smooth lateral offset ramp: half-cosine from 0 to offset_m."""

    start_s: float
    duration_s: float
    offset_m: float


@dataclass(frozen=True)
class VehicleScript:
    vehicle_id: str
    kind: str = "HV"
    x0: float = 0.0
    y0: float = 0.0
    v0: float = 0.0
    start_s: float = 0.0
    length: float = 4.5
    width: float = 1.8
    phases: tuple = ()
    lateral: Optional[LateralShift] = None


@dataclass(frozen=True)
class LaneSpec:
    """Straight lane along constant y, for scripted lane maps."""

    lane_id: str
    y: float
    x_start: float
    x_end: float
    left_neighbor: Optional[str] = None
    right_neighbor: Optional[str] = None
    successors: tuple = ()
    is_interpolated: bool = False
    stop_line_x: Optional[float] = None
    allows_turn: bool = False


@dataclass(frozen=True)
class SceneScript:
    kind: str  # platoon_stop | queue_discharge | lane_change
    vehicles: tuple
    duration_s: float
    dt: float = DT_DEFAULT
    noise: Optional[ErrorModel2D] = None
    smoother_window: Optional[int] = None
    seed: int = 0
    lanes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        object.__setattr__(self, "lanes", tuple(self.lanes))


@dataclass(frozen=True)
class SceneResult:
    truth: TrajectorySet
    observed: TrajectorySet


def _integrate_step(v: float, a: float, dt: float) -> tuple:
    """Advance one step of constant acceleration with speed clamped at zero."""
    v_next = v + a * dt
    if v_next >= 0.0:
        return v * dt + 0.5 * a * dt * dt, v_next
    if v <= 0.0:
        return 0.0, 0.0
    t_stop = -v / a
    return v * t_stop + 0.5 * a * t_stop * t_stop, 0.0


def _program_arrays(script: VehicleScript, n: int, dt: float):
    """Exact per-step longitudinal positions, speeds, and lateral offsets."""
    x = np.empty(n)
    vx = np.empty(n)
    x[0], vx[0] = script.x0, script.v0
    schedule = []
    t_accum = script.start_s
    for phase in script.phases:
        schedule.append((t_accum, t_accum + phase.duration_s, phase.accel_mps2))
        t_accum += phase.duration_s

    def accel_at(t: float) -> float:
        for t0, t1, a in schedule:
            if t0 - 1e-9 <= t < t1 - 1e-9:
                return a
        return 0.0

    for k in range(1, n):
        t = (k - 1) * dt
        a = accel_at(t)
        dxk, v_next = _integrate_step(vx[k - 1], a, dt)
        x[k] = x[k - 1] + dxk
        vx[k] = v_next

    y = np.full(n, script.y0)
    vy = np.zeros(n)
    shift = script.lateral
    if shift is not None:
        t = dt * np.arange(n)
        s = np.clip((t - shift.start_s) / shift.duration_s, 0.0, 1.0)
        y = script.y0 + shift.offset_m * (1.0 - np.cos(np.pi * s)) / 2.0
        vy = np.where(
            (s > 0.0) & (s < 1.0),
            shift.offset_m * np.pi / (2.0 * shift.duration_s) * np.sin(np.pi * s),
            0.0,
        )
    return x, vx, y, vy


def _truth_trajectory(script: VehicleScript, n: int, dt: float) -> Trajectory:
    x, vx, y, vy = _program_arrays(script, n, dt)
    speed = np.hypot(vx, vy)
    heading = np.empty(n)
    prev = 0.0
    for k in range(n):
        if speed[k] > 1e-9:
            prev = math.atan2(vy[k], vx[k])
        heading[k] = prev
    return Trajectory(
        vehicle_id=script.vehicle_id,
        kind=script.kind,
        length=script.length,
        width=script.width,
        t=dt * np.arange(n),
        x=x,
        y=y,
        v=speed,
        heading=heading,
    )


def _check_collisions(trajs: dict) -> None:
    """Vehicles sharing an initial lane band must keep positive spacing."""
    scripted = sorted(trajs.values(), key=lambda tr: (float(tr.y[0]), float(tr.x[0])))
    for a, b in zip(scripted, scripted[1:]):
        if abs(float(a.y[0]) - float(b.y[0])) >= 1.0:
            continue
        spacing = b.x - a.x  # b starts ahead by construction of the sort
        if np.any(spacing <= 0):
            raise SceneScriptError(
                f"collision between {a.vehicle_id!r} and {b.vehicle_id!r}"
            )


def build_lane_map(lanes: Sequence[LaneSpec]) -> Optional[LaneMap]:
    if not lanes:
        return None
    out = {}
    for spec in lanes:
        out[spec.lane_id] = Lane(
            lane_id=spec.lane_id,
            centerline=[[spec.x_start, spec.y], [spec.x_end, spec.y]],
            left_neighbor=spec.left_neighbor,
            right_neighbor=spec.right_neighbor,
            successors=tuple(spec.successors),
            is_interpolated=spec.is_interpolated,
            stop_line=(spec.stop_line_x, spec.y) if spec.stop_line_x is not None else None,
            allows_turn=spec.allows_turn,
        )
    return LaneMap(lanes=out)


def generate_scene(script: SceneScript) -> SceneResult:
    """Integrate the scripted programs and produce truth plus observed sets.

    The observed set adds per-frame position noise (when a noise model is
    set), applies the moving-average smoother (when a window is set), and
    re-derives kinematics; with neither, it is the truth set unchanged.
    """
    if script.duration_s <= 0 or script.dt <= 0:
        raise SceneScriptError("duration and dt must be positive")
    n = int(round(script.duration_s / script.dt)) + 1
    truth = {}
    for veh in script.vehicles:
        if veh.vehicle_id in truth:
            raise SceneScriptError(f"duplicate vehicle_id {veh.vehicle_id!r}")
        truth[veh.vehicle_id] = _truth_trajectory(veh, n, script.dt)
    _check_collisions(truth)
    lane_map = build_lane_map(script.lanes)
    truth_set = TrajectorySet(trajectories=truth, lane_map=lane_map,
                              source_tag="truth")
    if script.noise is None and script.smoother_window is None:
        return SceneResult(truth=truth_set, observed=truth_set)

    rng = np.random.default_rng(script.seed)
    observed = {}
    for vid in sorted(truth):
        traj = truth[vid]
        if script.noise is not None:
            draws = rng.multivariate_normal(
                [script.noise.mu_x, script.noise.mu_y],
                script.noise.covariance(), size=traj.n_frames,
            )
            traj = replace(traj, x=traj.x + draws[:, 0], y=traj.y + draws[:, 1])
        if script.smoother_window is not None:
            traj = apply_smoother(traj, script.smoother_window)
        else:
            traj = derive_kinematics(traj)
        observed[vid] = traj
    observed_set = TrajectorySet(trajectories=observed, lane_map=lane_map,
                                 source_tag="observed")
    return SceneResult(truth=truth_set, observed=observed_set)


def apply_smoother(traj: Trajectory, window: int) -> Trajectory:
    """Centered moving average on positions, emulating tracking-pipeline smoothing.

    Endpoints use shrunken symmetric windows; kinematics are re-derived.
    The window must be odd and at least 3.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be an odd integer >= 3")
    half = window // 2
    n = traj.n_frames

    def smooth(values: np.ndarray) -> np.ndarray:
        out = np.empty(n)
        csum = np.concatenate(([0.0], np.cumsum(values)))
        for i in range(n):
            h = min(half, i, n - 1 - i)
            out[i] = (csum[i + h + 1] - csum[i - h]) / (2 * h + 1)
        return out

    smoothed = replace(traj, x=smooth(traj.x), y=smooth(traj.y),
                       v=None, heading=None)
    return derive_kinematics(smoothed)


# ---------------------------------------------------------------------------
# Script JSON interchange

def scene_script_to_dict(script: SceneScript) -> dict:
    doc = {
        "kind": script.kind,
        "duration_s": script.duration_s,
        "dt": script.dt,
        "seed": script.seed,
        "vehicles": [
            {
                "vehicle_id": v.vehicle_id,
                "kind": v.kind,
                "x0": v.x0,
                "y0": v.y0,
                "v0": v.v0,
                "start_s": v.start_s,
                "length": v.length,
                "width": v.width,
                "phases": [[p.duration_s, p.accel_mps2] for p in v.phases],
                "lateral": (
                    [v.lateral.start_s, v.lateral.duration_s, v.lateral.offset_m]
                    if v.lateral else None
                ),
            }
            for v in script.vehicles
        ],
        "lanes": [
            {
                "lane_id": l.lane_id,
                "y": l.y,
                "x_start": l.x_start,
                "x_end": l.x_end,
                "left_neighbor": l.left_neighbor,
                "right_neighbor": l.right_neighbor,
                "successors": list(l.successors),
                "is_interpolated": l.is_interpolated,
                "stop_line_x": l.stop_line_x,
                "allows_turn": l.allows_turn,
            }
            for l in script.lanes
        ],
    }
    if script.noise is not None:
        doc["noise"] = {
            "mu": [script.noise.mu_x, script.noise.mu_y],
            "sigma": [script.noise.sigma_x, script.noise.sigma_y],
            "rho": script.noise.rho,
        }
    if script.smoother_window is not None:
        doc["smoother_window"] = script.smoother_window
    return doc


def scene_script_from_dict(doc: dict) -> SceneScript:
    vehicles = []
    for v in doc["vehicles"]:
        lateral = v.get("lateral")
        vehicles.append(VehicleScript(
            vehicle_id=v["vehicle_id"],
            kind=v.get("kind", "HV"),
            x0=float(v.get("x0", 0.0)),
            y0=float(v.get("y0", 0.0)),
            v0=float(v.get("v0", 0.0)),
            start_s=float(v.get("start_s", 0.0)),
            length=float(v.get("length", 4.5)),
            width=float(v.get("width", 1.8)),
            phases=tuple(MotionPhase(float(d), float(a)) for d, a in v.get("phases", [])),
            lateral=LateralShift(*[float(c) for c in lateral]) if lateral else None,
        ))
    lanes = tuple(
        LaneSpec(
            lane_id=l["lane_id"],
            y=float(l["y"]),
            x_start=float(l["x_start"]),
            x_end=float(l["x_end"]),
            left_neighbor=l.get("left_neighbor"),
            right_neighbor=l.get("right_neighbor"),
            successors=tuple(l.get("successors") or ()),
            is_interpolated=bool(l.get("is_interpolated", False)),
            stop_line_x=l.get("stop_line_x"),
            allows_turn=bool(l.get("allows_turn", False)),
        )
        for l in doc.get("lanes", [])
    )
    noise = None
    if "noise" in doc:
        nd = doc["noise"]
        noise = ErrorModel2D(
            mu_x=float(nd["mu"][0]), mu_y=float(nd["mu"][1]),
            sigma_x=float(nd["sigma"][0]), sigma_y=float(nd["sigma"][1]),
            rho=float(nd["rho"]),
        )
    return SceneScript(
        kind=doc["kind"],
        vehicles=tuple(vehicles),
        duration_s=float(doc["duration_s"]),
        dt=float(doc.get("dt", DT_DEFAULT)),
        noise=noise,
        smoother_window=doc.get("smoother_window"),
        seed=int(doc.get("seed", 0)),
        lanes=lanes,
    )


def load_scene_script(path) -> SceneScript:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_script_from_dict(json.load(fh))


def save_scene_script(script: SceneScript, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_script_to_dict(script), fh, indent=2, sort_keys=True)
        fh.write("\n")
