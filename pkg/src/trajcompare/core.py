"""Shared trajectory data model, interchange I/O, and kinematic derivation.

Positions are planar and metric (a projected frame such as UTM); time is in
seconds. The pipeline-wide sampling interval is 0.1 s. All types are
immutable after construction and safe to share across concurrent workers.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

DT_DEFAULT = 0.1

VEHICLE_KINDS = ("AV", "HV")

_MIN_DISPLACEMENT = 1e-6  # below this, heading is held from the previous frame


class TrajectoryError(Exception):
    """Base class for trajectory data errors."""


class ParseError(TrajectoryError):
    """A row could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class SchemaError(TrajectoryError):
    """Input violates the interchange schema."""


class EmptyInputError(TrajectoryError):
    """Input contains no trajectory rows."""


class TooShortError(TrajectoryError):
    """Operation requires more frames than the trajectory has."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.remainder(theta, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


def wrap_angles(theta) -> np.ndarray:
    """Vectorized wrap to (-pi, pi]."""
    return np.pi - np.remainder(np.pi - np.asarray(theta, dtype=float), 2.0 * np.pi)


def _readonly(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 1:
        raise SchemaError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Frame:
    """One time sample of a vehicle state."""

    t: float
    x: float
    y: float
    v: Optional[float] = None
    heading: Optional[float] = None


@dataclass(frozen=True)
class Trajectory:
    """Uniformly or irregularly sampled kinematic history of one vehicle."""

    vehicle_id: str
    kind: str
    length: float
    width: float
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    v: Optional[np.ndarray] = None
    heading: Optional[np.ndarray] = None
    lane_tags: Optional[tuple] = None  # raw per-row lane_id values, round-trip only

    def __post_init__(self):
        if self.kind not in VEHICLE_KINDS:
            raise SchemaError(f"kind must be one of {VEHICLE_KINDS}, got {self.kind!r}")
        if not (self.length > 0 and self.width > 0):
            raise SchemaError("length and width must be strictly positive")
        t = _readonly(self.t, "t")
        x = _readonly(self.x, "x")
        y = _readonly(self.y, "y")
        if t.size == 0:
            raise SchemaError("frames must be non-empty")
        if x.shape != t.shape or y.shape != t.shape:
            raise SchemaError("t, x, y must have equal length")
        if t[0] < 0:
            raise SchemaError("t must be non-negative")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise SchemaError("t must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        for name in ("v", "heading"):
            arr = getattr(self, name)
            if arr is not None:
                arr = _readonly(arr, name)
                if arr.shape != t.shape:
                    raise SchemaError(f"{name} must match frame count")
                if name == "heading":
                    arr = _readonly(wrap_angles(arr), name)
                object.__setattr__(self, name, arr)
        if self.lane_tags is not None:
            tags = tuple(self.lane_tags)
            if len(tags) != t.size:
                raise SchemaError("lane_tags must match frame count")
            object.__setattr__(self, "lane_tags", tags)

    @property
    def n_frames(self) -> int:
        return int(self.t.size)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def uniform_dt(self, tol: float = 1e-9) -> Optional[float]:
        """Return the sampling interval if uniform within tol, else None."""
        if self.n_frames < 2:
            return None
        steps = np.diff(self.t)
        dt = float(steps[0])
        if np.max(np.abs(steps - dt)) > tol:
            return None
        return dt

    def frame(self, i: int) -> Frame:
        return Frame(
            t=float(self.t[i]),
            x=float(self.x[i]),
            y=float(self.y[i]),
            v=None if self.v is None else float(self.v[i]),
            heading=None if self.heading is None else float(self.heading[i]),
        )

    def frames(self) -> Iterator[Frame]:
        for i in range(self.n_frames):
            yield self.frame(i)


@dataclass(frozen=True)
class Lane:
    """One lane record of a lane map: centerline plus topology."""

    lane_id: str
    centerline: np.ndarray  # (n >= 2, 2)
    left_neighbor: Optional[str] = None
    right_neighbor: Optional[str] = None
    successors: tuple = ()
    is_interpolated: bool = False
    stop_line: Optional[tuple] = None
    allows_turn: bool = False

    def __post_init__(self):
        cl = np.array(self.centerline, dtype=float)
        if cl.ndim != 2 or cl.shape[1] != 2 or cl.shape[0] < 2:
            raise SchemaError(f"lane {self.lane_id}: centerline needs >= 2 2D points")
        cl.flags.writeable = False
        object.__setattr__(self, "centerline", cl)
        object.__setattr__(self, "successors", tuple(self.successors))
        if self.stop_line is not None:
            sl = tuple(float(c) for c in self.stop_line)
            if len(sl) != 2:
                raise SchemaError(f"lane {self.lane_id}: stop_line must be a 2D point")
            object.__setattr__(self, "stop_line", sl)

    @cached_property
    def _segment_data(self):
        p0 = self.centerline[:-1]
        d = np.diff(self.centerline, axis=0)
        len2 = (d ** 2).sum(axis=1)
        seg_len = np.sqrt(len2)
        s0 = np.concatenate(([0.0], np.cumsum(seg_len)[:-1]))
        return p0, d, np.where(len2 > 0, len2, 1.0), seg_len, s0

    @cached_property
    def arc_length(self) -> float:
        return float(self._segment_data[3].sum())

    def project(self, x: float, y: float) -> tuple:
        """Project a point onto the centerline.

        Returns (distance to the polyline, arc length of the foot point).
        Ties resolve to the earliest segment.
        """
        p0, d, len2, seg_len, s0 = self._segment_data
        q = np.array([x, y]) - p0
        tt = np.clip((q * d).sum(axis=1) / len2, 0.0, 1.0)
        resid = q - tt[:, None] * d
        dist2 = (resid ** 2).sum(axis=1)
        i = int(np.argmin(dist2))
        return math.sqrt(dist2[i]), float(s0[i] + tt[i] * seg_len[i])

    def distance_to(self, x: float, y: float) -> float:
        return self.project(x, y)[0]


@dataclass(frozen=True)
class LaneMap:
    """Set of lanes keyed by lane_id with symmetric neighbor references."""

    lanes: Mapping[str, Lane]

    def __post_init__(self):
        lanes = dict(self.lanes)
        for lid, lane in lanes.items():
            if lid != lane.lane_id:
                raise SchemaError(f"lane key {lid!r} != lane_id {lane.lane_id!r}")
        for lane in lanes.values():
            for attr, back in (("left_neighbor", "right_neighbor"),
                               ("right_neighbor", "left_neighbor")):
                other_id = getattr(lane, attr)
                if other_id is None:
                    continue
                other = lanes.get(other_id)
                if other is None or getattr(other, back) != lane.lane_id:
                    raise SchemaError(
                        f"asymmetric neighbor reference {lane.lane_id} -> {other_id}"
                    )
        object.__setattr__(self, "lanes", lanes)

    def __contains__(self, lane_id: str) -> bool:
        return lane_id in self.lanes

    def __getitem__(self, lane_id: str) -> Lane:
        return self.lanes[lane_id]

    def lane_ids(self) -> list:
        return sorted(self.lanes)

    def nearest_lane(self, x: float, y: float, candidates: Optional[Sequence[str]] = None):
        """Nearest lane among candidates (all lanes when None).

        Returns (lane_id, distance, arc_length) or (None, inf, 0.0) when the
        candidate set is empty. Ties resolve to the lowest lane_id.
        """
        ids = sorted(set(candidates)) if candidates is not None else self.lane_ids()
        best = (None, math.inf, 0.0)
        for lid in ids:
            lane = self.lanes.get(lid)
            if lane is None:
                continue
            dist, s = lane.project(x, y)
            if dist < best[1]:
                best = (lid, dist, s)
        return best


@dataclass(frozen=True)
class TrajectorySet:
    """Trajectories keyed by vehicle_id plus an optional lane map."""

    trajectories: Mapping[str, Trajectory]
    lane_map: Optional[LaneMap] = None
    source_tag: str = ""

    def __post_init__(self):
        trajs = dict(self.trajectories)
        for vid, traj in trajs.items():
            if vid != traj.vehicle_id:
                raise SchemaError(f"key {vid!r} != vehicle_id {traj.vehicle_id!r}")
        object.__setattr__(self, "trajectories", trajs)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __getitem__(self, vehicle_id: str) -> Trajectory:
        return self.trajectories[vehicle_id]

    def vehicle_ids(self) -> list:
        return sorted(self.trajectories)

    def values(self):
        return [self.trajectories[vid] for vid in self.vehicle_ids()]


# ---------------------------------------------------------------------------
# Interchange I/O

_REQUIRED_KEYS = ("vehicle_id", "kind", "t", "x", "y", "length", "width")
_CSV_COLUMNS = ("vehicle_id", "kind", "t", "x", "y", "v", "heading",
                "length", "width", "lane_id")


class _TrajectoryBuilder:
    def __init__(self, vehicle_id, kind, length, width, has_v, has_heading, line):
        self.vehicle_id = vehicle_id
        self.kind = kind
        self.length = length
        self.width = width
        self.has_v = has_v
        self.has_heading = has_heading
        self.t, self.x, self.y, self.v, self.heading, self.lane = [], [], [], [], [], []
        self.first_line = line

    def add(self, row, line):
        if (row["kind"] != self.kind or row["length"] != self.length
                or row["width"] != self.width):
            raise SchemaError(
                f"line {line}: inconsistent metadata for vehicle {self.vehicle_id!r}"
            )
        if (row["v"] is not None) != self.has_v:
            raise SchemaError(
                f"line {line}: v must be present on all rows of a vehicle or none"
            )
        if (row["heading"] is not None) != self.has_heading:
            raise SchemaError(
                f"line {line}: heading must be present on all rows of a vehicle or none"
            )
        if self.t:
            if row["t"] == self.t[-1]:
                raise SchemaError(
                    f"line {line}: duplicate timestamp for vehicle {self.vehicle_id!r}"
                )
            if row["t"] < self.t[-1]:
                raise ParseError(
                    f"t not increasing for vehicle {self.vehicle_id!r}", line
                )
        self.t.append(row["t"])
        self.x.append(row["x"])
        self.y.append(row["y"])
        self.v.append(row["v"])
        self.heading.append(row["heading"])
        self.lane.append(row["lane_id"])

    def build(self) -> Trajectory:
        return Trajectory(
            vehicle_id=self.vehicle_id,
            kind=self.kind,
            length=self.length,
            width=self.width,
            t=self.t,
            x=self.x,
            y=self.y,
            v=self.v if self.has_v else None,
            heading=self.heading if self.has_heading else None,
            lane_tags=tuple(self.lane) if any(l is not None for l in self.lane) else None,
        )


def _parse_row(raw: dict, line: int) -> dict:
    for key in _REQUIRED_KEYS:
        if key not in raw or raw[key] in (None, ""):
            raise ParseError(f"missing required field {key!r}", line)
    out = {}
    out["vehicle_id"] = str(raw["vehicle_id"])
    kind = str(raw["kind"])
    if kind not in VEHICLE_KINDS:
        raise ParseError(f"kind must be one of {VEHICLE_KINDS}, got {kind!r}", line)
    out["kind"] = kind
    for key in ("t", "x", "y", "length", "width"):
        try:
            out[key] = float(raw[key])
        except (TypeError, ValueError):
            raise ParseError(f"field {key!r} is not numeric: {raw[key]!r}", line)
    if out["t"] < 0:
        raise ParseError("t must be non-negative", line)
    if out["length"] <= 0 or out["width"] <= 0:
        raise ParseError("length and width must be positive", line)
    for key in ("v", "heading"):
        val = raw.get(key)
        if val in (None, ""):
            out[key] = None
        else:
            try:
                out[key] = float(val)
            except (TypeError, ValueError):
                raise ParseError(f"field {key!r} is not numeric: {val!r}", line)
    lane = raw.get("lane_id")
    out["lane_id"] = None if lane in (None, "") else str(lane)
    return out


def _iter_jsonl_rows(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                raw = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line_no)
            if not isinstance(raw, dict):
                raise ParseError("row must be a JSON object", line_no)
            yield line_no, raw


def _iter_csv_rows(path: Path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return
        missing = set(_REQUIRED_KEYS) - set(reader.fieldnames)
        if missing:
            raise SchemaError(f"CSV header missing columns: {sorted(missing)}")
        for row in reader:
            yield reader.line_num, row


def load_trajectories(path, format: str = "jsonl") -> TrajectorySet:
    """Load a trajectory interchange file (one row per frame).

    Rows are grouped per vehicle; per-vehicle timestamps must arrive strictly
    increasing. Duplicate (vehicle_id, t) pairs raise SchemaError, decreasing
    timestamps raise ParseError with the offending line number, and an empty
    file raises EmptyInputError.
    """
    path = Path(path)
    if format == "jsonl":
        rows = _iter_jsonl_rows(path)
    elif format == "csv":
        rows = _iter_csv_rows(path)
    else:
        raise ValueError(f"format must be 'jsonl' or 'csv', got {format!r}")
    builders: dict = {}
    for line_no, raw in rows:
        row = _parse_row(raw, line_no)
        vid = row["vehicle_id"]
        builder = builders.get(vid)
        if builder is None:
            builders[vid] = builder = _TrajectoryBuilder(
                vid, row["kind"], row["length"], row["width"],
                row["v"] is not None, row["heading"] is not None, line_no,
            )
        builder.add(row, line_no)
    if not builders:
        raise EmptyInputError(f"no trajectory rows in {path}")
    return TrajectorySet(
        trajectories={vid: b.build() for vid, b in builders.items()},
        source_tag=path.name,
    )


def _trajectory_rows(traj: Trajectory):
    for i in range(traj.n_frames):
        row = {
            "vehicle_id": traj.vehicle_id,
            "kind": traj.kind,
            "t": float(traj.t[i]),
            "x": float(traj.x[i]),
            "y": float(traj.y[i]),
        }
        if traj.v is not None:
            row["v"] = float(traj.v[i])
        if traj.heading is not None:
            row["heading"] = float(traj.heading[i])
        row["length"] = traj.length
        row["width"] = traj.width
        if traj.lane_tags is not None and traj.lane_tags[i] is not None:
            row["lane_id"] = traj.lane_tags[i]
        yield row


def save_trajectories(tset: TrajectorySet, path, format: str = "jsonl") -> None:
    """Write a TrajectorySet in the interchange format, sorted by vehicle_id."""
    path = Path(path)
    if format == "jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for vid in tset.vehicle_ids():
                for row in _trajectory_rows(tset[vid]):
                    fh.write(json.dumps(row) + "\n")
    elif format == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=_CSV_COLUMNS)
            writer.writeheader()
            for vid in tset.vehicle_ids():
                for row in _trajectory_rows(tset[vid]):
                    writer.writerow({k: _csv_cell(row.get(k)) for k in _CSV_COLUMNS})
    else:
        raise ValueError(f"format must be 'jsonl' or 'csv', got {format!r}")


def _csv_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def load_lane_map(path) -> LaneMap:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    lanes = {}
    for rec in doc.get("lanes", []):
        lane = Lane(
            lane_id=str(rec["lane_id"]),
            centerline=rec["centerline"],
            left_neighbor=rec.get("left_neighbor"),
            right_neighbor=rec.get("right_neighbor"),
            successors=tuple(rec.get("successors") or ()),
            is_interpolated=bool(rec.get("is_interpolated", False)),
            stop_line=tuple(rec["stop_line"]) if rec.get("stop_line") else None,
            allows_turn=bool(rec.get("allows_turn", False)),
        )
        lanes[lane.lane_id] = lane
    return LaneMap(lanes=lanes)


def save_lane_map(lane_map: LaneMap, path) -> None:
    doc = {"lanes": []}
    for lid in lane_map.lane_ids():
        lane = lane_map[lid]
        doc["lanes"].append({
            "lane_id": lane.lane_id,
            "centerline": [[float(x), float(y)] for x, y in lane.centerline],
            "left_neighbor": lane.left_neighbor,
            "right_neighbor": lane.right_neighbor,
            "successors": list(lane.successors),
            "is_interpolated": lane.is_interpolated,
            "stop_line": list(lane.stop_line) if lane.stop_line else None,
            "allows_turn": lane.allows_turn,
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Resampling and kinematics

def _interpolate_onto(traj: Trajectory, grid: np.ndarray) -> Trajectory:
    x = np.interp(grid, traj.t, traj.x)
    y = np.interp(grid, traj.t, traj.y)
    v = None if traj.v is None else np.interp(grid, traj.t, traj.v)
    heading = None
    if traj.heading is not None:
        unwrapped = np.unwrap(np.asarray(traj.heading))
        heading = wrap_angles(np.interp(grid, traj.t, unwrapped))
    return replace(traj, t=grid, x=x, y=y, v=v, heading=heading, lane_tags=None)


def resample_uniform(traj: Trajectory, dt: float = DT_DEFAULT) -> Trajectory:
    """Resample onto the uniform grid t0, t0+dt, ... via linear interpolation.

    Never extrapolates beyond the original time span.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if traj.n_frames < 2:
        raise TooShortError(f"vehicle {traj.vehicle_id!r}: need >= 2 frames to resample")
    n = int(math.floor((traj.t[-1] - traj.t[0]) / dt + 1e-9)) + 1
    grid = traj.t[0] + dt * np.arange(n)
    return _interpolate_onto(traj, grid)


def resample_set(tset: TrajectorySet, dt: float = DT_DEFAULT,
                 derive: bool = True) -> TrajectorySet:
    """Resample every trajectory onto the shared grid of integer multiples of dt.

    Aligning phases makes frames of different vehicles directly comparable.
    Trajectories spanning fewer than two grid points are dropped. Kinematics
    are (re)derived unless derive is False.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = {}
    for vid in tset.vehicle_ids():
        traj = tset[vid]
        if traj.n_frames < 2:
            continue
        k0 = int(math.ceil(traj.t[0] / dt - 1e-9))
        k1 = int(math.floor(traj.t[-1] / dt + 1e-9))
        if k1 - k0 < 1:
            continue
        grid = dt * np.arange(k0, k1 + 1)
        resampled = _interpolate_onto(traj, grid)
        out[vid] = derive_kinematics(resampled) if derive else resampled
    return TrajectorySet(trajectories=out, lane_map=tset.lane_map,
                         source_tag=tset.source_tag)


def derive_kinematics(traj: Trajectory) -> Trajectory:
    """Derive speed and heading from positions on a uniform grid.

    Speed is the central difference of arc-length position (one-sided at the
    endpoints). Heading follows the displacement direction and is held from
    the previous frame when the displacement is below 1e-6 m.
    """
    if traj.n_frames < 2:
        raise TooShortError(f"vehicle {traj.vehicle_id!r}: need >= 2 frames")
    dt = traj.uniform_dt()
    if dt is None:
        raise ValueError("derive_kinematics requires a uniform sampling interval")
    x, y = traj.x, traj.y
    seg = np.hypot(np.diff(x), np.diff(y))
    s = np.concatenate(([0.0], np.cumsum(seg)))
    v = np.empty_like(s)
    v[0] = (s[1] - s[0]) / dt
    v[-1] = (s[-1] - s[-2]) / dt
    if s.size > 2:
        v[1:-1] = (s[2:] - s[:-2]) / (2.0 * dt)

    dx = np.empty_like(x)
    dy = np.empty_like(y)
    dx[0], dy[0] = x[1] - x[0], y[1] - y[0]
    dx[-1], dy[-1] = x[-1] - x[-2], y[-1] - y[-2]
    if x.size > 2:
        dx[1:-1] = x[2:] - x[:-2]
        dy[1:-1] = y[2:] - y[:-2]
    norms = np.hypot(dx, dy)
    heading = np.empty_like(x)
    prev = float(traj.heading[0]) if traj.heading is not None else 0.0
    for k in range(x.size):
        if norms[k] >= _MIN_DISPLACEMENT:
            prev = math.atan2(dy[k], dx[k])
        heading[k] = wrap_angle(prev)
    return replace(traj, v=v, heading=heading)
