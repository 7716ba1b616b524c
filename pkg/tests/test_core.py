"""Data model, interchange I/O, resampling, and kinematic derivation."""

import json
import math

import numpy as np
import pytest

from trajcompare.core import (
    EmptyInputError,
    Lane,
    LaneMap,
    ParseError,
    SchemaError,
    TooShortError,
    Trajectory,
    TrajectorySet,
    derive_kinematics,
    load_lane_map,
    load_trajectories,
    resample_set,
    resample_uniform,
    save_lane_map,
    save_trajectories,
    wrap_angle,
)


def _row(vid, t, x, y=0.0, kind="HV", **extra):
    row = {"vehicle_id": vid, "kind": kind, "t": t, "x": x, "y": y,
           "length": 4.5, "width": 1.8}
    row.update(extra)
    return row


def _write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _uniform_traj(n=20, dt=0.1, speed=10.0):
    t = dt * np.arange(n)
    return Trajectory("u", "HV", 4.5, 1.8, t, speed * t, np.zeros(n))


class TestTrajectoryInvariants:
    def test_rejects_empty_frames(self):
        with pytest.raises(SchemaError):
            Trajectory("a", "HV", 4.5, 1.8, [], [], [])

    def test_rejects_nonpositive_dimensions(self):
        with pytest.raises(SchemaError):
            Trajectory("a", "HV", 0.0, 1.8, [0.0], [0.0], [0.0])

    def test_rejects_non_increasing_t(self):
        with pytest.raises(SchemaError):
            Trajectory("a", "HV", 4.5, 1.8, [0.0, 0.0], [0.0, 1.0], [0.0, 0.0])

    def test_heading_wrapped_into_half_open_interval(self):
        traj = Trajectory("a", "HV", 4.5, 1.8, [0.0, 0.1], [0.0, 1.0], [0.0, 0.0],
                          heading=[3 * math.pi, -math.pi])
        assert traj.heading[0] == pytest.approx(math.pi)
        assert traj.heading[1] == pytest.approx(math.pi)

    def test_arrays_are_immutable(self):
        traj = _uniform_traj()
        with pytest.raises(ValueError):
            traj.x[0] = 99.0


class TestLoad:
    def test_groups_two_vehicles(self, tmp_path):
        rows = [_row("v1", i * 0.1, float(i)) for i in range(3)]
        rows += [_row("v2", i * 0.1, float(i)) for i in range(3)]
        path = tmp_path / "two.jsonl"
        _write_jsonl(path, rows)
        tset = load_trajectories(path, "jsonl")
        assert len(tset) == 2
        assert tset["v1"].n_frames == 3
        assert tset["v2"].n_frames == 3

    def test_decreasing_t_is_parse_error(self, tmp_path):
        rows = [_row("v1", 0.2, 0.0), _row("v1", 0.1, 1.0)]
        path = tmp_path / "bad.jsonl"
        _write_jsonl(path, rows)
        with pytest.raises(ParseError) as exc:
            load_trajectories(path, "jsonl")
        assert exc.value.line == 2

    def test_duplicate_timestamp_is_schema_error(self, tmp_path):
        rows = [_row("v1", 0.1, 0.0), _row("v1", 0.1, 1.0)]
        path = tmp_path / "dup.jsonl"
        _write_jsonl(path, rows)
        with pytest.raises(SchemaError):
            load_trajectories(path, "jsonl")

    def test_empty_file_raises(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(EmptyInputError):
            load_trajectories(path, "jsonl")

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"vehicle_id": "v1"}\n')
        with pytest.raises(ParseError) as exc:
            load_trajectories(path, "jsonl")
        assert exc.value.line == 1

    def test_ten_hz_file_spanning_20s_has_200_frames(self, tmp_path):
        rows = [_row("v1", round(i * 0.1, 1), float(i)) for i in range(200)]
        path = tmp_path / "tenhz.jsonl"
        _write_jsonl(path, rows)
        tset = load_trajectories(path, "jsonl")
        assert tset["v1"].n_frames == 200
        assert tset["v1"].duration == pytest.approx(19.9)

    def test_csv_missing_required_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("vehicle_id,kind,t,x,y,length\nv1,HV,0.0,0.0,0.0,4.5\n")
        with pytest.raises(SchemaError):
            load_trajectories(path, "csv")

    def test_unknown_format_rejected(self, tmp_path):
        path = tmp_path / "a.jsonl"
        path.write_text("")
        with pytest.raises(ValueError):
            load_trajectories(path, "parquet")

    def test_mixed_optional_column_presence_rejected(self, tmp_path):
        rows = [_row("v1", 0.0, 0.0, v=1.0), _row("v1", 0.1, 0.1)]
        path = tmp_path / "mixed.jsonl"
        _write_jsonl(path, rows)
        with pytest.raises(SchemaError):
            load_trajectories(path, "jsonl")

    def test_csv_round_trip(self, tmp_path):
        rows = [_row("v1", i * 0.1, float(i), v=1.0, heading=0.1, lane_id="L1")
                for i in range(4)]
        src = tmp_path / "a.jsonl"
        _write_jsonl(src, rows)
        tset = load_trajectories(src, "jsonl")
        csv_path = tmp_path / "a.csv"
        save_trajectories(tset, csv_path, "csv")
        back = load_trajectories(csv_path, "csv")
        traj, orig = back["v1"], tset["v1"]
        assert np.array_equal(traj.t, orig.t)
        assert np.array_equal(traj.x, orig.x)
        assert np.array_equal(traj.v, orig.v)
        assert traj.lane_tags == orig.lane_tags

    def test_jsonl_round_trip_preserves_content(self, tmp_path):
        rows = [_row("v2", i * 0.1, float(i), y=0.5 * i) for i in range(5)]
        rows += [_row("v1", i * 0.1, 2.0 * i, kind="AV", v=2.0) for i in range(5)]
        src = tmp_path / "mix.jsonl"
        _write_jsonl(src, rows)
        tset = load_trajectories(src, "jsonl")
        out = tmp_path / "out.jsonl"
        save_trajectories(tset, out, "jsonl")
        again = load_trajectories(out, "jsonl")
        for vid in tset.vehicle_ids():
            a, b = tset[vid], again[vid]
            assert np.array_equal(a.t, b.t)
            assert np.array_equal(a.x, b.x)
            assert np.array_equal(a.y, b.y)
            assert a.kind == b.kind and a.length == b.length


class TestResample:
    def test_two_frames_to_eleven(self):
        traj = Trajectory("a", "HV", 4.5, 1.8, [0.0, 1.0], [0.0, 1.0], [0.0, 0.0])
        out = resample_uniform(traj, 0.1)
        assert out.n_frames == 11
        assert np.allclose(out.x, np.arange(11) * 0.1, atol=1e-12)

    def test_constant_speed_interpolation_exact(self):
        t = np.arange(0, 90) / 30.0  # 30 fps source
        traj = Trajectory("a", "HV", 4.5, 1.8, t, 10.0 * t, np.zeros(t.size))
        out = resample_uniform(traj, 0.1)
        expected = 10.0 * (out.t - out.t[0]) + traj.x[0]
        assert np.allclose(out.x, expected, atol=1e-9)

    def test_piecewise_linear_matches_segment_formula(self):
        rng = np.random.default_rng(7)
        t = np.sort(rng.uniform(0.0, 5.0, 40))
        t[0], t[-1] = 0.0, 5.0
        x = rng.normal(size=40).cumsum()
        traj = Trajectory("a", "HV", 4.5, 1.8, t, x, np.zeros(40))
        out = resample_uniform(traj, 0.1)

        def segment_interp(tq):
            j = np.searchsorted(t, tq, side="right") - 1
            j = min(max(j, 0), t.size - 2)
            w = (tq - t[j]) / (t[j + 1] - t[j])
            return (1 - w) * x[j] + w * x[j + 1]

        oracle = np.array([segment_interp(tq) for tq in out.t])
        assert np.max(np.abs(out.x - oracle)) < 1e-12

    def test_idempotent_on_uniform_grid(self):
        traj = derive_kinematics(_uniform_traj())
        once = resample_uniform(traj, 0.1)
        twice = resample_uniform(once, 0.1)
        assert np.array_equal(once.t, twice.t)
        assert np.array_equal(once.x, twice.x)
        assert np.array_equal(once.y, twice.y)

    def test_single_frame_raises(self):
        traj = Trajectory("a", "HV", 4.5, 1.8, [0.0], [0.0], [0.0])
        with pytest.raises(TooShortError):
            resample_uniform(traj, 0.1)

    def test_no_extrapolation(self):
        traj = Trajectory("a", "HV", 4.5, 1.8, [0.0, 0.55], [0.0, 1.0], [0.0, 0.0])
        out = resample_uniform(traj, 0.1)
        assert out.t[-1] <= 0.55 + 1e-12

    def test_resample_set_aligns_phases(self):
        a = Trajectory("a", "HV", 4.5, 1.8, [0.03, 1.03], [0.0, 1.0], [0.0, 0.0])
        b = Trajectory("b", "HV", 4.5, 1.8, [0.27, 1.27], [0.0, 1.0], [0.0, 0.0])
        tset = resample_set(TrajectorySet({"a": a, "b": b}), 0.1)
        k_a = tset["a"].t / 0.1
        k_b = tset["b"].t / 0.1
        assert np.allclose(k_a, np.round(k_a), atol=1e-9)
        assert np.allclose(k_b, np.round(k_b), atol=1e-9)


class TestDeriveKinematics:
    def test_linear_motion_speed(self):
        t = 0.1 * np.arange(30)
        traj = Trajectory("a", "HV", 4.5, 1.8, t, 5.0 * t, np.zeros(30))
        out = derive_kinematics(traj)
        assert np.allclose(out.v, 5.0, atol=1e-9)

    def test_stationary_vehicle(self):
        t = 0.1 * np.arange(30)
        traj = Trajectory("a", "HV", 4.5, 1.8, t, np.full(30, 2.0), np.ones(30),
                          heading=np.full(30, 0.5))
        out = derive_kinematics(traj)
        assert np.all(out.v == 0.0)
        assert np.all(out.heading == out.heading[0])

    def test_quadratic_position_central_difference_exact(self):
        t = 0.1 * np.arange(51)
        traj = Trajectory("a", "HV", 4.5, 1.8, t, t ** 2, np.zeros(51))
        out = derive_kinematics(traj)
        assert np.max(np.abs(out.v[1:-1] - 2.0 * t[1:-1])) < 1e-10

    def test_speed_nonnegative_and_heading_finite_random(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            n = int(rng.integers(2, 40))
            t = 0.1 * np.arange(n)
            traj = Trajectory("a", "HV", 4.5, 1.8, t,
                              rng.normal(size=n).cumsum(),
                              rng.normal(size=n).cumsum())
            out = derive_kinematics(traj)
            assert np.all(out.v >= 0.0)
            assert np.all(np.isfinite(out.heading))
            assert np.all(out.heading > -math.pi - 1e-12)
            assert np.all(out.heading <= math.pi + 1e-12)

    def test_too_short_raises(self):
        traj = Trajectory("a", "HV", 4.5, 1.8, [0.0], [0.0], [0.0])
        with pytest.raises(TooShortError):
            derive_kinematics(traj)


class TestLaneMap:
    def test_neighbor_symmetry_enforced(self):
        a = Lane("A", [[0, 0], [10, 0]], right_neighbor="B")
        b = Lane("B", [[0, -3], [10, -3]])  # missing back-reference
        with pytest.raises(SchemaError):
            LaneMap({"A": a, "B": b})

    def test_projection_arc_length(self):
        lane = Lane("A", [[0, 0], [10, 0], [10, 10]])
        dist, s = lane.project(10.0, 4.0)
        assert dist == pytest.approx(0.0)
        assert s == pytest.approx(14.0)
        dist, s = lane.project(5.0, 2.0)
        assert dist == pytest.approx(2.0)
        assert s == pytest.approx(5.0)

    def test_lane_map_round_trip(self, tmp_path):
        lane_map = LaneMap({
            "A": Lane("A", [[0, 0], [50, 0]], right_neighbor="B",
                      successors=("C",), stop_line=(40.0, 0.0)),
            "B": Lane("B", [[0, -3.5], [50, -3.5]], left_neighbor="A",
                      allows_turn=True),
            "C": Lane("C", [[50, 0], [80, 0]], is_interpolated=True),
        })
        path = tmp_path / "map.json"
        save_lane_map(lane_map, path)
        back = load_lane_map(path)
        assert back.lane_ids() == ["A", "B", "C"]
        assert back["A"].stop_line == (40.0, 0.0)
        assert back["A"].successors == ("C",)
        assert back["B"].allows_turn
        assert back["C"].is_interpolated


def test_wrap_angle_range():
    for theta in (-7.0, -math.pi, 0.0, math.pi, 9.0, 100.0):
        w = wrap_angle(theta)
        assert -math.pi < w <= math.pi
        assert math.cos(w) == pytest.approx(math.cos(theta), abs=1e-12)
        assert math.sin(w) == pytest.approx(math.sin(theta), abs=1e-12)
