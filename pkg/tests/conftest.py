"""Shared scripted scenes and series builders used across the test modules."""

import numpy as np
import pytest

from trajcompare.synth import (
    LaneSpec,
    LateralShift,
    MotionPhase,
    SceneScript,
    VehicleScript,
    generate_scene,
)


def platoon_stop_script(smoother_window=None):
    """Follower accelerates 6 to 8 m/s over 2 s, brakes at 1.6 m/s^2 for 5 s,
    and stops 3 m behind a parked leader; 12 s total.

    Programmed events: deceleration onset t = 2.0 s, follower stop t = 7.0 s.
    """
    return SceneScript(
        kind="platoon_stop",
        vehicles=(
            VehicleScript("lead", "HV", x0=37.0, v0=0.0, length=2.0),
            VehicleScript("ego", "AV", x0=0.0, v0=6.0, length=2.0,
                          phases=(MotionPhase(2.0, 1.0), MotionPhase(5.0, -1.6))),
        ),
        duration_s=12.0,
        smoother_window=smoother_window,
    )


def braking_platoon_script(v0, decel, g_stop=3.0, smoother_window=None):
    """Parameterized braking platoon: 1 s gentle accel into a braking run."""
    brake_t = v0 / decel
    accel_dist = (v0 - 1.0) * 1.0 + 0.5
    lead_x = accel_dist + v0 * brake_t / 2.0 + g_stop
    return SceneScript(
        kind="platoon_stop",
        vehicles=(
            VehicleScript("lead", "HV", x0=lead_x, v0=0.0, length=2.0),
            VehicleScript("ego", "AV", x0=0.0, v0=v0 - 1.0, length=2.0,
                          phases=(MotionPhase(1.0, 1.0), MotionPhase(brake_t, -decel))),
        ),
        duration_s=1.0 + brake_t + 4.0,
        smoother_window=smoother_window,
    )


def queue_script(smoother_window=None, first_vehicle_moving=False,
                 turning_third=False):
    """Three-vehicle queue discharging over a stop line at x = 50.

    The first vehicle crosses slowly under hard acceleration (its crossing
    time is sensitive to smoothing); the others cross at cruise speed.
    """
    lanes = [LaneSpec("q", y=0.0, x_start=0.0, x_end=300.0, stop_line_x=50.0)]
    if turning_third:
        lanes = [
            LaneSpec("q", y=0.0, x_start=0.0, x_end=300.0, stop_line_x=50.0,
                     successors=("turn",)),
            LaneSpec("turn", y=4.0, x_start=55.0, x_end=300.0, allows_turn=True),
        ]
    v3_lateral = LateralShift(8.0, 2.5, 4.0) if turning_third else None
    return SceneScript(
        kind="queue_discharge",
        vehicles=(
            VehicleScript("v1", "HV", x0=48.85,
                          v0=1.0 if first_vehicle_moving else 0.0, length=2.0,
                          phases=(MotionPhase(1.2, 0.0), MotionPhase(1.0, 4.0),
                                  MotionPhase(1.5, 2.667))),
            VehicleScript("v2", "HV", x0=40.8, v0=0.0, length=2.0,
                          phases=(MotionPhase(0.5, 0.0), MotionPhase(1.25, 4.0))),
            VehicleScript("v3", "AV", x0=32.0, v0=0.0, length=2.0,
                          phases=(MotionPhase(5.0, 0.0), MotionPhase(1.25, 4.0)),
                          lateral=v3_lateral),
        ),
        duration_s=14.0,
        lanes=tuple(lanes),
        smoother_window=smoother_window,
    )


def lane_change_script(heading_spoiler=False, drop_lag=False):
    """Ego shifts from lane A (y=0) to its left neighbor B (y=3.5) with lead
    and lag traffic in B; crossing of the lane midline at t = 4.5 s."""
    vehicles = [
        VehicleScript("ego", "AV", x0=-30.0, v0=10.0,
                      lateral=LateralShift(3.0, 3.0, 3.5)),
        VehicleScript("lead", "HV", x0=-15.0, y0=3.5, v0=10.0),
    ]
    if heading_spoiler:
        # steadily drifting vehicle: heading stays rotated after the crossing
        vehicles[0] = VehicleScript("ego", "AV", x0=-30.0, v0=6.0,
                                    lateral=LateralShift(2.0, 6.0, 12.0))
        vehicles[1] = VehicleScript("lead", "HV", x0=-18.0, y0=3.5, v0=6.0)
    if not drop_lag:
        lag_v = 6.0 if heading_spoiler else 10.0
        vehicles.append(VehicleScript("lag", "HV", x0=-42.0, y0=3.5, v0=lag_v))
    return SceneScript(
        kind="lane_change",
        vehicles=tuple(vehicles),
        duration_s=12.0,
        lanes=(
            LaneSpec("A", y=0.0, x_start=-60.0, x_end=150.0, left_neighbor="B"),
            LaneSpec("B", y=3.5, x_start=-60.0, x_end=150.0, right_neighbor="A"),
        ),
    )


def oscillating_follow_script(wobble_accel, half_period_s, flip, window,
                              v_lead=8.0, g0=12.0, duration=12.0):
    """Steady following with a mean-zero follower speed oscillation.

    The opening half-length phase centers the speed triangle on the lead
    speed so the gap carries no drift; smoothing attenuates the oscillation.
    """
    sign = 1.0 if flip else -1.0
    phases = [MotionPhase(half_period_s / 2.0, sign * wobble_accel)]
    sign = -sign
    t = half_period_s / 2.0
    while t < duration + half_period_s:
        phases.append(MotionPhase(half_period_s, sign * wobble_accel))
        sign = -sign
        t += half_period_s
    return SceneScript(
        kind="platoon_stop",
        vehicles=(
            VehicleScript("lead", "HV", x0=g0, v0=v_lead, length=2.0),
            VehicleScript("ego", "AV", x0=0.0, v0=v_lead, length=2.0,
                          phases=tuple(phases)),
        ),
        duration_s=duration,
        smoother_window=window,
    )


def braking_cf_series(v0, decel, g_stop, dt=0.1, wobble=None):
    """Analytic (g, dv, vf) series: follower brakes to rest behind a stopped
    leader, optionally with a sinusoidal speed wobble while moving."""
    t_stop = v0 / decel
    n = int(round((t_stop + 1.0) / dt)) + 1
    t = dt * np.arange(n)
    v = np.maximum(v0 - decel * t, 0.0)
    if wobble is not None:
        amp, period, phase = wobble
        v = np.maximum(v + amp * np.sin(2 * np.pi * t / period + phase) * (v > 0), 0.0)
    x = np.concatenate(([0.0], np.cumsum((v[1:] + v[:-1]) / 2.0 * dt)))
    g = (x[-1] + g_stop) - x
    return np.column_stack([g, -v, v])


def combined_scene_script(smoother_window=None):
    """One scene containing a discharge queue, two braking platoons, and a
    lane change with lead/lag context: exercises every pipeline stage."""
    lanes = (
        LaneSpec("q", y=0.0, x_start=0.0, x_end=300.0, stop_line_x=50.0),
        LaneSpec("p1", y=10.0, x_start=-10.0, x_end=300.0),
        LaneSpec("p2", y=14.0, x_start=-10.0, x_end=300.0),
        LaneSpec("a", y=20.0, x_start=-60.0, x_end=160.0, left_neighbor="b"),
        LaneSpec("b", y=23.5, x_start=-60.0, x_end=160.0, right_neighbor="a"),
    )
    vehicles = (
        VehicleScript("q1", "HV", x0=48.85, v0=0.0, length=2.0,
                      phases=(MotionPhase(1.2, 0.0), MotionPhase(1.0, 4.0),
                              MotionPhase(1.5, 2.667))),
        VehicleScript("q2", "HV", x0=40.8, v0=0.0, length=2.0,
                      phases=(MotionPhase(0.5, 0.0), MotionPhase(1.25, 4.0))),
        VehicleScript("q3", "AV", x0=32.0, v0=0.0, length=2.0,
                      phases=(MotionPhase(5.0, 0.0), MotionPhase(1.25, 4.0))),
        VehicleScript("l1", "HV", x0=37.0, y0=10.0, v0=0.0, length=2.0),
        VehicleScript("e1", "AV", x0=0.0, y0=10.0, v0=6.0, length=2.0,
                      phases=(MotionPhase(2.0, 1.0), MotionPhase(5.0, -1.6))),
        VehicleScript("l2", "HV", x0=31.0, y0=14.0, v0=0.0, length=2.0),
        VehicleScript("e2", "AV", x0=0.0, y0=14.0, v0=5.0, length=2.0,
                      phases=(MotionPhase(2.0, 1.0), MotionPhase(5.0, -1.4))),
        VehicleScript("ego", "AV", x0=-30.0, y0=20.0, v0=10.0,
                      lateral=LateralShift(3.0, 3.0, 3.5)),
        VehicleScript("lead", "HV", x0=-15.0, y0=23.5, v0=10.6),
        VehicleScript("lag", "HV", x0=-42.0, y0=23.5, v0=9.4),
    )
    return SceneScript(kind="platoon_stop", vehicles=vehicles, duration_s=14.0,
                       lanes=lanes, smoother_window=smoother_window)


def small_error_model_config():
    """Error-model config block with small sigmas, for pipeline smoke tests."""
    return {"values": {"mu": [0.0, 0.0], "sigma": [0.08, 0.05], "rho": 0.0,
                       "n": 50,
                       "speed": {"mu": [0.0, 0.0], "sigma": [0.01, 0.008],
                                 "rho": 0.0}}}


def write_pipeline_inputs(out_dir):
    """Generate the combined scene and write reference (smoothed) and
    error-bearing (truth) interchange files plus the lane map."""
    from trajcompare.core import save_lane_map, save_trajectories

    truth = generate_scene(combined_scene_script())
    smoothed = generate_scene(combined_scene_script(smoother_window=11))
    ref_path = out_dir / "reference.jsonl"
    err_path = out_dir / "error_bearing.jsonl"
    map_path = out_dir / "map.json"
    save_trajectories(smoothed.observed, ref_path, "jsonl")
    save_trajectories(truth.truth, err_path, "jsonl")
    save_lane_map(truth.truth.lane_map, map_path)
    return ref_path, err_path, map_path


@pytest.fixture
def platoon_scene():
    return generate_scene(platoon_stop_script())


@pytest.fixture
def queue_scene():
    return generate_scene(queue_script())


@pytest.fixture
def lc_scene():
    return generate_scene(lane_change_script())
