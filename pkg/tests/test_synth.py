"""Scripted scene generation, noise injection, and the smoothing emulator."""

import numpy as np
import pytest

from trajcompare.core import derive_kinematics
from trajcompare.errors import ErrorModel2D
from trajcompare.episodes import CFConfig, StopThresholds, extract_cf_pairs, \
    extract_discharge_headways, extract_stop_segments
from trajcompare.synth import (
    MotionPhase,
    SceneScript,
    SceneScriptError,
    VehicleScript,
    apply_smoother,
    generate_scene,
    load_scene_script,
    save_scene_script,
    scene_script_from_dict,
    scene_script_to_dict,
)

from conftest import platoon_stop_script, queue_script


class TestGenerateScene:
    def test_platoon_truth_yields_one_stop_segment(self, platoon_scene):
        episodes = extract_cf_pairs(platoon_scene.truth, CFConfig())
        segments = extract_stop_segments(episodes, StopThresholds())
        assert len(segments) == 1

    def test_no_noise_no_smoother_identical(self, platoon_scene):
        truth, observed = platoon_scene.truth, platoon_scene.observed
        assert observed is truth

    def test_queue_recovers_programmed_headways(self, queue_scene):
        records = extract_discharge_headways(queue_scene.truth)
        # programmed pass times 1.474, 2.765, 9.025 s (closed form)
        programmed = [2.765 - 1.474, 9.025 - 2.765]
        extracted = [r.headway for r in records]
        assert len(extracted) == 2
        for got, want in zip(extracted, programmed):
            assert got == pytest.approx(want, abs=0.11)

    def test_collision_raises(self):
        script = SceneScript(
            kind="platoon_stop",
            vehicles=(
                VehicleScript("lead", "HV", x0=5.0, v0=0.0),
                VehicleScript("ego", "HV", x0=0.0, v0=8.0),
            ),
            duration_s=5.0,
        )
        with pytest.raises(SceneScriptError):
            generate_scene(script)

    def test_speeds_never_negative(self):
        script = SceneScript(
            kind="platoon_stop",
            vehicles=(VehicleScript("ego", "HV", x0=0.0, v0=3.0,
                                    phases=(MotionPhase(10.0, -2.0),)),),
            duration_s=12.0,
        )
        scene = generate_scene(script)
        assert np.all(scene.truth["ego"].v >= 0.0)
        # stays put after stopping
        assert scene.truth["ego"].x[-1] == pytest.approx(2.25, abs=1e-9)

    def test_noise_injection_statistics(self):
        noise = ErrorModel2D(0.0, 0.0, 0.4, 0.2, 0.0)
        script = SceneScript(
            kind="platoon_stop",
            vehicles=(VehicleScript("ego", "HV", x0=0.0, v0=5.0),),
            duration_s=400.0,
            noise=noise,
            seed=21,
        )
        scene = generate_scene(script)
        resid_x = scene.observed["ego"].x - scene.truth["ego"].x
        resid_y = scene.observed["ego"].y - scene.truth["ego"].y
        assert resid_x.std() == pytest.approx(0.4, rel=0.1)
        assert resid_y.std() == pytest.approx(0.2, rel=0.1)

    def test_seeded_noise_reproducible(self):
        noise = ErrorModel2D(0.0, 0.0, 0.4, 0.2, 0.0)
        script = SceneScript(
            kind="platoon_stop",
            vehicles=(VehicleScript("ego", "HV", x0=0.0, v0=5.0),),
            duration_s=10.0, noise=noise, seed=33,
        )
        a = generate_scene(script).observed["ego"]
        b = generate_scene(script).observed["ego"]
        assert np.array_equal(a.x, b.x)


class TestApplySmoother:
    @staticmethod
    def _traj(x, y=None):
        from trajcompare.core import Trajectory
        n = len(x)
        return Trajectory("s", "HV", 2.0, 1.8, 0.1 * np.arange(n), x,
                          np.zeros(n) if y is None else y)

    def test_constant_position_unchanged(self):
        traj = self._traj(np.full(40, 7.0))
        out = apply_smoother(traj, 11)
        assert np.allclose(out.x, 7.0, atol=1e-12)

    def test_linear_motion_unchanged(self):
        traj = self._traj(3.0 * 0.1 * np.arange(60))
        out = apply_smoother(traj, 9)
        assert np.allclose(out.x, traj.x, atol=1e-9)

    def test_step_deceleration_attenuated(self):
        # brake pulse shorter than the window: peak |a| strictly reduced
        t = 0.1 * np.arange(80)
        v = np.where(t < 3.0, 10.0, np.maximum(10.0 - 3.5 * (t - 3.0), 7.2))
        x = np.concatenate(([0.0], np.cumsum((v[1:] + v[:-1]) / 2 * 0.1)))
        traj = derive_kinematics(self._traj(x))
        smoothed = apply_smoother(traj, 11)
        peak = np.max(-np.diff(traj.v) / 0.1)
        smoothed_peak = np.max(-np.diff(smoothed.v) / 0.1)
        assert smoothed_peak < peak

    def test_even_window_rejected(self):
        traj = self._traj(np.arange(20.0))
        with pytest.raises(ValueError):
            apply_smoother(traj, 10)

    def test_kinematics_rederived(self):
        t = 0.1 * np.arange(50)
        traj = self._traj(0.5 * t ** 2)
        out = apply_smoother(traj, 5)
        assert out.v is not None
        assert out.heading is not None


class TestScriptInterchange:
    def test_round_trip(self, tmp_path):
        script = queue_script(smoother_window=11)
        path = tmp_path / "scene.json"
        save_scene_script(script, path)
        back = load_scene_script(path)
        assert back == script

    def test_noise_round_trip(self):
        script = SceneScript(
            kind="platoon_stop",
            vehicles=(VehicleScript("a", "HV", x0=1.0, v0=2.0),),
            duration_s=5.0,
            noise=ErrorModel2D(0.1, 0.0, 0.4, 0.2, -0.1),
        )
        back = scene_script_from_dict(scene_script_to_dict(script))
        assert back.noise == script.noise
        assert back == script


class TestSmoothingSuppression:
    def test_smoothed_scene_still_extractable(self):
        scene = generate_scene(platoon_stop_script(smoother_window=11))
        episodes = extract_cf_pairs(scene.observed, CFConfig())
        segments = extract_stop_segments(episodes, StopThresholds())
        assert len(segments) == 1

    def test_min_headway_longer_under_smoothing(self):
        truth_scene = generate_scene(queue_script(smoother_window=11))
        truth = extract_discharge_headways(truth_scene.truth)
        smoothed = extract_discharge_headways(truth_scene.observed)
        assert min(r.headway for r in smoothed) > min(r.headway for r in truth)
