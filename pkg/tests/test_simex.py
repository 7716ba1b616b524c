"""Noise inflation, quadratic extrapolation, and SIMEX-corrected distances."""

import numpy as np
import pytest

from trajcompare.dtw import DTWConfig, normalized_dtw, pooled_weights
from trajcompare.errors import (
    ErrorModel2D,
    SpeedErrorModel,
    derive_error_set,
)
from trajcompare.simex import (
    CF_NOISE_KINDS,
    LC_NOISE_KINDS,
    BootstrapErrorGenerator,
    GaussianErrorGenerator,
    SimexConfig,
    TaggedSeries,
    cf_tagged,
    inflate_noise,
    lc_tagged,
    quad_extrapolate,
    simex_distance,
)

from conftest import braking_cf_series


def field_error_set():
    model = ErrorModel2D(0.276, 0.006, 1.075, 0.530, -0.291, 50)
    speed = SpeedErrorModel(0.0163, 0.0004, 0.0636, 0.0314, -0.183)
    return derive_error_set(model, speed)


class TestInflateNoise:
    def test_lambda_zero_bit_identical(self):
        series = braking_cf_series(8.0, 1.6, 3.0)
        tagged = TaggedSeries(series, CF_NOISE_KINDS, True)
        gen = GaussianErrorGenerator(field_error_set())
        out = inflate_noise(tagged, 0.0, gen, np.random.default_rng(0))
        assert out is tagged.values

    def test_error_free_side_unchanged_for_all_lambda(self):
        series = braking_cf_series(8.0, 1.6, 3.0)
        tagged = TaggedSeries(series, CF_NOISE_KINDS, False)
        gen = GaussianErrorGenerator(field_error_set())
        for lam in (0.0, 1.0, 2.0):
            out = inflate_noise(tagged, lam, gen, np.random.default_rng(0))
            assert out is tagged.values

    def test_negative_lambda_rejected(self):
        tagged = cf_tagged(braking_cf_series(8.0, 1.6, 3.0), True)
        gen = GaussianErrorGenerator(field_error_set())
        with pytest.raises(ValueError):
            inflate_noise(tagged, -0.5, gen, np.random.default_rng(0))

    def test_spacing_channel_variance_scales(self):
        derived = field_error_set()
        gen = GaussianErrorGenerator(derived)
        n = 100_000
        tagged = TaggedSeries(np.zeros((n, 3)), CF_NOISE_KINDS, True)
        out = inflate_noise(tagged, 1.0, gen, np.random.default_rng(99))
        assert out[:, 0].var() == pytest.approx(derived.spacing_var, rel=0.03)
        out2 = inflate_noise(tagged, 2.0, gen, np.random.default_rng(100))
        assert out2[:, 0].var() == pytest.approx(2 * derived.spacing_var, rel=0.03)

    def test_bootstrap_generator_difference_channels(self):
        rng = np.random.default_rng(7)
        samples = rng.normal(0.0, 1.0, size=(200, 2))
        gen = BootstrapErrorGenerator(samples, durations=np.full(200, 10.0))
        draws = gen.draw("spacing", 50_000, np.random.default_rng(1))
        assert abs(draws.mean()) < 0.05
        assert draws.var() == pytest.approx(2 * samples[:, 0].var(), rel=0.1)
        speed_draws = gen.draw("speed", 50_000, np.random.default_rng(2))
        assert speed_draws.var() == pytest.approx(samples[:, 0].var() / 100.0, rel=0.1)

    def test_lc_channel_tagging(self):
        series = np.zeros((10, 6))
        tagged = lc_tagged(series, True)
        assert tagged.noise_kinds == LC_NOISE_KINDS


class TestQuadExtrapolate:
    def test_constant(self):
        assert quad_extrapolate([(0, 5.0), (1, 5.0), (2, 5.0)]).d0 == pytest.approx(5.0)

    def test_linear_trend(self):
        assert quad_extrapolate([(0, 1.0), (1, 2.0), (2, 3.0)]).d0 == pytest.approx(
            0.0, abs=1e-12)

    def test_quadratic_exact(self):
        # T(lambda) = (lambda + 1)^2 vanishes at -1
        assert quad_extrapolate([(0, 1.0), (1, 4.0), (2, 9.0)]).d0 == pytest.approx(
            0.0, abs=1e-12)

    def test_closed_form_on_default_grid(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            t0, t1, t2 = rng.normal(size=3)
            fit = quad_extrapolate([(0, t0), (1, t1), (2, t2)])
            assert abs(fit.d0 - (3 * t0 - 3 * t1 + t2)) < 1e-12

    def test_least_squares_beyond_three_points(self):
        lams = [0.0, 0.5, 1.0, 1.5, 2.0]
        vals = [2.0 + 0.3 * l + 0.1 * l * l for l in lams]
        fit = quad_extrapolate(list(zip(lams, vals)))
        assert fit.d0 == pytest.approx(2.0 - 0.3 + 0.1, abs=1e-9)

    def test_rank_error(self):
        with pytest.raises(ValueError):
            quad_extrapolate([(0, 1.0), (0, 2.0), (1, 3.0)])


class TestSimexDistance:
    def test_error_free_pair_constant(self):
        a = braking_cf_series(8.0, 1.6, 3.0)
        b = braking_cf_series(7.0, 1.4, 2.5)
        cfg = DTWConfig(weights=pooled_weights([a, b]))
        raw = normalized_dtw(a, b, cfg)
        res = simex_distance(cf_tagged(a, False), cf_tagged(b, False), cfg,
                             SimexConfig(b_replicates=5, master_seed=1),
                             GaussianErrorGenerator(field_error_set()))
        assert res.t_lambda == (raw, raw, raw)
        assert res.d0 == pytest.approx(raw, abs=1e-12)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(12)
        a = braking_cf_series(8.0, 1.6, 3.0)
        obs = a + np.column_stack([rng.normal(0, 1.5, a.shape[0]),
                                   rng.normal(0, 0.09, a.shape[0]),
                                   rng.normal(0, 0.06, a.shape[0])])
        b = braking_cf_series(7.0, 1.4, 2.5)
        cfg = DTWConfig(weights=pooled_weights([obs, b]))
        gen = GaussianErrorGenerator(field_error_set())
        sx = SimexConfig(b_replicates=1, master_seed=42)
        r1 = simex_distance(cf_tagged(obs, True), cf_tagged(b, False), cfg, sx, gen,
                            pair_key=(3, 4))
        r2 = simex_distance(cf_tagged(obs, True), cf_tagged(b, False), cfg, sx, gen,
                            pair_key=(3, 4))
        assert r1.d0 == r2.d0
        assert r1.t_lambda == r2.t_lambda

    def test_d0_closed_form_invariant(self):
        rng = np.random.default_rng(13)
        a = braking_cf_series(8.0, 1.6, 3.0)
        obs = a + rng.normal(0, 0.5, a.shape)
        b = braking_cf_series(7.0, 1.4, 2.5)
        cfg = DTWConfig(weights=pooled_weights([obs, b]))
        gen = GaussianErrorGenerator(field_error_set())
        res = simex_distance(cf_tagged(obs, True), cf_tagged(b, False), cfg,
                             SimexConfig(b_replicates=10, master_seed=7), gen)
        t0, t1, t2 = res.t_lambda
        assert res.d0 == pytest.approx(3 * t0 - 3 * t1 + t2, abs=1e-12)
        assert res.d0 == pytest.approx(res.betas[0] - res.betas[1] + res.betas[2],
                                       abs=1e-12)

    def test_bias_grows_with_lambda(self):
        # E[T(lambda)] non-decreasing: checked on replicate means
        rng = np.random.default_rng(14)
        a = braking_cf_series(8.0, 1.0, 3.0)
        obs = a + np.column_stack([rng.normal(0, 1.5, a.shape[0]),
                                   rng.normal(0, 0.09, a.shape[0]),
                                   rng.normal(0, 0.06, a.shape[0])])
        b = braking_cf_series(8.0, 1.0, 3.0, wobble=(0.9, 2.0, 0.3))
        cfg = DTWConfig(weights=pooled_weights([obs, b]))
        gen = GaussianErrorGenerator(field_error_set())
        res = simex_distance(cf_tagged(obs, True), cf_tagged(b, False), cfg,
                             SimexConfig(b_replicates=60, master_seed=3), gen)
        assert res.t_lambda[0] <= res.t_lambda[1] <= res.t_lambda[2]

    def test_monotone_bias_trend_over_replicates(self):
        # E[T(lambda)] is non-decreasing in lambda: one-sided trend over
        # 40 seeded trials at 99% confidence
        derived = field_error_set()
        gen = GaussianErrorGenerator(derived)
        steps_01, steps_12 = [], []
        for trial in range(40):
            r = np.random.default_rng((31, trial))
            a = braking_cf_series(r.uniform(7, 9), r.uniform(0.8, 1.0), 3.0)
            obs = a + np.column_stack([
                r.normal(0, derived.sigma_spacing, a.shape[0]),
                r.normal(0, derived.sigma_rel_speed, a.shape[0]),
                r.normal(0, derived.sigma_speed, a.shape[0]),
            ])
            b = braking_cf_series(r.uniform(7, 9), r.uniform(0.8, 1.0), 3.0,
                                  wobble=(0.9, 2.0, r.uniform(0, 2 * np.pi)))
            cfg = DTWConfig(weights=pooled_weights([obs, b]))
            res = simex_distance(cf_tagged(obs, True), cf_tagged(b, False), cfg,
                                 SimexConfig(b_replicates=20, master_seed=31),
                                 gen, pair_key=(trial, 0))
            steps_01.append(res.t_lambda[1] - res.t_lambda[0])
            steps_12.append(res.t_lambda[2] - res.t_lambda[1])
        for steps in (steps_01, steps_12):
            arr = np.asarray(steps)
            t_stat = arr.mean() / (arr.std(ddof=1) / np.sqrt(arr.size))
            assert t_stat > 2.43  # one-sided t(39) critical value at 99%

    def test_single_case_bias_high_and_d0_close(self):
        derived = field_error_set()
        gen = GaussianErrorGenerator(derived)
        r = np.random.default_rng((411, 3))
        v0, dec, gs = r.uniform(7, 9), r.uniform(0.8, 1.0), r.uniform(2.5, 3.5)
        truth_a = braking_cf_series(v0, dec, gs)
        truth_b = braking_cf_series(v0, dec, gs,
                                    wobble=(r.uniform(0.8, 1.1), r.uniform(1.5, 2.5),
                                            r.uniform(0, 2 * np.pi)))
        obs = truth_a + np.column_stack([
            r.normal(0, derived.sigma_spacing, truth_a.shape[0]),
            r.normal(0, derived.sigma_rel_speed, truth_a.shape[0]),
            r.normal(0, derived.sigma_speed, truth_a.shape[0]),
        ])
        cfg = DTWConfig(weights=pooled_weights([obs, truth_b]))
        truth_star = normalized_dtw(truth_a, truth_b, cfg)
        res = simex_distance(cf_tagged(obs, True), cf_tagged(truth_b, False), cfg,
                             SimexConfig(b_replicates=80, master_seed=411), gen,
                             pair_key=(3, 0))
        assert res.t_lambda[0] > truth_star        # noisy statistic biased high
        assert abs(res.d0 - truth_star) < 0.10 * truth_star

    def test_bootstrap_generator_through_simex(self):
        r = np.random.default_rng(88)
        samples = r.normal(0.0, 1.0, size=(120, 2))
        gen = BootstrapErrorGenerator(samples, durations=np.full(120, 15.0))
        a = braking_cf_series(8.0, 1.0, 3.0)
        obs = a + r.normal(0, 0.3, a.shape)
        b = braking_cf_series(7.5, 0.9, 3.0)
        cfg = DTWConfig(weights=pooled_weights([obs, b]))
        res = simex_distance(cf_tagged(obs, True), cf_tagged(b, False), cfg,
                             SimexConfig(b_replicates=15, master_seed=2), gen)
        assert np.isfinite(res.d0)
        assert res.b_effective == (1, 15, 15)

    def test_inflate_both_mode(self):
        a = braking_cf_series(8.0, 1.6, 3.0)
        b = braking_cf_series(7.0, 1.4, 2.5)
        cfg = DTWConfig(weights=pooled_weights([a, b]))
        gen = GaussianErrorGenerator(field_error_set())
        raw = normalized_dtw(a, b, cfg)
        res = simex_distance(cf_tagged(a, False), cf_tagged(b, False), cfg,
                             SimexConfig(b_replicates=20, master_seed=5,
                                         inflate_both=True), gen)
        # with both sides inflated, higher lambdas move away from the raw value
        assert res.t_lambda[0] == pytest.approx(raw, abs=1e-12)
        assert res.t_lambda[1] != raw

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            SimexConfig(lambda_grid=(1.0, 2.0))
        with pytest.raises(ValueError):
            SimexConfig(b_replicates=0)
        with pytest.raises(ValueError):
            SimexConfig(lambda_grid=(0.0, -1.0, 2.0))
