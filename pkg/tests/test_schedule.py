import math

import numpy as np
import pytest

from defectsynth.errors import ContractError, ValidationError
from defectsynth.schedule import cfg_combine, ddim_step, make_schedule, q_sample


class TestMakeSchedule:
    def test_alpha_bar_final_value(self):
        # independent oracle: accumulate log(1 - beta) in plain Python
        sched = make_schedule(1000, 1e-4, 0.02, 30)
        log_ab = 0.0
        for i in range(1000):
            beta = 1e-4 + (0.02 - 1e-4) * i / 999
            log_ab += math.log(1.0 - beta)
        oracle = math.exp(log_ab)
        assert abs(sched.alpha_bars[-1] - oracle) / oracle < 1e-10
        assert abs(oracle - 4.0e-5) / 4.0e-5 < 0.10

    def test_full_plan(self):
        sched = make_schedule(64, ddim_count=64)
        assert sched.ddim_plan == tuple(range(64, 0, -1))

    def test_alpha_bar_strictly_decreasing(self):
        sched = make_schedule(500)
        assert np.all(np.diff(sched.alpha_bars[1:]) < 0)
        assert sched.alpha_bars[0] == 1.0

    def test_plan_strictly_decreasing_subsequence(self):
        sched = make_schedule(100, ddim_count=30)
        plan = np.array(sched.ddim_plan)
        assert np.all(np.diff(plan) < 0)
        assert plan.min() >= 1 and plan.max() <= 100

    def test_invalid_ranges(self):
        with pytest.raises(ValidationError):
            make_schedule(100, beta_min=0.02, beta_max=1e-4)
        with pytest.raises(ValidationError):
            make_schedule(10, ddim_count=30)


class TestQSample:
    def test_zero_noise(self):
        sched = make_schedule(100)
        z0 = np.ones((2, 2, 3))
        zt = q_sample(z0, 50, np.zeros_like(z0), sched)
        np.testing.assert_allclose(zt, math.sqrt(sched.alpha_bars[50]) * z0)

    def test_low_t_limit(self):
        sched = make_schedule(1000)
        rng = np.random.default_rng(0)
        z0 = rng.standard_normal((4, 4))
        zt = q_sample(z0, 1, rng.standard_normal((4, 4)), sched)
        assert np.abs(zt - z0).max() < 0.05

    def test_out_of_range_t(self):
        sched = make_schedule(100)
        with pytest.raises(IndexError):
            q_sample(np.zeros((2, 2)), 101, np.zeros((2, 2)), sched)

    def test_monte_carlo_moments(self):
        # 1e4 draws: empirical mean and variance within 3 standard errors
        sched = make_schedule(1000)
        t = 600
        ab = sched.alpha_bars[t]
        rng = np.random.default_rng(7)
        z0 = np.full(10_000, 1.3)
        eps = rng.standard_normal(10_000)
        zt = q_sample(z0, np.full(10_000, t), eps, sched)
        n = len(zt)
        mean_se = math.sqrt((1 - ab) / n)
        assert abs(zt.mean() - math.sqrt(ab) * 1.3) < 3 * mean_se
        var_se = (1 - ab) * math.sqrt(2.0 / (n - 1))
        assert abs(zt.var(ddof=1) - (1 - ab)) < 3 * var_se

    def test_batched_t(self):
        sched = make_schedule(100)
        z0 = np.ones((3, 2, 2))
        eps = np.zeros_like(z0)
        zt = q_sample(z0, np.array([1, 50, 100]), eps, sched)
        for i, t in enumerate([1, 50, 100]):
            np.testing.assert_allclose(zt[i], math.sqrt(sched.alpha_bars[t]))


class TestCfgCombine:
    def test_scale_one(self):
        c = np.array([1.0, 2.0])
        u = np.array([0.3, 0.6])
        np.testing.assert_array_equal(cfg_combine(c, u, 1.0), c)

    def test_equal_predictions_independent_of_scale(self):
        x = np.random.default_rng(0).standard_normal((4, 4))
        for s in (0.0, 1.0, 7.5, 100.0):
            np.testing.assert_array_equal(cfg_combine(x, x, s), x)

    def test_paper_scale_value(self):
        assert cfg_combine(np.array([1.0]), np.array([0.0]), 7.5)[0] == 7.5


class TestDdimStep:
    def test_exact_inversion_single_step(self):
        sched = make_schedule(1000)
        rng = np.random.default_rng(3)
        z0 = rng.standard_normal((8, 8, 4))
        eps = rng.standard_normal(z0.shape)
        for t in (1, 250, 999):
            zt = q_sample(z0, t, eps, sched)
            rec = ddim_step(zt, eps, t, 0, sched)
            np.testing.assert_allclose(rec, z0, rtol=1e-12, atol=1e-12)

    def test_zero_eps_closed_form(self):
        sched = make_schedule(1000)
        rng = np.random.default_rng(4)
        zt = rng.standard_normal((4, 4))
        out = ddim_step(zt, np.zeros_like(zt), 800, 400, sched)
        ratio = math.sqrt(sched.alpha_bars[400] / sched.alpha_bars[800])
        np.testing.assert_allclose(out, ratio * zt, rtol=1e-12)

    def test_out_of_order_step_rejected(self):
        sched = make_schedule(100)
        z = np.zeros((2, 2))
        with pytest.raises(ContractError):
            ddim_step(z, z, 10, 20, sched)
        with pytest.raises(ContractError):
            ddim_step(z, z, 10, 10, sched)

    def test_trajectory_bitwise_reproducible(self):
        sched = make_schedule(200, ddim_count=10)

        def run():
            rng = np.random.default_rng(5)
            z = rng.standard_normal((4, 4))
            for t, tp in sched.ddim_pairs():
                eps_hat = 0.1 * z  # any deterministic function
                z = ddim_step(z, eps_hat, t, tp, sched)
            return z

        assert run().tobytes() == run().tobytes()
