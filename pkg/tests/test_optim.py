import math

import numpy as np
import pytest

from evograft.nn.config import OptimizerConfig
from evograft.nn.optim import clip_by_global_norm, global_norm, lr_at, sgd_step


def cfg_with(**kw):
    base = dict(learning_rate=0.01, warmup_ratio=0.1, momentum=0.9, nesterov=False,
                total_steps=1000)
    base.update(kw)
    return OptimizerConfig(**base)


class TestSchedule:
    def test_warmup_start_is_zero(self):
        assert lr_at(0, cfg_with()) == 0.0

    def test_warmup_end_hits_peak_exactly(self):
        # ratio 0.1 of 1000 steps -> step 100 is the peak, at the default 0.01.
        assert lr_at(100, cfg_with()) == 0.01

    def test_final_step_is_zero(self):
        assert lr_at(1000, cfg_with()) == pytest.approx(0.0, abs=1e-18)

    def test_shape_nondecreasing_then_nonincreasing(self):
        cfg = cfg_with(total_steps=400, warmup_ratio=0.2)
        values = [lr_at(s, cfg) for s in range(401)]
        w = int(0.2 * 400)
        for a, b in zip(values[:w], values[1:w + 1]):
            assert b >= a
        for a, b in zip(values[w:], values[w + 1:]):
            assert b <= a

    def test_warmup_is_linear(self):
        cfg = cfg_with(total_steps=1000, warmup_ratio=0.1, learning_rate=0.02)
        assert lr_at(50, cfg) == pytest.approx(0.01)
        assert lr_at(25, cfg) == pytest.approx(0.005)

    def test_cosine_midpoint(self):
        cfg = cfg_with(total_steps=1000, warmup_ratio=0.1, learning_rate=0.04)
        # halfway through decay: (100 + 1000) / 2 = 550 -> half the peak
        assert lr_at(550, cfg) == pytest.approx(0.02)


class TestClipping:
    def test_overlong_gradient_rescaled_to_unit_norm(self):
        grads = {"a": np.array([3.0, 0.0], np.float64), "b": np.array([0.0, math.sqrt(7.0)], np.float64)}
        assert global_norm(grads) == pytest.approx(4.0)
        clipped, pre = clip_by_global_norm(grads, 1.0)
        assert pre == pytest.approx(4.0)
        assert global_norm(clipped) == pytest.approx(1.0, abs=1e-6)
        # direction preserved
        np.testing.assert_allclose(clipped["a"], grads["a"] / 4.0)
        np.testing.assert_allclose(clipped["b"], grads["b"] / 4.0)

    def test_short_gradient_untouched(self):
        grads = {"a": np.array([0.3, 0.4], np.float32)}
        clipped, pre = clip_by_global_norm(grads, 1.0)
        assert pre == pytest.approx(0.5)
        np.testing.assert_array_equal(clipped["a"], grads["a"])

    def test_clip_invariant_random_cases(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            grads = {i: rng.normal(0, rng.uniform(0.1, 3), size=5) for i in range(3)}
            clipped, pre = clip_by_global_norm(grads, 1.0)
            assert global_norm(clipped) <= 1.0 + 1e-6
            if pre <= 1.0:
                for k in grads:
                    np.testing.assert_array_equal(clipped[k], grads[k])


class TestSgdStep:
    def test_zero_gradient_leaves_params_and_decays_state(self):
        params = {"w": np.array([1.0, 2.0])}
        grads = {"w": np.zeros(2)}
        sgd = cfg_with(momentum=0.8)
        # fresh state: params must stay exactly put
        p1, v1, ok = sgd_step(params, grads, {"w": np.zeros(2)}, sgd, step=500)
        assert ok
        np.testing.assert_array_equal(p1["w"], params["w"])
        np.testing.assert_array_equal(v1["w"], np.zeros(2))
        # pre-existing state decays by the momentum factor
        v0 = {"w": np.array([1.0, -2.0])}
        _, v2, _ = sgd_step(params, grads, v0, sgd, step=500)
        np.testing.assert_allclose(v2["w"], 0.8 * v0["w"])

    def test_three_step_trajectory_matches_hand_unrolled_recurrence(self):
        # 1-D quadratic f(x) = 0.5 x^2, grad = x, momentum 0.9, constant-lr region.
        cfg = OptimizerConfig(learning_rate=0.1, warmup_ratio=0.5, momentum=0.9,
                              nesterov=False, total_steps=2, clip_norm=1e9)
        x = 2.0
        v = 0.0
        xs = {"x": np.array([x])}
        vs = {"x": np.array([v])}
        for step in range(3):
            g = float(xs["x"][0])
            lr = lr_at(step, cfg)
            # hand recurrence
            v = 0.9 * v + g
            x = x - lr * v
            xs, vs, ok = sgd_step(xs, {"x": np.array([g])}, vs, cfg, step)
            assert ok
            assert abs(xs["x"][0] - x) < 1e-7
            assert abs(vs["x"][0] - v) < 1e-7

    def test_nesterov_update_form(self):
        cfg = cfg_with(nesterov=True, momentum=0.5, warmup_ratio=0.5, total_steps=2,
                       learning_rate=1.0)
        params = {"w": np.array([0.0])}
        v0 = {"w": np.array([2.0])}
        g = {"w": np.array([0.1])}
        lr = lr_at(1, cfg)
        p1, v1, ok = sgd_step(params, g, v0, cfg, step=1)
        v_expect = 0.5 * 2.0 + 0.1
        update_expect = 0.1 + 0.5 * v_expect
        assert v1["w"][0] == pytest.approx(v_expect)
        assert p1["w"][0] == pytest.approx(-lr * update_expect)

    def test_nonfinite_gradient_rejects_step(self):
        params = {"w": np.array([1.0])}
        grads = {"w": np.array([np.nan])}
        p1, v1, ok = sgd_step(params, grads, {"w": np.zeros(1)}, cfg_with(), step=10)
        assert not ok
        np.testing.assert_array_equal(p1["w"], params["w"])

    def test_clipping_happens_before_momentum(self):
        cfg = OptimizerConfig(learning_rate=1.0, warmup_ratio=0.5, momentum=0.0,
                              nesterov=False, total_steps=2, clip_norm=1.0)
        params = {"w": np.array([0.0, 0.0])}
        grads = {"w": np.array([3.0, 4.0])}  # norm 5 -> scaled to 1
        p1, v1, ok = sgd_step(params, grads, {"w": np.zeros(2)}, cfg, step=1)
        np.testing.assert_allclose(v1["w"], [0.6, 0.8])
        np.testing.assert_allclose(p1["w"], [-0.6, -0.8])
