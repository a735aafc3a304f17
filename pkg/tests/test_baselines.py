import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from difftraffic.baselines import (ema_kernel, exponential_moving_average, finite_difference_profiles,
                                   linear_interpolate, moving_average, run_baseline)
from difftraffic.idm import InvalidArgument
from difftraffic.trajectory import DenseTrajectory, ObservedTrajectory


def dense(x, dt=0.1):
    x = np.asarray(x, dtype=float)
    return DenseTrajectory(dt, x, np.zeros_like(x), np.zeros_like(x))


class TestFiniteDifferences:
    def test_uniform(self):
        v, a = finite_difference_profiles([0, 1, 2, 3], 1.0)
        assert v.tolist() == [1, 1, 1, 1] and a.tolist() == [0, 0, 0, 0]

    def test_jump(self):
        v, a = finite_difference_profiles([0, 0, 1], 1.0)
        assert v.tolist() == [0, 1, 1] and a.tolist() == [1, 0, 0]

    def test_jitter_amplification(self):
        p = np.tile([0.0, 0.05], 20)
        _, a = finite_difference_profiles(p, 0.1)
        # the last two samples come from the repeated-end rule
        np.testing.assert_allclose(np.abs(a[:-2]), 10.0, rtol=1e-12)

    def test_too_short(self):
        with pytest.raises(InvalidArgument):
            finite_difference_profiles([0.0, 1.0], 0.1)


class TestLinear:
    def test_midpoint(self):
        d = linear_interpolate(ObservedTrajectory("a", [0.0, 1.0], [0.0, 10.0]), 0.5)
        assert d.positions.tolist() == [0.0, 5.0, 10.0]

    def test_identity_at_observation_spacing(self):
        t = np.arange(0.0, 5.01, 1.0)
        p = np.array([0.0, 3.0, 7.5, 8.0, 12.0, 20.0])
        d = linear_interpolate(ObservedTrajectory("a", t, p), 1.0)
        np.testing.assert_array_equal(d.positions, p)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-50, 50), min_size=3, max_size=12), st.sampled_from([0.1, 0.25, 0.5]))
    def test_knot_exact(self, values, dt):
        # observations on a grid that the dense grid contains
        t = np.arange(len(values)) * 1.0
        d = linear_interpolate(ObservedTrajectory("a", t, values), dt)
        k = np.round(t / dt).astype(int)
        np.testing.assert_allclose(d.positions[k], np.asarray(values) - values[0], rtol=0, atol=1e-12)

    def test_affine_exact(self):
        t = np.array([0.0, 0.7, 2.0, 3.3])
        d = linear_interpolate(ObservedTrajectory("a", t, 4.0 * t), 0.1)
        np.testing.assert_allclose(d.positions, 4.0 * d.times, atol=1e-12)


class TestMovingAverage:
    def test_constant(self):
        np.testing.assert_allclose(moving_average(dense(np.full(30, 7.5))).positions, 7.5, rtol=1e-15)

    def test_ramp_interior(self):
        x = 3.0 * np.arange(40) - 2.0
        out = moving_average(dense(x)).positions
        np.testing.assert_allclose(out[4:-4], x[4:-4], rtol=1e-13)

    def test_spike(self):
        x = np.zeros(21)
        x[10] = 9.0
        assert moving_average(dense(x), 9).positions[10] == pytest.approx(1.0, rel=1e-15)

    def test_even_window(self):
        with pytest.raises(InvalidArgument):
            moving_average(dense(np.zeros(10)), 4)

    @settings(max_examples=50)
    @given(st.floats(-1e3, 1e3), st.floats(-10, 10), st.integers(12, 80))
    def test_ramp_property(self, c, slope, n):
        x = c + slope * np.arange(n)
        out = moving_average(dense(x)).positions
        np.testing.assert_allclose(out[4:-4], x[4:-4], rtol=1e-9, atol=1e-9)

    @settings(max_examples=50)
    @given(st.floats(-1e4, 1e4), st.integers(3, 60), st.sampled_from([1, 3, 9, 15]))
    def test_constant_property(self, c, n, window):
        np.testing.assert_allclose(moving_average(dense(np.full(n, c)), window).positions, c,
                                   rtol=1e-12, atol=1e-12)


class TestEma:
    def test_constant(self):
        np.testing.assert_allclose(exponential_moving_average(dense(np.full(50, -3.0))).positions, -3.0,
                                   rtol=1e-14)

    def test_kernel_normalizes(self):
        w = ema_kernel(5)
        assert w.shape == (41,)
        assert (w / w.sum()).sum() == pytest.approx(1.0, abs=1e-15)

    def test_impulse_symmetric(self):
        x = np.zeros(101)
        x[50] = 1.0
        out = exponential_moving_average(dense(x)).positions
        np.testing.assert_allclose(out[50:71], out[50:29:-1], rtol=1e-14)
        assert out.argmax() == 50

    def test_short_signal(self):
        out = exponential_moving_average(dense([1.0, 2.0, 3.0])).positions
        assert out.shape == (3,) and out[1] == pytest.approx(2.0)

    def test_shift_equivariant_interior(self):
        x = np.random.default_rng(0).normal(size=200)
        a = exponential_moving_average(dense(x)).positions
        b = exponential_moving_average(dense(np.roll(x, 7))).positions
        np.testing.assert_allclose(b[60:140], a[53:133], rtol=1e-12)

    @settings(max_examples=50)
    @given(st.floats(-1e4, 1e4), st.integers(3, 80), st.floats(0.5, 10))
    def test_constant_property(self, c, n, width):
        np.testing.assert_allclose(exponential_moving_average(dense(np.full(n, c)), width).positions, c,
                                   rtol=1e-12, atol=1e-11)

    def test_bad_width(self):
        with pytest.raises(InvalidArgument):
            exponential_moving_average(dense(np.zeros(5)), 0)


def test_run_baseline_unknown():
    with pytest.raises(InvalidArgument):
        run_baseline(ObservedTrajectory("a", [0, 1, 2], [0, 1, 2]), "spline", 0.1)
