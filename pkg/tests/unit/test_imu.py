"""
Unit tests for IMU simulation, strapdown integration and window proxies.
"""

import math

import numpy as np
import pytest

from data import SyntheticSceneConfig, sample_trajectory
from errors import InvalidArgumentError
from geometry import Pose, Quaternion, relative_pose, rotation_angle
from imu import (
    GRAVITY,
    BiasRandomWalk,
    ImuNoiseParams,
    ImuSample,
    ImuState,
    ImuWindow,
    Trajectory,
    integrate_step,
    integrate_window,
    simulate_measurements,
    start_states_from_poses,
    window_proxies,
)

RESTING_ACCEL = np.array([0.0, 0.0, 9.81])


def _resting_stream(duration, rate=100.0):
    n = int(round(duration * rate)) + 1
    return [ImuSample(k / rate, RESTING_ACCEL, np.zeros(3)) for k in range(n)]


def _stationary_trajectory(n=50, dt=0.01):
    ts = np.arange(n) * dt
    return Trajectory(ts, np.zeros((n, 3)), [Quaternion.identity()] * n)


class TestImuTypes:
    """Test IMU value type validation functionality."""

    @pytest.mark.unit
    def test_sample_rejects_non_finite(self):
        """Test that NaN readings raise InvalidArgumentError."""
        with pytest.raises(InvalidArgumentError):
            ImuSample(0.0, [np.nan, 0.0, 0.0], [0.0, 0.0, 0.0])

    @pytest.mark.unit
    def test_noise_rejects_negative_std(self):
        """Test that negative noise levels are rejected."""
        with pytest.raises(InvalidArgumentError):
            ImuNoiseParams(accel_noise_std=-0.1)

    @pytest.mark.unit
    def test_noise_gravity_range(self):
        """Test the gravity magnitude check and its overrides."""
        with pytest.raises(InvalidArgumentError):
            ImuNoiseParams(gravity=[0.0, 0.0, -5.0])
        assert ImuNoiseParams(gravity=[0.0, 0.0, -5.0], allow_any_gravity=True).gravity[2] == -5.0
        assert np.array_equal(ImuNoiseParams(gravity=[0.0, 0.0, 0.0]).gravity, np.zeros(3))

    @pytest.mark.unit
    def test_noise_dict_round_trip(self):
        """Test ImuNoiseParams serialization."""
        params = ImuNoiseParams(accel_bias=[0.1, 0.0, 0.0], gyro_noise_std=0.01, rng_seed=9)
        again = ImuNoiseParams.from_dict(params.to_dict())
        assert again.to_dict() == params.to_dict()

    @pytest.mark.unit
    def test_noise_unknown_key(self):
        """Test that unknown keys are reported."""
        with pytest.raises(InvalidArgumentError):
            ImuNoiseParams.from_dict({"accel_bais": [0, 0, 0]})

    @pytest.mark.unit
    def test_state_pose(self):
        """Test that an ImuState exposes its pose."""
        state = ImuState(position=[1.0, 2.0, 3.0])
        assert state.pose.is_close(Pose(Quaternion.identity(), [1.0, 2.0, 3.0]))


class TestIntegrateStep:
    """Test single-step strapdown integration functionality."""

    @pytest.mark.unit
    def test_stationary_stays_put(self):
        """Test that a resting IMU does not drift over 1000 steps."""
        state = ImuState()
        sample = ImuSample(0.0, RESTING_ACCEL, np.zeros(3))
        for _ in range(1000):
            state = integrate_step(state, sample, 1e-3)
        assert np.linalg.norm(state.position) < 1e-9
        assert np.linalg.norm(state.velocity) < 1e-9

    @pytest.mark.unit
    def test_constant_rate_half_turn(self):
        """Test that (0, 0, pi) rad/s for one second gives a half turn about z."""
        state = ImuState()
        sample = ImuSample(0.0, RESTING_ACCEL, [0.0, 0.0, math.pi])
        for _ in range(1000):
            state = integrate_step(state, sample, 1e-3)
        assert rotation_angle(state.pose.R.T @ np.diag([-1.0, -1.0, 1.0])) < 1e-6
        assert abs(np.linalg.norm(state.orientation.as_array()) - 1.0) < 1e-9

    @pytest.mark.unit
    def test_constant_acceleration(self):
        """Test that one m/s^2 along x for two seconds covers two meters."""
        state = ImuState()
        sample = ImuSample(0.0, RESTING_ACCEL + np.array([1.0, 0.0, 0.0]), np.zeros(3))
        for _ in range(2000):
            state = integrate_step(state, sample, 1e-3)
        assert np.allclose(state.position, [2.0, 0.0, 0.0], atol=1e-3)
        assert np.allclose(state.velocity, [2.0, 0.0, 0.0], atol=1e-6)

    @pytest.mark.unit
    def test_biases_are_subtracted(self):
        """Test that state biases cancel matching measurement offsets."""
        bias = np.array([0.2, -0.1, 0.05])
        state = ImuState(accel_bias=bias, gyro_bias=[0.01, 0.0, 0.0])
        sample = ImuSample(0.0, RESTING_ACCEL + bias, [0.01, 0.0, 0.0])
        for _ in range(100):
            state = integrate_step(state, sample, 1e-2)
        assert np.linalg.norm(state.position) < 1e-9
        assert state.orientation.angle_to(Quaternion.identity()) < 1e-12

    @pytest.mark.unit
    def test_rejects_non_positive_dt(self):
        """Test that dt <= 0 raises InvalidArgumentError."""
        sample = ImuSample(0.0, RESTING_ACCEL, np.zeros(3))
        with pytest.raises(InvalidArgumentError):
            integrate_step(ImuState(), sample, 0.0)

    @pytest.mark.unit
    def test_bias_walk_moves_biases(self):
        """Test that simulation mode propagates a seeded bias random walk."""
        sample = ImuSample(0.0, RESTING_ACCEL, np.zeros(3))
        walk = BiasRandomWalk(np.random.default_rng(0), accel_std=0.1, gyro_std=0.01)
        state = integrate_step(ImuState(), sample, 0.01, bias_walk=walk)
        assert np.linalg.norm(state.accel_bias) > 0.0
        assert np.linalg.norm(state.gyro_bias) > 0.0


class TestIntegrateWindow:
    """Test window integration functionality."""

    @pytest.mark.unit
    def test_zero_motion(self):
        """Test that a resting window gives identity poses."""
        window = ImuWindow(_resting_stream(0.4), ImuState(), [0.0, 0.1, 0.2, 0.3, 0.4])
        poses = integrate_window(window)
        assert len(poses) == 5
        for pose in poses:
            assert pose.is_close(Pose.identity(), tol=1e-9)

    @pytest.mark.unit
    def test_accelerometer_bias_drift(self):
        """Test that an uncorrected 0.05 m/s^2 bias drifts about 0.025 m in one second."""
        samples = [ImuSample(s.timestamp, s.accel + np.array([0.05, 0.0, 0.0]), s.gyro) for s in _resting_stream(1.0)]
        poses = integrate_window(ImuWindow(samples, ImuState(), [0.0, 0.5, 1.0]))
        drift = poses[-1].translation[0]
        assert drift == pytest.approx(0.025, rel=0.1)

    @pytest.mark.unit
    def test_circle_endpoint(self):
        """Test a noise-free circular window against the analytic trajectory."""
        cfg = SyntheticSceneConfig(frame_count=5, imu_rate=100.0)
        dense = sample_trajectory(cfg, np.arange(41) / 100.0)
        samples = simulate_measurements(dense, ImuNoiseParams())
        frames = [0.0, 0.1, 0.2, 0.3, 0.4]
        poses = integrate_window(ImuWindow(samples, dense.state(0), frames))
        truth = relative_pose(dense.pose(0), dense.pose(40))
        assert np.linalg.norm(poses[-1].translation - truth.translation) < 0.01

    @pytest.mark.unit
    def test_empty_window(self):
        """Test that a window without samples is invalid."""
        with pytest.raises(InvalidArgumentError):
            integrate_window(ImuWindow([], ImuState(), [0.0, 0.1]))

    @pytest.mark.unit
    def test_unsorted_frames(self):
        """Test that non-increasing frame timestamps are invalid."""
        with pytest.raises(InvalidArgumentError):
            integrate_window(ImuWindow(_resting_stream(0.2), ImuState(), [0.0, 0.2, 0.1]))


class TestSimulateMeasurements:
    """Test IMU measurement synthesis functionality."""

    @pytest.mark.unit
    def test_resting_specific_force(self):
        """Test that a stationary IMU reads +9.81 on z and zero rate."""
        samples = simulate_measurements(_stationary_trajectory(), ImuNoiseParams())
        for s in samples:
            assert np.allclose(s.accel, RESTING_ACCEL, atol=1e-12)
            assert np.allclose(s.gyro, 0.0, atol=1e-12)

    @pytest.mark.unit
    def test_bias_is_added(self):
        """Test that constant biases appear in every sample."""
        params = ImuNoiseParams(accel_bias=[0.1, 0.0, 0.0], gyro_bias=[0.0, 0.02, 0.0])
        samples = simulate_measurements(_stationary_trajectory(), params)
        assert np.allclose(samples[7].accel, RESTING_ACCEL + [0.1, 0.0, 0.0])
        assert np.allclose(samples[7].gyro, [0.0, 0.02, 0.0])

    @pytest.mark.unit
    def test_seeded_noise_is_deterministic(self):
        """Test that the same seed gives bit-identical samples."""
        params = ImuNoiseParams(accel_noise_std=0.1, gyro_noise_std=0.01, rng_seed=42)
        a = simulate_measurements(_stationary_trajectory(), params)
        b = simulate_measurements(_stationary_trajectory(), params)
        assert all(np.array_equal(x.accel, y.accel) and np.array_equal(x.gyro, y.gyro) for x, y in zip(a, b))
        c = simulate_measurements(_stationary_trajectory(), ImuNoiseParams(accel_noise_std=0.1, rng_seed=43))
        assert not np.array_equal(a[0].accel, c[0].accel)

    @pytest.mark.unit
    def test_too_few_samples(self):
        """Test that fewer than three trajectory samples are rejected."""
        with pytest.raises(InvalidArgumentError):
            simulate_measurements(_stationary_trajectory(n=2), ImuNoiseParams())

    @pytest.mark.unit
    def test_non_uniform_sampling(self):
        """Test that irregular timestamps are rejected."""
        traj = Trajectory(np.array([0.0, 0.1, 0.3]), np.zeros((3, 3)), [Quaternion.identity()] * 3)
        with pytest.raises(InvalidArgumentError):
            simulate_measurements(traj, ImuNoiseParams())

    @pytest.mark.unit
    def test_finite_difference_fallback(self):
        """Test that constant velocity without analytic derivatives reads as rest plus zero rate."""
        n = 30
        ts = np.arange(n) * 0.01
        positions = np.stack([0.5 * ts, np.zeros(n), np.zeros(n)], axis=1)
        samples = simulate_measurements(Trajectory(ts, positions, [Quaternion.identity()] * n), ImuNoiseParams())
        assert np.allclose(samples[10].accel, RESTING_ACCEL, atol=1e-9)
        assert np.allclose(samples[10].gyro, 0.0, atol=1e-12)

    @pytest.mark.unit
    def test_figure_eight_round_trip(self):
        """Test simulate then integrate on a figure-eight reproduces relative poses per one-second window."""
        cfg = SyntheticSceneConfig(trajectory="figure-eight", frame_count=41, frame_rate=10.0, imu_rate=200.0)
        dense = sample_trajectory(cfg, np.arange(801) / 200.0)
        samples = simulate_measurements(dense, ImuNoiseParams())
        frame_times = np.arange(41) / 10.0
        frames = sample_trajectory(cfg, frame_times)
        starts = [frames.state(i) for i in range(0, 41, 10)]
        windows = window_proxies(samples, frame_times, 10, starts)
        assert len(windows) == 4
        for k, proxies in windows:
            for i, proxy in enumerate(proxies):
                truth = relative_pose(frames.pose(10 * k + i), frames.pose(10 * k + i + 1))
                assert np.linalg.norm(proxy.translation - truth.translation) < 1e-3
                assert rotation_angle(proxy.R.T @ truth.R) < 1e-4


class TestWindowProxies:
    """Test window partitioning and proxy construction functionality."""

    @pytest.mark.unit
    def test_partition(self):
        """Test that 9 frames with W=4 give two windows of four proxies."""
        frames = np.arange(9) * 0.1
        windows = window_proxies(_resting_stream(0.8), frames, 4)
        assert [k for k, _ in windows] == [0, 1]
        assert all(len(p) == 4 for _, p in windows)

    @pytest.mark.unit
    def test_zero_motion(self):
        """Test that a resting stream gives identity proxies."""
        for _, proxies in window_proxies(_resting_stream(0.8), np.arange(9) * 0.1, 4):
            for proxy in proxies:
                assert proxy.is_close(Pose.identity(), tol=1e-9)

    @pytest.mark.unit
    def test_drift_reset(self):
        """Test that perturbing samples before window 1 leaves its proxies unchanged."""
        frames = np.arange(9) * 0.1
        clean = _resting_stream(0.8)
        perturbed = [
            ImuSample(s.timestamp, s.accel + [3.0, -1.0, 0.5], s.gyro + [0.2, 0.0, 0.1]) if s.timestamp < 0.39 else s
            for s in clean
        ]
        a = dict(window_proxies(clean, frames, 4))
        b = dict(window_proxies(perturbed, frames, 4))
        for pa, pb in zip(a[1], b[1]):
            assert pa.is_close(pb, tol=1e-12)
        assert not a[0][0].is_close(b[0][0], tol=1e-6)

    @pytest.mark.unit
    def test_window_larger_than_sequence(self):
        """Test that W beyond the frame count is invalid."""
        with pytest.raises(InvalidArgumentError):
            window_proxies(_resting_stream(0.3), np.arange(4) * 0.1, 4)

    @pytest.mark.unit
    def test_window_size_too_small(self):
        """Test that W < 2 is invalid."""
        with pytest.raises(InvalidArgumentError):
            window_proxies(_resting_stream(0.3), np.arange(4) * 0.1, 1)

    @pytest.mark.unit
    def test_stream_must_cover_frames(self):
        """Test that an IMU stream ending early is rejected."""
        with pytest.raises(InvalidArgumentError):
            window_proxies(_resting_stream(0.5), np.arange(9) * 0.1, 4)

    @pytest.mark.unit
    def test_start_states_from_poses(self):
        """Test central-difference velocities from a constant-velocity track."""
        ts = np.arange(5) * 0.1
        poses = [Pose(Quaternion.identity(), [0.3 * t, 0.0, 0.0]) for t in ts]
        states = start_states_from_poses(ts, poses)
        for s in states:
            assert np.allclose(s.velocity, [0.3, 0.0, 0.0])
        with pytest.raises(InvalidArgumentError):
            start_states_from_poses(ts[:1], poses[:1])

    @pytest.mark.unit
    def test_default_gravity(self):
        """Test the world gravity vector convention."""
        assert np.array_equal(GRAVITY, [0.0, 0.0, -9.81])
