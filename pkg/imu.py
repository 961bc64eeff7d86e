"""
IMU measurement simulation, strapdown integration and window proxies.

Sign convention (world frame, z up):
    gravity g = (0, 0, -9.81)
    measurement  a_m = C(q)^-1 (a_true - g) + b_a + noise,   w_m = w_true + b_w + noise
    kinematics   v_dot = C(q)(a_m - b_a) + g,                 q_dot = 0.5 * Omega(w_m - b_w) q
With this pair, simulate -> integrate is an exact inverse up to integration error.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import InvalidArgumentError
from geometry import Pose, Quaternion, quat_exp, quat_to_rotmat, relative_pose, so3_log

logger = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])
TIME_EPS = 1e-9


def _vec3(v, name):
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} must be a finite 3-vector, got {v!r}")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImuSample:
    timestamp: float
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        if not math.isfinite(float(self.timestamp)):
            raise InvalidArgumentError(f"IMU timestamp must be finite, got {self.timestamp!r}")
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "accel", _vec3(self.accel, "accel"))
        object.__setattr__(self, "gyro", _vec3(self.gyro, "gyro"))


@dataclass(frozen=True, eq=False)
class ImuNoiseParams:
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_noise_std: float = 0.0
    gyro_noise_std: float = 0.0
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    rng_seed: int = 0
    accel_bias_walk_std: float = 0.0
    gyro_bias_walk_std: float = 0.0
    allow_any_gravity: bool = False

    def __post_init__(self):
        object.__setattr__(self, "accel_bias", _vec3(self.accel_bias, "accel_bias"))
        object.__setattr__(self, "gyro_bias", _vec3(self.gyro_bias, "gyro_bias"))
        object.__setattr__(self, "gravity", _vec3(self.gravity, "gravity"))
        for name in ("accel_noise_std", "gyro_noise_std", "accel_bias_walk_std", "gyro_bias_walk_std"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be >= 0")
        g = float(np.linalg.norm(self.gravity))
        if not self.allow_any_gravity and g != 0.0 and not 9.7 <= g <= 9.9:
            raise InvalidArgumentError(f"|gravity| = {g} outside [9.7, 9.9]; set allow_any_gravity to override")
        if self.rng_seed < 0:
            raise InvalidArgumentError("rng_seed must be a non-negative integer")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        kwargs = {}
        for key in ("accel_bias", "gyro_bias", "gravity"):
            if key in d:
                kwargs[key] = np.asarray(d.pop(key), dtype=np.float64)
        for key in ("accel_noise_std", "gyro_noise_std", "accel_bias_walk_std", "gyro_bias_walk_std"):
            if key in d:
                kwargs[key] = float(d.pop(key))
        if "rng_seed" in d:
            kwargs["rng_seed"] = int(d.pop("rng_seed"))
        if "allow_any_gravity" in d:
            kwargs["allow_any_gravity"] = bool(d.pop("allow_any_gravity"))
        if d:
            raise InvalidArgumentError(f"Unknown IMU noise keys: {sorted(d)}")
        return cls(**kwargs)

    def to_dict(self):
        return {
            "accel_bias": self.accel_bias.tolist(),
            "gyro_bias": self.gyro_bias.tolist(),
            "accel_noise_std": self.accel_noise_std,
            "gyro_noise_std": self.gyro_noise_std,
            "gravity": self.gravity.tolist(),
            "rng_seed": self.rng_seed,
            "accel_bias_walk_std": self.accel_bias_walk_std,
            "gyro_bias_walk_std": self.gyro_bias_walk_std,
            "allow_any_gravity": self.allow_any_gravity,
        }


@dataclass(frozen=True, eq=False)
class ImuState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: Quaternion = field(default_factory=Quaternion.identity)
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("position", "velocity", "accel_bias", "gyro_bias"):
            object.__setattr__(self, name, _vec3(getattr(self, name), name))
        if not isinstance(self.orientation, Quaternion):
            object.__setattr__(self, "orientation", Quaternion.from_array(self.orientation))

    @property
    def pose(self):
        return Pose(self.orientation, self.position)


@dataclass(frozen=True)
class BiasRandomWalk:
    """Seeded bias random walk applied by integrate_step in simulation mode."""

    rng: np.random.Generator
    accel_std: float = 0.0
    gyro_std: float = 0.0


@dataclass(frozen=True, eq=False)
class ImuWindow:
    samples: Sequence[ImuSample]
    start_state: ImuState
    frame_timestamps: Sequence[float]
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    @property
    def window_size(self):
        return len(self.frame_timestamps) - 1


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Densely sampled trajectory (world-from-body poses).

    accelerations (world frame) and angular_rates (body frame) may be supplied analytically;
    otherwise they are recovered by finite differences.
    """

    timestamps: np.ndarray
    positions: np.ndarray
    orientations: Sequence[Quaternion]
    velocities: Optional[np.ndarray] = None
    accelerations: Optional[np.ndarray] = None
    angular_rates: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.timestamps)

    def pose(self, i):
        return Pose(self.orientations[i], self.positions[i])

    def state(self, i):
        velocity = self.velocities[i] if self.velocities is not None else np.zeros(3)
        return ImuState(position=self.positions[i], velocity=velocity, orientation=self.orientations[i])


def integrate_step(state, sample, dt, bias_walk=None, gravity=GRAVITY):
    """One strapdown step holding the sample's measurement over dt.

    Orientation advances by the exact quaternion exponential; position and velocity use the
    specific force rotated at the mid-step orientation.
    """
    if not dt > 0:
        raise InvalidArgumentError(f"dt must be positive, got {dt!r}")
    omega = sample.gyro - state.gyro_bias
    specific_force = sample.accel - state.accel_bias
    q = state.orientation
    q_mid = q * quat_exp(omega * (0.5 * dt))
    q_new = q * quat_exp(omega * dt)
    a_world = quat_to_rotmat(q_mid) @ specific_force + np.asarray(gravity, dtype=np.float64)
    position = state.position + state.velocity * dt + 0.5 * a_world * dt * dt
    velocity = state.velocity + a_world * dt
    accel_bias, gyro_bias = state.accel_bias, state.gyro_bias
    if bias_walk is not None:
        scale = math.sqrt(dt)
        accel_bias = accel_bias + bias_walk.rng.normal(0.0, bias_walk.accel_std * scale, 3)
        gyro_bias = gyro_bias + bias_walk.rng.normal(0.0, bias_walk.gyro_std * scale, 3)
    return ImuState(position, velocity, q_new, accel_bias, gyro_bias)


def samples_to_arrays(samples):
    ts = np.array([s.timestamp for s in samples], dtype=np.float64)
    accel = np.array([s.accel for s in samples], dtype=np.float64).reshape(-1, 3)
    gyro = np.array([s.gyro for s in samples], dtype=np.float64).reshape(-1, 3)
    return ts, accel, gyro


def _interp(ts, values, t):
    if len(ts) == 1:
        return values[0].copy()
    return np.array([np.interp(t, ts, values[:, k]) for k in range(3)])


def _integrate_to_frames(samples, start_state, frame_timestamps, gravity):
    """States at each frame timestamp, integrating midpoint-averaged measurements between knots."""
    ts, accel, gyro = samples_to_arrays(samples)
    frames = np.asarray(frame_timestamps, dtype=np.float64)
    t0, t_end = frames[0], frames[-1]
    inside = ts[(ts > t0 + TIME_EPS) & (ts < t_end - TIME_EPS)]
    knots = [(t, -1) for t in inside if np.min(np.abs(frames - t)) > TIME_EPS]
    knots += [(t, i) for i, t in enumerate(frames)]
    knots.sort(key=lambda k: k[0])

    states = [start_state]
    state = start_state
    prev_t = knots[0][0]
    prev_a, prev_w = _interp(ts, accel, prev_t), _interp(ts, gyro, prev_t)
    for t, frame_index in knots[1:]:
        a, w = _interp(ts, accel, t), _interp(ts, gyro, t)
        mid = ImuSample(prev_t, 0.5 * (prev_a + a), 0.5 * (prev_w + w))
        state = integrate_step(state, mid, t - prev_t, gravity=gravity)
        if frame_index >= 0:
            states.append(state)
        prev_t, prev_a, prev_w = t, a, w
    return states


def integrate_window(window: ImuWindow) -> List[Pose]:
    """Poses at every frame boundary of the window, relative to its first frame (identity)."""
    if not window.samples:
        raise InvalidArgumentError("IMU window has no samples")
    if len(window.frame_timestamps) < 2:
        raise InvalidArgumentError("IMU window needs at least two frame timestamps")
    if np.any(np.diff(window.frame_timestamps) <= 0):
        raise InvalidArgumentError("Window frame timestamps must be strictly increasing")
    states = _integrate_to_frames(window.samples, window.start_state, window.frame_timestamps, window.gravity)
    first = states[0].pose
    return [relative_pose(first, s.pose) for s in states]


def _uniform_dt(timestamps):
    dts = np.diff(timestamps)
    dt = float(np.mean(dts))
    if dt <= 0 or np.max(np.abs(dts - dt)) > 1e-6 * dt:
        raise InvalidArgumentError("Trajectory must be sampled at a uniform, positive dt")
    return dt


def _finite_difference_accel(positions, dt):
    acc = np.empty_like(positions)
    acc[1:-1] = (positions[2:] - 2.0 * positions[1:-1] + positions[:-2]) / (dt * dt)
    acc[0], acc[-1] = acc[1], acc[-2]
    return acc


def _finite_difference_rates(rotations, dt):
    rates = np.empty((len(rotations), 3))
    for k in range(1, len(rotations) - 1):
        rates[k] = so3_log(rotations[k - 1].T @ rotations[k + 1]) / (2.0 * dt)
    rates[0], rates[-1] = rates[1], rates[-2]
    return rates


def simulate_measurements(trajectory: Trajectory, params: ImuNoiseParams) -> List[ImuSample]:
    """Synthesize accelerometer/gyro samples for a trajectory. Deterministic given params.rng_seed."""
    n = len(trajectory)
    if n < 3:
        raise InvalidArgumentError(f"Need at least 3 trajectory samples, got {n}")
    timestamps = np.asarray(trajectory.timestamps, dtype=np.float64)
    dt = _uniform_dt(timestamps)
    positions = np.asarray(trajectory.positions, dtype=np.float64)
    rotations = [quat_to_rotmat(q) for q in trajectory.orientations]

    if trajectory.accelerations is not None:
        acc_world = np.asarray(trajectory.accelerations, dtype=np.float64)
    else:
        acc_world = _finite_difference_accel(positions, dt)
    if trajectory.angular_rates is not None:
        rates = np.asarray(trajectory.angular_rates, dtype=np.float64)
    else:
        rates = _finite_difference_rates(rotations, dt)

    rng = np.random.default_rng(params.rng_seed)
    accel_noise = rng.normal(0.0, params.accel_noise_std, (n, 3))
    gyro_noise = rng.normal(0.0, params.gyro_noise_std, (n, 3))
    walk_scale = math.sqrt(dt)
    accel_walk = np.cumsum(rng.normal(0.0, params.accel_bias_walk_std * walk_scale, (n, 3)), axis=0)
    gyro_walk = np.cumsum(rng.normal(0.0, params.gyro_bias_walk_std * walk_scale, (n, 3)), axis=0)
    accel_walk[0] = 0.0
    gyro_walk[0] = 0.0

    samples = []
    for k in range(n):
        a_m = rotations[k].T @ (acc_world[k] - params.gravity) + params.accel_bias + accel_walk[k] + accel_noise[k]
        w_m = rates[k] + params.gyro_bias + gyro_walk[k] + gyro_noise[k]
        samples.append(ImuSample(timestamps[k], a_m, w_m))
    return samples


def start_states_from_poses(timestamps, poses: Sequence[Pose]) -> List[ImuState]:
    """Per-frame states with central-difference velocities (one-sided at the ends)."""
    ts = np.asarray(timestamps, dtype=np.float64)
    if len(ts) != len(poses) or len(ts) < 2:
        raise InvalidArgumentError("Need at least two poses with matching timestamps")
    p = np.array([pose.translation for pose in poses])
    v = np.empty_like(p)
    v[1:-1] = (p[2:] - p[:-2]) / (ts[2:] - ts[:-2])[:, None]
    v[0] = (p[1] - p[0]) / (ts[1] - ts[0])
    v[-1] = (p[-1] - p[-2]) / (ts[-1] - ts[-2])
    return [ImuState(position=p[i], velocity=v[i], orientation=poses[i].rotation) for i in range(len(ts))]


def window_proxies(
    imu_stream: Sequence[ImuSample],
    frame_timestamps: Sequence[float],
    W: int,
    start_states: Optional[Sequence[ImuState]] = None,
    gravity=GRAVITY,
) -> List[Tuple[int, List[Pose]]]:
    """Per-interval relative poses for each complete window of W frame intervals.

    Integration restarts at every window start, so window k only sees its own samples.
    start_states[k], when given, is the state at window k's first frame.
    """
    frames = np.asarray(frame_timestamps, dtype=np.float64)
    if W < 2:
        raise InvalidArgumentError(f"Window size must be >= 2, got {W}")
    n_intervals = len(frames) - 1
    if W > n_intervals:
        raise InvalidArgumentError(f"Window size {W} larger than the {n_intervals} frame intervals available")
    if not imu_stream:
        raise InvalidArgumentError("IMU stream is empty")
    ts = np.array([s.timestamp for s in imu_stream])
    n_windows = n_intervals // W
    last_frame = frames[n_windows * W]
    if ts[0] > frames[0] + TIME_EPS or ts[-1] < last_frame - TIME_EPS:
        raise InvalidArgumentError(
            f"IMU stream [{ts[0]}, {ts[-1]}] does not cover frames [{frames[0]}, {last_frame}]"
        )
    if start_states is not None and len(start_states) < n_windows:
        raise InvalidArgumentError(f"Need {n_windows} start states, got {len(start_states)}")

    result = []
    for k in range(n_windows):
        window_frames = frames[k * W : k * W + W + 1]
        lo = int(np.searchsorted(ts, window_frames[0] - TIME_EPS, side="left"))
        hi = int(np.searchsorted(ts, window_frames[-1] + TIME_EPS, side="right"))
        if hi < len(ts) and ts[hi - 1] < window_frames[-1] - TIME_EPS:
            hi += 1
        start = start_states[k] if start_states is not None else ImuState()
        window = ImuWindow(list(imu_stream[lo:hi]), start, window_frames.tolist(), gravity)
        cumulative = integrate_window(window)
        proxies = [relative_pose(cumulative[i], cumulative[i + 1]) for i in range(W)]
        result.append((k, proxies))
    logger.debug("Built %d IMU proxy windows of size %d", len(result), W)
    return result
