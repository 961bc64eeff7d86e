"""
Dataset ingestion and synthetic scene generation.

A dataset on disk is a manifest JSON next to PGM frames, an IMU CSV and a ground-truth pose
file (KITTI 3x4 rows or TUM `t tx ty tz qx qy qz qw`). Synthetic datasets add `states.csv`
(analytic per-frame IMU states) and `features/` (exact projections for the external detector).
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

import config
from errors import (
    DataIntegrityError,
    DatasetNotFoundError,
    InvalidArgumentError,
    ParseError,
    SceneTooSparseError,
)
from geometry import (
    ORTHONORMAL_TOL,
    CameraIntrinsics,
    Pose,
    Quaternion,
    project_to_rotation,
    rotmat_to_quat,
)
from imu import ImuNoiseParams, ImuSample, ImuState, Trajectory, simulate_measurements
from vision import BRIEF_BITS, Image, Keypoint, write_external_features

logger = logging.getLogger(__name__)

IMU_COLUMNS = ["t", "ax", "ay", "az", "wx", "wy", "wz"]
STATE_COLUMNS = ["t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz"]
GROUNDTRUTH_FORMATS = ("kitti", "tum")
TRAJECTORY_KINDS = ("circle", "figure-eight", "straight")
MIN_VISIBLE_POINTS = 50
SQUARE_HALF = 2
CHECKER_CELL = 8
CHECKER_LEVEL = 40

# world-from-camera rotation at zero yaw: camera right, down, forward = world -y, -z, +x
CAMERA_AXES = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class FrameEntry:
    timestamp: float
    image: str


@dataclass(frozen=True)
class GroundTruthPose:
    timestamp: float
    pose: Pose


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    frames: Tuple[FrameEntry, ...]
    imu_file: str
    groundtruth_file: str
    intrinsics: CameraIntrinsics
    groundtruth_format: str = "tum"
    states_file: Optional[str] = None
    features_dir: Optional[str] = None
    frame_rate: Optional[float] = None

    def resolve(self, relative):
        return relative if os.path.isabs(relative) else os.path.join(self.root, relative)

    @property
    def timestamps(self):
        return np.array([f.timestamp for f in self.frames])


def _json_error(e: json.JSONDecodeError, path):
    return ParseError(f"malformed JSON: {e.msg}", path=str(path), line=e.lineno)


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest; every missing referenced file is reported at once."""
    path = str(path)
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise DatasetNotFoundError([path]) from e
    except json.JSONDecodeError as e:
        raise _json_error(e, path) from e
    if not isinstance(raw, dict):
        raise ParseError("manifest must be a JSON object", path=path, line=1)
    for key in ("frames", "imu", "groundtruth", "intrinsics"):
        if key not in raw:
            raise ParseError(f"manifest is missing '{key}'", path=path)
    if not isinstance(raw["frames"], list) or not raw["frames"]:
        raise ParseError("manifest 'frames' must be a non-empty list", path=path)
    try:
        frames = tuple(FrameEntry(float(fr["t"]), str(fr["image"])) for fr in raw["frames"])
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"bad frame entry: {e}", path=path) from e
    ts = np.array([f.timestamp for f in frames])
    if np.any(np.diff(ts) <= 0):
        bad = int(np.flatnonzero(np.diff(ts) <= 0)[0]) + 1
        raise DataIntegrityError(f"frame timestamps not strictly increasing at frame {bad}", path=path)
    gt_format = raw.get("groundtruth_format", "tum")
    if gt_format not in GROUNDTRUTH_FORMATS:
        raise ParseError(f"groundtruth_format must be one of {GROUNDTRUTH_FORMATS}, got {gt_format!r}", path=path)

    manifest = DatasetManifest(
        root=os.path.dirname(os.path.abspath(path)),
        frames=frames,
        imu_file=str(raw["imu"]),
        groundtruth_file=str(raw["groundtruth"]),
        intrinsics=CameraIntrinsics.from_dict(raw["intrinsics"]),
        groundtruth_format=gt_format,
        states_file=raw.get("states"),
        features_dir=raw.get("features"),
        frame_rate=float(raw["frame_rate"]) if "frame_rate" in raw else None,
    )
    referenced = [f.image for f in frames] + [manifest.imu_file, manifest.groundtruth_file]
    if manifest.states_file:
        referenced.append(manifest.states_file)
    missing = [manifest.resolve(r) for r in referenced if not os.path.exists(manifest.resolve(r))]
    if manifest.features_dir and not os.path.isdir(manifest.resolve(manifest.features_dir)):
        missing.append(manifest.resolve(manifest.features_dir))
    if missing:
        raise DatasetNotFoundError(missing)
    logger.info("Loaded manifest %s with %d frames", path, len(frames))
    return manifest


def write_manifest(path, manifest_dict: Dict):
    with open(path, "w") as f:
        json.dump(manifest_dict, f, indent=2)


# --- pose files ---


def _read_lines(path):
    with open(path) as f:
        return f.read().splitlines()


def load_kitti_poses(path, frame_rate: float = 10.0) -> List[GroundTruthPose]:
    """Rows of 12 floats (row-major [R|t]); timestamp = index / frame_rate."""
    path = str(path)
    poses = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 12:
            raise ParseError(f"expected 12 values, got {len(tokens)}", path=path, line=lineno)
        try:
            M = np.array([float(t) for t in tokens]).reshape(3, 4)
        except ValueError as e:
            raise ParseError(str(e), path=path, line=lineno) from e
        R = M[:, :3]
        drift = float(np.max(np.abs(R.T @ R - np.eye(3))))
        if drift > ORTHONORMAL_TOL or np.linalg.det(R) <= 0:
            logger.warning("%s:%d rotation drifted %.2e from orthonormal; re-projecting", path, lineno, drift)
            R = project_to_rotation(R)
        poses.append(GroundTruthPose(len(poses) / frame_rate, Pose.from_rt(R, M[:, 3])))
    return poses


def write_kitti_poses(path, poses: Sequence):
    lines = []
    for p in poses:
        pose = p.pose if isinstance(p, GroundTruthPose) else p
        M = pose.as_matrix()[:3]
        lines.append(" ".join(repr(float(v)) for v in M.reshape(-1)))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_tum_poses(path) -> List[GroundTruthPose]:
    """`t tx ty tz qx qy qz qw` per line, scalar-last on disk; '#' lines are comments."""
    path = str(path)
    poses = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = stripped.split()
        if len(tokens) != 8:
            raise ParseError(f"expected 8 values, got {len(tokens)}", path=path, line=lineno)
        try:
            t, tx, ty, tz, qx, qy, qz, qw = (float(v) for v in tokens)
            rotation = Quaternion(qw, qx, qy, qz)
        except ValueError as e:
            raise ParseError(str(e), path=path, line=lineno) from e
        poses.append(GroundTruthPose(t, Pose(rotation, np.array([tx, ty, tz]))))
    return poses


def write_tum_poses(path, poses: Sequence[GroundTruthPose]):
    lines = ["# t tx ty tz qx qy qz qw"]
    for gt in poses:
        q, t = gt.pose.rotation, gt.pose.translation
        values = (gt.timestamp, t[0], t[1], t[2], q.x, q.y, q.z, q.w)
        lines.append(" ".join(repr(float(v)) for v in values))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# --- CSV streams ---


def _read_numeric_csv(path, columns):
    path = str(path)
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError as e:
        raise ParseError("empty file", path=path, line=1) from e
    except pd.errors.ParserError as e:
        raise ParseError(f"malformed CSV: {e}", path=path) from e
    if list(df.columns) != columns:
        header = ",".join(map(str, df.columns))
        raise ParseError(f"expected header {','.join(columns)}, got {header}", path=path, line=1)
    try:
        values = df.to_numpy(dtype=np.float64)
    except ValueError as e:
        raise ParseError(f"non-numeric value: {e}", path=path) from e
    bad_rows = np.flatnonzero(~np.all(np.isfinite(values), axis=1))
    if bad_rows.size:
        raise ParseError("missing or non-finite value", path=path, line=int(bad_rows[0]) + 2)
    dt = np.diff(values[:, 0])
    if np.any(dt <= 0):
        row = int(np.flatnonzero(dt <= 0)[0]) + 1
        raise DataIntegrityError(
            f"timestamp {values[row, 0]!r} does not increase on {values[row - 1, 0]!r}", path=path, line=row + 2
        )
    return values


def load_imu_csv(path) -> List[ImuSample]:
    values = _read_numeric_csv(path, IMU_COLUMNS)
    return [ImuSample(row[0], row[1:4], row[4:7]) for row in values]


def write_imu_csv(path, samples: Sequence[ImuSample]):
    rows = [[s.timestamp, *s.accel, *s.gyro] for s in samples]
    pd.DataFrame(rows, columns=IMU_COLUMNS).to_csv(path, index=False)


def load_states_csv(path) -> Tuple[np.ndarray, List[ImuState]]:
    values = _read_numeric_csv(path, STATE_COLUMNS)
    states = [ImuState(position=row[1:4], velocity=row[4:7], orientation=Quaternion(*row[7:11])) for row in values]
    return values[:, 0].copy(), states


def write_states_csv(path, timestamps, states: Sequence[ImuState]):
    rows = []
    for t, s in zip(timestamps, states):
        q = s.orientation
        rows.append([t, *s.position, *s.velocity, q.w, q.x, q.y, q.z])
    pd.DataFrame(rows, columns=STATE_COLUMNS).to_csv(path, index=False)


# --- loaded dataset ---


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: List[Image]
    imu: List[ImuSample]
    groundtruth: List[GroundTruthPose]
    states: Optional[List[ImuState]] = None

    @property
    def timestamps(self):
        return self.manifest.timestamps

    @property
    def intrinsics(self):
        return self.manifest.intrinsics

    @property
    def gt_poses(self) -> List[Pose]:
        return [g.pose for g in self.groundtruth]

    @property
    def features_dir(self):
        if self.manifest.features_dir is None:
            return None
        return self.manifest.resolve(self.manifest.features_dir)

    def __len__(self):
        return len(self.images)


def load_dataset(path, progress: Optional[bool] = None) -> Dataset:
    manifest = load_manifest(path)
    show = config.progress_enabled() if progress is None else progress
    images = []
    for entry in tqdm(manifest.frames, desc="load frames", unit="frame", disable=not show):
        image = Image.load(manifest.resolve(entry.image))
        if (image.width, image.height) != (manifest.intrinsics.width, manifest.intrinsics.height):
            raise DataIntegrityError(
                f"frame is {image.width}x{image.height}, intrinsics say "
                f"{manifest.intrinsics.width}x{manifest.intrinsics.height}",
                path=manifest.resolve(entry.image),
            )
        images.append(image)
    imu = load_imu_csv(manifest.resolve(manifest.imu_file))
    gt_path = manifest.resolve(manifest.groundtruth_file)
    if manifest.groundtruth_format == "kitti":
        rate = manifest.frame_rate or _frame_rate(manifest.timestamps)
        groundtruth = load_kitti_poses(gt_path, rate)
    else:
        groundtruth = load_tum_poses(gt_path)
    if len(groundtruth) != len(images):
        raise DataIntegrityError(f"{len(groundtruth)} ground-truth poses for {len(images)} frames", path=gt_path)
    states = None
    if manifest.states_file:
        _, states = load_states_csv(manifest.resolve(manifest.states_file))
        if len(states) != len(images):
            raise DataIntegrityError(f"{len(states)} states for {len(images)} frames", path=manifest.states_file)
    return Dataset(manifest, images, imu, groundtruth, states)


def _frame_rate(timestamps):
    if len(timestamps) < 2:
        return 10.0
    return 1.0 / float(np.mean(np.diff(timestamps)))


# --- synthetic scenes ---


@dataclass(frozen=True, eq=False)
class SyntheticSceneConfig:
    point_count: int = 300
    extent: Tuple[float, float, float] = (2.0, 2.0, 1.5)
    trajectory: str = "circle"
    radius: float = 5.0
    angular_speed: float = 0.5
    linear_speed: float = 0.2
    frame_count: int = 100
    frame_rate: float = 10.0
    imu_rate: float = 200.0
    width: int = 64
    height: int = 64
    intrinsics: Optional[CameraIntrinsics] = None
    noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    rng_seed: int = 0

    def __post_init__(self):
        if self.trajectory not in TRAJECTORY_KINDS:
            raise InvalidArgumentError(f"trajectory must be one of {TRAJECTORY_KINDS}, got {self.trajectory!r}")
        if self.point_count < MIN_VISIBLE_POINTS:
            raise InvalidArgumentError(f"point_count must be >= {MIN_VISIBLE_POINTS}, got {self.point_count}")
        if self.frame_count < 2 or self.frame_rate <= 0:
            raise InvalidArgumentError("Need at least two frames at a positive frame rate")
        if self.imu_rate < 10 * self.frame_rate:
            raise InvalidArgumentError(f"imu_rate {self.imu_rate} must be at least 10x frame_rate {self.frame_rate}")
        if self.radius <= 0 or min(self.extent) <= 0:
            raise InvalidArgumentError("radius and extent must be positive")
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))
        if self.intrinsics is None:
            object.__setattr__(self, "intrinsics", CameraIntrinsics.default_for(self.width, self.height))
        elif (self.intrinsics.width, self.intrinsics.height) != (self.width, self.height):
            raise InvalidArgumentError("intrinsics size does not match the image size")
        # Image() enforces the minimum size; check it here so configs fail early
        if self.width < 16 or self.height < 16:
            raise InvalidArgumentError("Images must be at least 16x16")

    @classmethod
    def from_dict(cls, d: Dict):
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidArgumentError(f"Unknown synthetic scene keys: {sorted(unknown)}")
        if "intrinsics" in d and d["intrinsics"] is not None:
            d["intrinsics"] = CameraIntrinsics.from_dict(d["intrinsics"])
        if "noise" in d:
            d["noise"] = ImuNoiseParams.from_dict(d["noise"])
        if "extent" in d:
            d["extent"] = tuple(d["extent"])
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise _json_error(e, path) from e

    def to_dict(self):
        return {
            "point_count": self.point_count,
            "extent": list(self.extent),
            "trajectory": self.trajectory,
            "radius": self.radius,
            "angular_speed": self.angular_speed,
            "linear_speed": self.linear_speed,
            "frame_count": self.frame_count,
            "frame_rate": self.frame_rate,
            "imu_rate": self.imu_rate,
            "width": self.width,
            "height": self.height,
            "intrinsics": self.intrinsics.to_dict(),
            "noise": self.noise.to_dict(),
            "rng_seed": self.rng_seed,
        }

    @property
    def duration(self):
        return (self.frame_count - 1) / self.frame_rate


def _rz(psi):
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sample_trajectory(cfg: SyntheticSceneConfig, times) -> Trajectory:
    """Analytic camera path with yaw-only look-at orientation (world-from-camera).

    Returns positions, velocities, world accelerations and body angular rates at `times`.
    """
    s = np.asarray(times, dtype=np.float64)
    zero = np.zeros_like(s)
    r, w = cfg.radius, cfg.angular_speed
    if cfg.trajectory == "circle":
        theta = w * s
        pos = np.stack([r * np.cos(theta), r * np.sin(theta), zero], axis=1)
        vel = np.stack([-r * w * np.sin(theta), r * w * np.cos(theta), zero], axis=1)
        acc = np.stack([-r * w * w * np.cos(theta), -r * w * w * np.sin(theta), zero], axis=1)
        yaw = theta + math.pi
        yaw_rate = np.full_like(s, w)
    elif cfg.trajectory == "figure-eight":
        a = 0.4 * r
        theta = w * s
        pos = np.stack([np.full_like(s, -r), a * np.sin(theta), 0.5 * a * np.sin(2 * theta)], axis=1)
        vel = np.stack([zero, a * w * np.cos(theta), a * w * np.cos(2 * theta)], axis=1)
        acc = np.stack([zero, -a * w * w * np.sin(theta), -2 * a * w * w * np.sin(2 * theta)], axis=1)
        yaw = np.arctan2(-a * np.sin(theta), r)
        yaw_rate = -r * a * w * np.cos(theta) / (r * r + (a * np.sin(theta)) ** 2)
    else:
        mid = 0.5 * cfg.duration
        v = cfg.linear_speed
        pos = np.stack([np.full_like(s, -r), v * (s - mid), zero], axis=1)
        vel = np.stack([zero, np.full_like(s, v), zero], axis=1)
        acc = np.zeros_like(pos)
        yaw = zero
        yaw_rate = zero
    orientations = [rotmat_to_quat(_rz(float(psi)) @ CAMERA_AXES) for psi in yaw]
    # body rate of R = Rz(psi) @ CAMERA_AXES is CAMERA_AXES^T e_z * psi_dot = (0, -psi_dot, 0)
    rates = np.stack([zero, -yaw_rate, zero], axis=1)
    return Trajectory(s, pos, orientations, velocities=vel, accelerations=acc, angular_rates=rates)


def render_frame(cfg: SyntheticSceneConfig, uv: np.ndarray) -> np.ndarray:
    """Checkerboard background plus a 5x5 white square at each rounded projection."""
    yy, xx = np.mgrid[0 : cfg.height, 0 : cfg.width]
    pixels = (((xx // CHECKER_CELL) + (yy // CHECKER_CELL)) % 2 * CHECKER_LEVEL).astype(np.uint8)
    for u, v in np.rint(uv).astype(np.int64):
        x0, x1 = max(u - SQUARE_HALF, 0), min(u + SQUARE_HALF + 1, cfg.width)
        y0, y1 = max(v - SQUARE_HALF, 0), min(v + SQUARE_HALF + 1, cfg.height)
        pixels[y0:y1, x0:x1] = 255
    return pixels


@dataclass
class SyntheticScene:
    config: SyntheticSceneConfig
    points: np.ndarray
    descriptors: np.ndarray
    frame_timestamps: np.ndarray
    poses: List[Pose]
    states: List[ImuState]
    imu: List[ImuSample]
    images: List[Image]
    visible: List[np.ndarray]
    projections: List[np.ndarray]

    @property
    def groundtruth(self):
        return [GroundTruthPose(float(t), p) for t, p in zip(self.frame_timestamps, self.poses)]

    @property
    def gt_poses(self):
        return list(self.poses)

    @property
    def timestamps(self):
        return self.frame_timestamps

    @property
    def intrinsics(self):
        return self.config.intrinsics

    def features(self, frame_index) -> Tuple[List[Keypoint], np.ndarray]:
        """Exact projections of visible points with their per-point descriptors."""
        uv = self.projections[frame_index]
        kps = [Keypoint(float(u), float(v), 1.0) for u, v in uv]
        return kps, self.descriptors[self.visible[frame_index]]


def build_scene(cfg: SyntheticSceneConfig, progress: Optional[bool] = None) -> SyntheticScene:
    rng = np.random.default_rng(cfg.rng_seed)
    ex, ey, ez = cfg.extent
    points = rng.uniform(-1.0, 1.0, size=(cfg.point_count, 3)) * np.array([ex, ey, ez])
    descriptors = rng.integers(0, 256, size=(cfg.point_count, BRIEF_BITS // 8), dtype=np.uint8)

    frame_times = np.arange(cfg.frame_count) / cfg.frame_rate
    frame_traj = sample_trajectory(cfg, frame_times)
    poses = [frame_traj.pose(i) for i in range(cfg.frame_count)]
    states = [frame_traj.state(i) for i in range(cfg.frame_count)]

    imu_count = int(math.ceil(cfg.duration * cfg.imu_rate - 1e-9)) + 1
    imu_traj = sample_trajectory(cfg, np.arange(imu_count) / cfg.imu_rate)
    imu = simulate_measurements(imu_traj, cfg.noise)

    K = cfg.intrinsics
    show = config.progress_enabled() if progress is None else progress
    images, visible, projections = [], [], []
    in_front = np.zeros(cfg.point_count)
    for pose in tqdm(poses, desc="render", unit="frame", disable=not show):
        cam = pose.inverse().transform(points)
        front = cam[:, 2] > 1e-6
        in_front += front
        uv = np.full((cfg.point_count, 2), -1.0)
        uv[front] = K.project(cam[front])
        inside = front & (uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
        idx = np.flatnonzero(inside)
        visible.append(idx)
        projections.append(uv[idx])
        images.append(Image.from_array(render_frame(cfg, uv[idx])))

    mean_visible = float(np.mean([len(v) for v in visible]))
    if mean_visible < MIN_VISIBLE_POINTS:
        raise SceneTooSparseError(
            f"Only {mean_visible:.1f} points visible per frame on average (need {MIN_VISIBLE_POINTS})"
        )
    if np.mean(in_front / cfg.frame_count >= 0.9) < 1.0:
        logger.warning("Some world points are behind the camera in more than 10% of frames")
    logger.info(
        "Built %s scene: %d frames, %.1f visible points per frame", cfg.trajectory, cfg.frame_count, mean_visible
    )
    return SyntheticScene(cfg, points, descriptors, frame_times, poses, states, imu, images, visible, projections)


def synth_generate(cfg: SyntheticSceneConfig, out_dir, progress: Optional[bool] = None) -> str:
    """Write a complete dataset under out_dir; returns the manifest path."""
    scene = build_scene(cfg, progress)
    out_dir = str(out_dir)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    frames = []
    for i, image in enumerate(scene.images):
        name = f"frame_{i:06d}"
        image.save(os.path.join(out_dir, "images", name + ".pgm"))
        kps, desc = scene.features(i)
        write_external_features(os.path.join(out_dir, "features", name + ".txt"), kps, desc)
        frames.append({"t": float(scene.frame_timestamps[i]), "image": f"images/{name}.pgm"})
    write_imu_csv(os.path.join(out_dir, "imu.csv"), scene.imu)
    write_tum_poses(os.path.join(out_dir, "groundtruth.txt"), scene.groundtruth)
    write_states_csv(os.path.join(out_dir, "states.csv"), scene.frame_timestamps, scene.states)
    manifest_path = os.path.join(out_dir, "manifest.json")
    write_manifest(
        manifest_path,
        {
            "frames": frames,
            "imu": "imu.csv",
            "groundtruth": "groundtruth.txt",
            "groundtruth_format": "tum",
            "intrinsics": cfg.intrinsics.to_dict(),
            "states": "states.csv",
            "features": "features",
            "frame_rate": cfg.frame_rate,
            "synthetic": cfg.to_dict(),
        },
    )
    logger.info("Wrote synthetic dataset to %s", out_dir)
    return manifest_path
