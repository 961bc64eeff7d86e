"""
Visual-odometry runner and metrics.

run_vo chains per-pair essential-matrix poses from the first camera, scaling each unit
translation by the ground-truth inter-frame distance. Reports carry ATE, rotation error,
relative pose error, inlier/outlier statistics, homography reprojection error and timing.
"""

import glob
import json
import logging
import math
import os
import time
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
from tqdm import tqdm

import config
from errors import (
    AmbiguousPoseError,
    DegenerateInputError,
    InsufficientDataError,
    InvalidArgumentError,
    NoConsensusError,
    ParseError,
    ReportIOError,
    RunDegenerateError,
)
from geometry import Pose, anchor_poses, pose_compose, pose_inverse, relative_pose, rotation_angle
from imu import start_states_from_poses
from learn import TrainingWindow, build_windows
from sfm import (
    InlierStats,
    RansacConfig,
    correspondences_from_matches,
    decompose_essential,
    ransac_essential,
    ransac_homography,
    reprojection_error,
    select_pose_cheirality,
)
from vision import (
    BinaryMask,
    FeatureDetector,
    match_bruteforce,
    mask_indices,
    mask_reduction,
    read_mask,
    write_attention_heatmap,
    write_mask,
)

logger = logging.getLogger(__name__)

MIN_PAIR_MATCHES = 8
MAX_SKIPPED_FRACTION = 0.2
PAIR_FAILURES = (NoConsensusError, AmbiguousPoseError, DegenerateInputError, InsufficientDataError)

# column order of the CSV report; timing rows last
REPORT_METRICS = (
    "frame_count",
    "pair_count",
    "skipped_pair_count",
    "ate_rmse",
    "rotation_rmse",
    "rpe_translation_mean",
    "rpe_rotation_mean",
    "mean_inliers",
    "std_inliers",
    "mean_outliers",
    "std_outliers",
    "mean_reprojection_error",
    "mask_reduction",
    "keypoints_detected_mean",
    "keypoints_kept_mean",
    "wall_time",
    "per_pair_time",
)
TIMING_FIELDS = ("wall_time", "per_pair_time")


@dataclass
class TrajectoryEstimate:
    """Anchor-from-camera poses; poses[0] is the identity."""

    poses: List[Pose]
    scale_sources: List[str]

    def __len__(self):
        return len(self.poses)

    def positions(self):
        return np.array([p.translation for p in self.poses])


@dataclass
class TrajectoryReport:
    frame_count: int
    pair_count: int
    skipped_pairs: List[int]
    ate_rmse: float
    rotation_rmse: float
    rpe_translation_mean: float
    rpe_rotation_mean: float
    mean_inliers: float
    std_inliers: float
    mean_outliers: float
    std_outliers: float
    mean_reprojection_error: Optional[float]
    mask_reduction: float
    keypoints_detected_mean: float
    keypoints_kept_mean: float
    wall_time: float
    per_pair_time: float
    inlier_counts: List[int] = field(default_factory=list)
    outlier_counts: List[int] = field(default_factory=list)
    config: Dict = field(default_factory=dict)

    @property
    def skipped_pair_count(self):
        return len(self.skipped_pairs)

    def metric(self, name):
        value = getattr(self, name)
        return float("nan") if value is None else float(value)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict, path=None):
        if not isinstance(d, dict):
            raise ParseError("report must be a JSON object", path=path)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ParseError(f"unknown report keys: {sorted(unknown)}", path=path)
        required = {f.name for f in fields(cls) if f.default is MISSING and f.default_factory is MISSING}
        missing = required - set(d)
        if missing:
            raise ParseError(f"report is missing keys: {sorted(missing)}", path=path)
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f), path=str(path))
        except FileNotFoundError as e:
            raise InvalidArgumentError(f"Report not found: {path}") from e
        except json.JSONDecodeError as e:
            raise InvalidArgumentError(f"{path}:{e.lineno}: malformed report JSON: {e.msg}") from e

    def comparable(self):
        """Everything except timing and the config echo."""
        d = self.to_dict()
        for name in TIMING_FIELDS + ("config",):
            d.pop(name)
        return d


# --- metrics ---


def _pose_list(seq) -> List[Pose]:
    if isinstance(seq, TrajectoryEstimate):
        return list(seq.poses)
    return [getattr(p, "pose", p) for p in seq]


def _anchored_pair(est, gt):
    est_poses, gt_poses = _pose_list(est), _pose_list(gt)
    if len(est_poses) != len(gt_poses):
        raise InvalidArgumentError(f"Trajectory lengths differ: {len(est_poses)} vs {len(gt_poses)}")
    if not est_poses:
        raise InvalidArgumentError("Empty trajectory")
    return anchor_poses(est_poses), anchor_poses(gt_poses)


def ate_rmse(est, gt) -> float:
    """Translation RMSE after aligning the first pose only."""
    e, g = _anchored_pair(est, gt)
    diffs = np.array([a.translation - b.translation for a, b in zip(e, g)])
    return float(math.sqrt(np.mean(np.sum(diffs**2, axis=1))))


def rotation_rmse(est, gt) -> float:
    """RMS geodesic angle (rad) between anchored orientations."""
    e, g = _anchored_pair(est, gt)
    angles = np.array([rotation_angle(a.R.T @ b.R) for a, b in zip(e, g)])
    return float(math.sqrt(np.mean(angles**2)))


def relative_pose_errors(est, gt) -> Tuple[float, float]:
    """Mean consecutive-frame translation error (m) and rotation error (rad)."""
    e, g = _anchored_pair(est, gt)
    if len(e) < 2:
        return 0.0, 0.0
    t_err, r_err = [], []
    for i in range(len(e) - 1):
        re, rg = relative_pose(e[i], e[i + 1]), relative_pose(g[i], g[i + 1])
        t_err.append(float(np.linalg.norm(re.translation - rg.translation)))
        r_err.append(rotation_angle(re.R.T @ rg.R))
    return float(np.mean(t_err)), float(np.mean(r_err))


def inlier_outlier_summary(stats: Sequence) -> Dict[str, float]:
    """Population mean/std of per-pair inlier and outlier counts.

    Accepts InlierStats or (inliers, outliers) pairs.
    """
    if not stats:
        raise InsufficientDataError("Need at least one frame pair")
    counts = np.array(
        [(s.inlier_count, s.outlier_count) if isinstance(s, InlierStats) else tuple(s) for s in stats], dtype=np.float64
    )
    return {
        "mean_inliers": float(np.mean(counts[:, 0])),
        "std_inliers": float(np.std(counts[:, 0])),
        "mean_outliers": float(np.mean(counts[:, 1])),
        "std_outliers": float(np.std(counts[:, 1])),
    }


# --- per-frame features ---


def _pair_seed(seed, pair_index):
    return int(np.random.SeedSequence([int(seed), int(pair_index)]).generate_state(1)[0])


def _check_masks(dataset, masks):
    if masks is None:
        return
    if len(masks) != len(dataset.images):
        raise InvalidArgumentError(f"{len(masks)} masks supplied for {len(dataset.images)} frames")
    K = dataset.intrinsics
    for i, mask in enumerate(masks):
        if not mask.matches_image(K.width, K.height):
            raise InvalidArgumentError(f"Mask {i} grid {mask.grid.shape} does not fit {K.width}x{K.height} frames")


def _frame_features(detector: FeatureDetector, index, image, mask: Optional[BinaryMask]):
    """(keypoints, descriptors, detected count) after masking and description."""
    keypoints = detector.detect(index, image)
    if mask is not None:
        source = mask_indices(keypoints, mask, (image.width, image.height))
    else:
        source = list(range(len(keypoints)))
    selected = [keypoints[i] for i in source]
    descriptors, kept = detector.describe(index, image, selected, source)
    return [selected[i] for i in kept], descriptors, len(keypoints)


def _pair_reprojection(kps_a, kps_b, matches, ransac: RansacConfig) -> Optional[float]:
    src = np.array([[kps_a[m.index_a].x, kps_a[m.index_a].y] for m in matches]).reshape(-1, 2)
    dst = np.array([[kps_b[m.index_b].x, kps_b[m.index_b].y] for m in matches]).reshape(-1, 2)
    try:
        H, stats = ransac_homography(src, dst, ransac)
    except PAIR_FAILURES:
        return None
    idx = list(stats.inlier_indices)
    result = reprojection_error(H, src[idx], dst[idx])
    return None if math.isnan(result.mean) else result.mean


def _essential_config(ransac: RansacConfig, pixel_threshold: Optional[float], K) -> RansacConfig:
    """Use the configured Sampson threshold, or derive it from pixels over the mean focal length when unset."""
    if ransac.inlier_threshold is not None:
        if pixel_threshold is not None:
            raise InvalidArgumentError("Set either RansacConfig.inlier_threshold or pixel_threshold, not both")
        return ransac
    pixel_threshold = config.default_pixel_threshold() if pixel_threshold is None else pixel_threshold
    if pixel_threshold <= 0:
        raise InvalidArgumentError(f"pixel_threshold must be positive, got {pixel_threshold}")
    return replace(ransac, inlier_threshold=pixel_threshold / K.mean_focal)


def run_vo(
    dataset,
    detector: FeatureDetector,
    masks: Optional[Sequence[BinaryMask]] = None,
    ransac: Optional[RansacConfig] = None,
    seed: int = 0,
    pixel_threshold: Optional[float] = None,
    match_ratio: Optional[float] = 0.8,
    progress: Optional[bool] = None,
) -> Tuple[TrajectoryEstimate, TrajectoryReport]:
    """Monocular VO over every consecutive frame pair.

    `dataset` needs images, intrinsics and gt_poses. Pairs with fewer than 8 matches or no
    geometric consensus fall back to the previous relative motion.
    """
    images = dataset.images
    if len(images) < 2:
        raise InsufficientDataError("VO needs at least two frames")
    _check_masks(dataset, masks)
    K = dataset.intrinsics
    gt = _pose_list(dataset.gt_poses)
    essential_cfg = _essential_config(ransac or RansacConfig(), pixel_threshold, K)
    show = config.progress_enabled() if progress is None else progress

    detected, kept = [], []
    wall = 0.0

    def features(i):
        nonlocal wall
        start = time.perf_counter()
        out = _frame_features(detector, i, images[i], None if masks is None else masks[i])
        wall += time.perf_counter() - start
        detected.append(out[2])
        kept.append(len(out[0]))
        return out[0], out[1]

    poses = [Pose.identity()]
    sources = ["anchor"]
    last_motion = Pose.identity()
    skipped, pair_stats, reprojections = [], [], []
    previous = features(0)
    for k in tqdm(range(len(images) - 1), desc="vo", unit="pair", disable=not show):
        current = features(k + 1)
        start = time.perf_counter()
        (kps_a, desc_a), (kps_b, desc_b) = previous, current
        matches = match_bruteforce(desc_a, desc_b, ratio=match_ratio)
        motion = None
        stats = None
        pair_cfg = replace(essential_cfg, rng_seed=_pair_seed(seed, k))
        if len(matches) >= MIN_PAIR_MATCHES:
            corrs = correspondences_from_matches(kps_a, kps_b, matches, K)
            try:
                E, stats = ransac_essential(corrs, pair_cfg)
                R, t, _ = select_pose_cheirality(decompose_essential(E), corrs.subset(list(stats.inlier_indices)))
                scale = float(np.linalg.norm(gt[k + 1].translation - gt[k].translation))
                # (R, t) maps frame-k coordinates into frame k+1; the pose of k+1 in k is its inverse
                motion = pose_inverse(Pose.from_rt(R, scale * t))
            except PAIR_FAILURES as e:
                logger.debug("pair %d: %s", k, e)
                motion, stats = None, None
        wall += time.perf_counter() - start

        if motion is None:
            logger.warning("Frame pair %d skipped (%d matches); using constant-velocity motion", k, len(matches))
            skipped.append(k)
            motion = last_motion
            sources.append("constant-velocity")
        else:
            pair_stats.append(stats)
            sources.append("groundtruth")
            last_motion = motion
            if len(matches) >= 4:
                reprojection = _pair_reprojection(kps_a, kps_b, matches, pair_cfg)
                if reprojection is not None:
                    reprojections.append(reprojection)
        poses.append(pose_compose(poses[-1], motion))
        previous = current

    pair_count = len(images) - 1
    if len(skipped) > MAX_SKIPPED_FRACTION * pair_count:
        raise RunDegenerateError(
            f"{len(skipped)} of {pair_count} frame pairs skipped (limit {MAX_SKIPPED_FRACTION:.0%})"
        )

    estimate = TrajectoryEstimate(poses, sources)
    summary = inlier_outlier_summary(pair_stats)
    rpe_t, rpe_r = relative_pose_errors(estimate, gt)
    report = TrajectoryReport(
        frame_count=len(images),
        pair_count=pair_count,
        skipped_pairs=skipped,
        ate_rmse=ate_rmse(estimate, gt),
        rotation_rmse=rotation_rmse(estimate, gt),
        rpe_translation_mean=rpe_t,
        rpe_rotation_mean=rpe_r,
        mean_reprojection_error=float(np.mean(reprojections)) if reprojections else None,
        mask_reduction=float(np.mean([mask_reduction(m) for m in masks])) if masks is not None else 0.0,
        keypoints_detected_mean=float(np.mean(detected)),
        keypoints_kept_mean=float(np.mean(kept)),
        wall_time=wall,
        per_pair_time=wall / pair_count,
        inlier_counts=[s.inlier_count for s in pair_stats],
        outlier_counts=[s.outlier_count for s in pair_stats],
        config={
            "detector": detector.to_dict() if hasattr(detector, "to_dict") else detector.name,
            "masked": masks is not None,
            "seed": seed,
            "pixel_threshold": essential_cfg.inlier_threshold * K.mean_focal,
            "match_ratio": match_ratio,
            "ransac": essential_cfg.to_dict(),
        },
        **summary,
    )
    logger.info(
        "VO over %d pairs: ATE %.4f m, inliers %.1f, outliers %.1f, %d skipped, %.2f s",
        pair_count,
        report.ate_rmse,
        report.mean_inliers,
        report.mean_outliers,
        len(skipped),
        wall,
    )
    return estimate, report


def reprojection_summary(
    dataset,
    detector: FeatureDetector,
    masks: Optional[Sequence[BinaryMask]] = None,
    ransac: Optional[RansacConfig] = None,
    seed: int = 0,
    match_ratio: Optional[float] = 0.8,
) -> Optional[float]:
    """Mean homography reprojection error (px) over RANSAC inliers, averaged across pairs."""
    _check_masks(dataset, masks)
    ransac = ransac or RansacConfig()
    images = dataset.images
    frames = [
        _frame_features(detector, i, images[i], None if masks is None else masks[i])[:2] for i in range(len(images))
    ]
    means = []
    for k in range(len(images) - 1):
        (kps_a, desc_a), (kps_b, desc_b) = frames[k], frames[k + 1]
        matches = match_bruteforce(desc_a, desc_b, ratio=match_ratio)
        if len(matches) < 4:
            logger.warning("Frame pair %d has %d matches; skipped for reprojection", k, len(matches))
            continue
        value = _pair_reprojection(kps_a, kps_b, matches, replace(ransac, rng_seed=_pair_seed(seed, k)))
        if value is not None:
            means.append(value)
    return float(np.mean(means)) if means else None


# --- training / masks glue ---


def dataset_windows(dataset, window_size: int) -> List[TrainingWindow]:
    """Training windows with IMU proxies; start states from states.csv or central differences."""
    states = dataset.states
    if states is None:
        states = start_states_from_poses(dataset.timestamps, dataset.gt_poses)
    return build_windows(dataset.images, dataset.timestamps, dataset.imu, window_size, states)


def write_mask_dir(directory, masks: Sequence[BinaryMask], scores: Optional[Sequence[np.ndarray]] = None):
    os.makedirs(directory, exist_ok=True)
    for i, mask in enumerate(masks):
        write_mask(os.path.join(directory, f"mask_{i:06d}.pgm"), mask)
    for i, grid_scores in enumerate(scores or []):
        write_attention_heatmap(os.path.join(directory, f"heat_{i:06d}.pgm"), grid_scores, grid_scores.shape)
    logger.info("Wrote %d masks to %s", len(masks), directory)


def read_mask_dir(directory) -> List[BinaryMask]:
    paths = sorted(glob.glob(os.path.join(directory, "mask_*.pgm")))
    if not paths:
        raise InvalidArgumentError(f"No mask_*.pgm files in {directory}")
    return [read_mask(p) for p in paths]


# --- reports ---


def _report_rows(report: TrajectoryReport):
    return [(name, report.metric(name)) for name in REPORT_METRICS]


def _plot_trajectory(path, estimate: TrajectoryEstimate, groundtruth):
    est = estimate.positions()
    gt = np.array([p.translation for p in anchor_poses(_pose_list(groundtruth))])
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.plot(gt[:, 0], gt[:, 2], color="black", label="ground truth", gid="groundtruth")
    ax.plot(est[:, 0], est[:, 2], color="tab:red", label="estimate", gid="estimate")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_loss(path, history: Sequence[float]):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(len(history)), history, gid="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("consistency loss")
    if len(history) and min(history) > 0:
        ax.set_yscale("log")
    fig.savefig(path, format="svg")
    plt.close(fig)


def emit_report(
    report: TrajectoryReport,
    path,
    fmt: Optional[str] = None,
    estimate: Optional[TrajectoryEstimate] = None,
    groundtruth=None,
    loss_history: Optional[Sequence[float]] = None,
) -> List[str]:
    """Write the report as json, csv or svg; returns every path written."""
    path = str(path)
    fmt = (fmt or os.path.splitext(path)[1].lstrip(".") or "json").lower()
    written = [path]
    try:
        if fmt == "json":
            with open(path, "w") as f:
                json.dump(report.to_dict(), f, indent=2, sort_keys=True)
                f.write("\n")
        elif fmt == "csv":
            pd.DataFrame(_report_rows(report), columns=["metric", "value"]).to_csv(path, index=False)
        elif fmt == "svg":
            if estimate is None or groundtruth is None:
                raise InvalidArgumentError("SVG reports need the estimate and ground truth")
            _plot_trajectory(path, estimate, groundtruth)
            if loss_history:
                loss_path = os.path.splitext(path)[0] + "_loss.svg"
                plot_loss(loss_path, loss_history)
                written.append(loss_path)
        else:
            raise InvalidArgumentError(f"Unknown report format {fmt!r}; expected json, csv or svg")
    except OSError as e:
        raise ReportIOError(f"Cannot write report to {path}: {e}") from e
    logger.info("Report written to %s", ", ".join(written))
    return written


def compare_reports(a: TrajectoryReport, b: TrajectoryReport) -> pd.DataFrame:
    rows = []
    for name in REPORT_METRICS:
        va, vb = a.metric(name), b.metric(name)
        # a metric neither run produced is unchanged, not unknown
        both_missing = getattr(a, name) is None and getattr(b, name) is None
        rows.append((name, va, vb, 0.0 if both_missing else vb - va))
    return pd.DataFrame(rows, columns=["metric", "a", "b", "delta"])


def evaluate(dataset_manifest, report_a: TrajectoryReport, report_b: TrajectoryReport, out_path) -> pd.DataFrame:
    """Side-by-side comparison of two runs on the same dataset."""
    frames = len(dataset_manifest.frames)
    for label, report in (("A", report_a), ("B", report_b)):
        if report.frame_count != frames:
            raise InvalidArgumentError(f"Report {label} covers {report.frame_count} frames, dataset has {frames}")
    table = compare_reports(report_a, report_b)
    try:
        if str(out_path).endswith(".json"):
            table.to_json(out_path, orient="records", indent=2)
        else:
            table.to_csv(out_path, index=False)
    except OSError as e:
        raise ReportIOError(f"Cannot write comparison to {out_path}: {e}") from e
    return table


# --- mask study ---


def mask_study(
    dataset,
    detector: FeatureDetector,
    masks: Sequence[BinaryMask],
    seeds: Sequence[int],
    ransac: Optional[RansacConfig] = None,
    pixel_threshold: Optional[float] = None,
) -> pd.DataFrame:
    """Masked vs unmasked VO per seed: outliers, ATE and per-pair time."""
    rows = []
    for seed in seeds:
        _, plain = run_vo(dataset, detector, None, ransac, seed, pixel_threshold, progress=False)
        _, masked = run_vo(dataset, detector, masks, ransac, seed, pixel_threshold, progress=False)
        rows.append(
            {
                "seed": seed,
                "mean_outliers_unmasked": plain.mean_outliers,
                "mean_outliers_masked": masked.mean_outliers,
                "ate_unmasked": plain.ate_rmse,
                "ate_masked": masked.ate_rmse,
                "time_unmasked": plain.per_pair_time,
                "time_masked": masked.per_pair_time,
                "mask_reduction": masked.mask_reduction,
            }
        )
    return pd.DataFrame(rows)


def mask_study_verdict(table: pd.DataFrame, ate_factor: float = 1.2) -> Dict[str, object]:
    fewer = int(np.sum(table["mean_outliers_masked"] < table["mean_outliers_unmasked"]))
    return {
        "seeds": len(table),
        "seeds_with_fewer_outliers": fewer,
        "ate_within_factor": bool(np.all(table["ate_masked"] <= ate_factor * table["ate_unmasked"] + 1e-12)),
        "time_not_increased": bool(table["time_masked"].sum() <= table["time_unmasked"].sum()),
    }
