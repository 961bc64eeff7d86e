"""
Two-view epipolar geometry: normalized eight-point essential matrix inside RANSAC, SVD
decomposition with cheirality selection, and homography estimation for reprojection error.

Convention: a correspondence (a, b) links frame-1 and frame-2 observations of X with
X2 = R @ X1 + t, so b^T E a = 0 for E = skew(t) @ R.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from errors import (
    AmbiguousPoseError,
    DegenerateInputError,
    InsufficientDataError,
    InvalidArgumentError,
    NoConsensusError,
)
from geometry import CameraIntrinsics, skew

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10
PLANE_AT_INFINITY = 1e-12
ESSENTIAL_SAMPLE = 8
DEFAULT_INLIER_THRESHOLD = 1e-3
HOMOGRAPHY_SAMPLE = 4

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Matched points in normalized camera coordinates, (N, 2) each."""

    a: np.ndarray
    b: np.ndarray
    source_match: np.ndarray = None

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64).reshape(-1, 2)
        b = np.asarray(self.b, dtype=np.float64).reshape(-1, 2)
        if a.shape != b.shape:
            raise InvalidArgumentError(f"Correspondence sides differ in size: {a.shape} vs {b.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise InvalidArgumentError("Correspondences must be finite")
        src = np.arange(len(a)) if self.source_match is None else np.asarray(self.source_match, dtype=np.int64)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "source_match", src)

    def __len__(self):
        return len(self.a)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Correspondences(self.a[indices], self.b[indices], self.source_match[indices])


@dataclass(frozen=True)
class InlierStats:
    inlier_count: int
    outlier_count: int
    inlier_indices: Tuple[int, ...]

    @classmethod
    def from_mask(cls, inliers):
        inliers = np.asarray(inliers, dtype=bool)
        idx = tuple(int(i) for i in np.flatnonzero(inliers))
        return cls(len(idx), int(inliers.size - len(idx)), idx)


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 2000
    # normalized Sampson units; None leaves the choice to the caller (the VO runner derives it from pixels)
    inlier_threshold: Optional[float] = None
    homography_threshold: float = 3.0
    confidence: float = 0.999
    rng_seed: int = 0
    solver: str = "eight_point"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidArgumentError(f"max_iterations must be positive, got {self.max_iterations}")
        if self.inlier_threshold is not None and not self.inlier_threshold > 0:
            raise InvalidArgumentError(f"inlier_threshold must be positive, got {self.inlier_threshold}")
        if not self.homography_threshold > 0:
            raise InvalidArgumentError(f"homography_threshold must be positive, got {self.homography_threshold}")
        if not 0.0 < self.confidence < 1.0:
            raise InvalidArgumentError(f"confidence must be in (0, 1), got {self.confidence}")
        if self.solver not in ESSENTIAL_SOLVERS:
            raise InvalidArgumentError(f"Unknown essential solver {self.solver!r}")

    @classmethod
    def from_dict(cls, d: Dict):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"Unknown RANSAC config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def essential_threshold(self) -> float:
        return DEFAULT_INLIER_THRESHOLD if self.inlier_threshold is None else self.inlier_threshold

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ReprojectionResult:
    mean: float
    per_point: Tuple[float, ...]
    excluded: Tuple[int, ...]


# --- Coordinates ---


def normalize_points(points, K: CameraIntrinsics) -> np.ndarray:
    """Pixel (N, 2) -> normalized camera coordinates."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.stack([(P[:, 0] - K.cx) / K.fx, (P[:, 1] - K.cy) / K.fy], axis=1)


def denormalize_points(points, K: CameraIntrinsics) -> np.ndarray:
    P = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.stack([P[:, 0] * K.fx + K.cx, P[:, 1] * K.fy + K.cy], axis=1)


def correspondences_from_matches(kps_a, kps_b, matches, K: CameraIntrinsics) -> Correspondences:
    pa = np.array([[kps_a[m.index_a].x, kps_a[m.index_a].y] for m in matches]).reshape(-1, 2)
    pb = np.array([[kps_b[m.index_b].x, kps_b[m.index_b].y] for m in matches]).reshape(-1, 2)
    return Correspondences(normalize_points(pa, K), normalize_points(pb, K), np.arange(len(matches)))


def _homogeneous(P):
    return np.hstack([P, np.ones((len(P), 1))])


def hartley_normalization(P) -> Tuple[np.ndarray, np.ndarray]:
    """Similarity T moving the centroid to 0 and the RMS distance to sqrt(2); returns (T @ P, T)."""
    P = np.asarray(P, dtype=np.float64)
    centroid = P.mean(axis=0)
    rms = math.sqrt(np.mean(np.sum((P - centroid) ** 2, axis=1)))
    if rms < 1e-12:
        raise DegenerateInputError("All points coincide")
    s = math.sqrt(2.0) / rms
    T = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    return (_homogeneous(P) @ T.T)[:, :2], T


def _null_vector(A, minimum_rank):
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    if len(s) < minimum_rank or s[0] <= 0 or s[minimum_rank - 1] / s[0] < RANK_TOL:
        raise DegenerateInputError(f"Constraint matrix has rank below {minimum_rank}")
    return Vt[-1]


# --- Essential matrix ---


def project_to_essential(M) -> np.ndarray:
    """Closest essential matrix with singular values (1, 1, 0), i.e. Frobenius norm sqrt(2)."""
    U, S, Vt = np.linalg.svd(M)
    sigma = 0.5 * (S[0] + S[1])
    if sigma <= 0:
        raise DegenerateInputError("Essential estimate vanished")
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def eight_point(corrs: Correspondences) -> np.ndarray:
    if len(corrs) < ESSENTIAL_SAMPLE:
        raise InsufficientDataError(f"Eight-point needs at least 8 correspondences, got {len(corrs)}")
    na, Ta = hartley_normalization(corrs.a)
    nb, Tb = hartley_normalization(corrs.b)
    xa, ya = na[:, 0], na[:, 1]
    xb, yb = nb[:, 0], nb[:, 1]
    ones = np.ones(len(na))
    A = np.stack([xb * xa, xb * ya, xb, yb * xa, yb * ya, yb, xa, ya, ones], axis=1)
    En = _null_vector(A, 8).reshape(3, 3)
    return project_to_essential(Tb.T @ En @ Ta)


ESSENTIAL_SOLVERS: Dict[str, Callable[[Correspondences], np.ndarray]] = {"eight_point": eight_point}


def epipolar_residuals(E, corrs: Correspondences) -> np.ndarray:
    """Algebraic |b^T E a| per correspondence."""
    return np.abs(np.einsum("ij,jk,ik->i", _homogeneous(corrs.b), E, _homogeneous(corrs.a)))


def sampson_distance(E, corrs: Correspondences) -> np.ndarray:
    """First-order geometric distance to the epipolar constraint (not squared)."""
    xa = _homogeneous(corrs.a)
    xb = _homogeneous(corrs.b)
    Ea = xa @ E.T
    Etb = xb @ E
    numerator = np.abs(np.sum(xb * Ea, axis=1))
    denominator = np.sqrt(Ea[:, 0] ** 2 + Ea[:, 1] ** 2 + Etb[:, 0] ** 2 + Etb[:, 1] ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = numerator / denominator
    return np.where(denominator > 0, d, np.where(numerator > 0, np.inf, 0.0))


def _adaptive_iterations(inlier_ratio, sample_size, confidence, cap):
    if inlier_ratio >= 1.0:
        return 0
    if inlier_ratio <= 0.0:
        return cap
    denom = math.log(1.0 - inlier_ratio**sample_size)
    if denom >= 0.0:
        return cap
    return min(cap, int(math.ceil(math.log(1.0 - confidence) / denom)))


def ransac_essential(corrs: Correspondences, config: RansacConfig = RansacConfig()) -> Tuple[np.ndarray, InlierStats]:
    """Robust essential matrix; the winning hypothesis is the first with the largest consensus."""
    n = len(corrs)
    if n < ESSENTIAL_SAMPLE:
        raise InsufficientDataError(f"RANSAC needs at least 8 correspondences, got {n}")
    solver = ESSENTIAL_SOLVERS[config.solver]
    rng = np.random.default_rng(config.rng_seed)
    best_E, best_inliers, best_count = None, None, -1
    needed = config.max_iterations
    iteration = 0
    while iteration < min(needed, config.max_iterations):
        sample = rng.choice(n, ESSENTIAL_SAMPLE, replace=False)
        iteration += 1
        try:
            E = solver(corrs.subset(sample))
        except DegenerateInputError:
            continue
        inliers = sampson_distance(E, corrs) <= config.essential_threshold
        count = int(np.count_nonzero(inliers))
        if count > best_count:
            best_E, best_inliers, best_count = E, inliers, count
            needed = _adaptive_iterations(count / n, ESSENTIAL_SAMPLE, config.confidence, config.max_iterations)

    if best_count < ESSENTIAL_SAMPLE:
        raise NoConsensusError(f"No essential hypothesis reached 8 inliers after {iteration} iterations")

    try:
        refit = solver(corrs.subset(np.flatnonzero(best_inliers)))
        refit_inliers = sampson_distance(refit, corrs) <= config.essential_threshold
        if np.count_nonzero(refit_inliers) >= best_count:
            best_E, best_inliers = refit, refit_inliers
    except DegenerateInputError:
        logger.debug("Consensus refit degenerate; keeping minimal-sample hypothesis")

    stats = InlierStats.from_mask(best_inliers)
    logger.debug("Essential RANSAC: %d/%d inliers after %d iterations", stats.inlier_count, n, iteration)
    return best_E, stats


def decompose_essential(E) -> List[Tuple[np.ndarray, np.ndarray]]:
    """The four (R, t) candidates; t is a unit vector."""
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=np.float64))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    t = U[:, 2] / np.linalg.norm(U[:, 2])
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def essential_from_pose(R, t) -> np.ndarray:
    return skew(t) @ np.asarray(R, dtype=np.float64)


def triangulate_midpoint(R, t, corrs: Correspondences) -> Tuple[np.ndarray, np.ndarray]:
    """Midpoint triangulation in frame 1; returns (points, valid) where valid excludes parallel rays."""
    d1 = _homogeneous(corrs.a)
    d2 = _homogeneous(corrs.b) @ R  # rows are R^T b
    c2 = -R.T @ t
    a = np.sum(d1 * d1, axis=1)
    b = np.sum(d1 * d2, axis=1)
    c = np.sum(d2 * d2, axis=1)
    e = d1 @ c2
    f = d2 @ c2
    denom = a * c - b * b
    valid = denom > 1e-12 * a * c
    safe = np.where(valid, denom, 1.0)
    s1 = (e * c - b * f) / safe
    s2 = (b * e - a * f) / safe
    X = 0.5 * (s1[:, None] * d1 + c2 + s2[:, None] * d2)
    return X, valid


def positive_depth_count(R, t, corrs: Correspondences) -> int:
    X, valid = triangulate_midpoint(R, t, corrs)
    depth1 = X[:, 2]
    depth2 = (X @ R.T + t)[:, 2]
    return int(np.count_nonzero(valid & (depth1 > 0) & (depth2 > 0)))


def select_pose_cheirality(candidates, corrs: Correspondences) -> Tuple[np.ndarray, np.ndarray, int]:
    """Candidate with the most points in front of both cameras."""
    if len(corrs) < 1:
        raise InsufficientDataError("Cheirality selection needs at least one correspondence")
    counts = [positive_depth_count(R, t, corrs) for R, t in candidates]
    best = max(counts)
    tied = [i for i, c in enumerate(counts) if c == best]
    if len(tied) > 1:
        raise AmbiguousPoseError(tied, best)
    R, t = candidates[tied[0]]
    return R, t, best


# --- Homography ---


def homography_dlt(src, dst) -> np.ndarray:
    """Normalized DLT from >= 4 pixel correspondences, scaled so h33 = 1 when possible."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) < HOMOGRAPHY_SAMPLE:
        raise InsufficientDataError(f"Homography needs at least 4 matches, got {len(src)}")
    ns, Ts = hartley_normalization(src)
    nd, Td = hartley_normalization(dst)
    rows = []
    for (x, y), (u, v) in zip(ns, nd):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    Hn = _null_vector(np.array(rows), 8).reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) > PLANE_AT_INFINITY:
        H = H / H[2, 2]
    return H


def apply_homography(H, points) -> Tuple[np.ndarray, np.ndarray]:
    """Map (N, 2) points; returns (mapped, finite) where finite is False at the plane at infinity."""
    P = _homogeneous(np.asarray(points, dtype=np.float64).reshape(-1, 2)) @ np.asarray(H).T
    finite = np.abs(P[:, 2]) > PLANE_AT_INFINITY
    w = np.where(finite, P[:, 2], 1.0)
    return P[:, :2] / w[:, None], finite


def symmetric_transfer_error(H, src, dst) -> np.ndarray:
    forward, ok_f = apply_homography(H, src)
    try:
        backward, ok_b = apply_homography(np.linalg.inv(H), dst)
    except np.linalg.LinAlgError:
        return np.full(len(forward), np.inf)
    err = 0.5 * (np.linalg.norm(forward - dst, axis=1) + np.linalg.norm(backward - src, axis=1))
    return np.where(ok_f & ok_b, err, np.inf)


def ransac_homography(src, dst, config: RansacConfig = RansacConfig()) -> Tuple[np.ndarray, InlierStats]:
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < HOMOGRAPHY_SAMPLE or len(dst) != n:
        raise InsufficientDataError(f"Homography RANSAC needs at least 4 paired matches, got {n}")
    rng = np.random.default_rng(config.rng_seed)
    best_H, best_inliers, best_count = None, None, -1
    needed = config.max_iterations
    iteration = 0
    while iteration < min(needed, config.max_iterations):
        sample = rng.choice(n, HOMOGRAPHY_SAMPLE, replace=False)
        iteration += 1
        try:
            H = homography_dlt(src[sample], dst[sample])
        except (DegenerateInputError, np.linalg.LinAlgError):
            continue
        inliers = symmetric_transfer_error(H, src, dst) <= config.homography_threshold
        count = int(np.count_nonzero(inliers))
        if count > best_count:
            best_H, best_inliers, best_count = H, inliers, count
            needed = _adaptive_iterations(count / n, HOMOGRAPHY_SAMPLE, config.confidence, config.max_iterations)

    if best_count < HOMOGRAPHY_SAMPLE:
        raise NoConsensusError(f"No homography hypothesis reached 4 inliers after {iteration} iterations")

    try:
        refit = homography_dlt(src[best_inliers], dst[best_inliers])
        refit_inliers = symmetric_transfer_error(refit, src, dst) <= config.homography_threshold
        if np.count_nonzero(refit_inliers) >= best_count:
            best_H, best_inliers = refit, refit_inliers
    except (DegenerateInputError, np.linalg.LinAlgError):
        logger.debug("Homography consensus refit degenerate")

    return best_H, InlierStats.from_mask(best_inliers)


def reprojection_error(H, src, dst) -> ReprojectionResult:
    """Per-point ||H(src) - dst||; points sent to the plane at infinity are excluded."""
    mapped, finite = apply_homography(H, src)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    errors = np.linalg.norm(mapped - dst, axis=1)
    excluded = tuple(int(i) for i in np.flatnonzero(~finite))
    if excluded:
        logger.warning("%d point(s) mapped to the plane at infinity were excluded", len(excluded))
    kept = errors[finite]
    mean = float(np.mean(kept)) if kept.size else float("nan")
    return ReprojectionResult(mean, tuple(float(e) for e in kept), excluded)
