"""
Rigid-body math shared by every other module.

Conventions: scalar-first unit quaternions (w, x, y, z) with canonical sign w >= 0, active
rotations, right-handed frames. A Pose maps points from its own frame into the parent frame
(world-from-camera for ground truth, anchor-from-camera for VO estimates).
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from errors import DegenerateRotationError, InvalidArgumentError

ORTHONORMAL_TOL = 1e-6
SMALL_ANGLE = 1e-8
NEAR_PI_DEGENERATE = 1e-6
NEAR_PI_EIGEN_BRANCH = 1e-2


def _as_vector3(v, name="vector"):
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise InvalidArgumentError(f"{name} must have 3 components, got shape {np.shape(v)}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} must be finite, got {arr}")
    return arr


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion, scalar first. Normalized and sign-canonicalized on construction."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        q = np.array([self.w, self.x, self.y, self.z], dtype=np.float64)
        if not np.all(np.isfinite(q)):
            raise InvalidArgumentError(f"Quaternion components must be finite, got {q}")
        norm = float(np.linalg.norm(q))
        if norm < 1e-12:
            raise InvalidArgumentError("Cannot normalize a zero quaternion")
        q = q / norm
        if q[0] < 0.0:
            q = -q
        elif q[0] == 0.0:
            # w == 0: first non-zero vector component decides the sign
            for c in q[1:]:
                if c != 0.0:
                    if c < 0.0:
                        q = -q
                    break
        object.__setattr__(self, "w", float(q[0]))
        object.__setattr__(self, "x", float(q[1]))
        object.__setattr__(self, "y", float(q[2]))
        object.__setattr__(self, "z", float(q[3]))

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q):
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if q.shape != (4,):
            raise InvalidArgumentError(f"Quaternion array must have 4 components, got shape {q.shape}")
        return cls(*q)

    def as_array(self):
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def conjugate(self):
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other):
        """Hamilton product self * other."""
        if not isinstance(other, Quaternion):
            return NotImplemented
        return Quaternion.from_array(quat_multiply(self.as_array(), other.as_array()))

    def rotate(self, v):
        return quat_to_rotmat(self) @ _as_vector3(v)

    def angle_to(self, other):
        """Geodesic angle in radians between two orientations."""
        d = abs(float(np.dot(self.as_array(), other.as_array())))
        return 2.0 * math.acos(min(1.0, d))


def quat_multiply(a, b):
    """Hamilton product on raw scalar-first arrays (no normalization)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.float64,
    )


def quat_exp(rotvec):
    """Quaternion of the rotation vector (axis * angle)."""
    phi = _as_vector3(rotvec, "rotation vector")
    theta = float(np.linalg.norm(phi))
    if theta < SMALL_ANGLE:
        return Quaternion(1.0 - theta * theta / 8.0, *(0.5 * phi))
    half = 0.5 * theta
    axis = phi / theta
    return Quaternion(math.cos(half), *(math.sin(half) * axis))


def quat_from_axis_angle(axis, angle):
    axis = _as_vector3(axis, "axis")
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise InvalidArgumentError("Rotation axis must be non-zero")
    return quat_exp(axis / n * float(angle))


def quat_to_rotmat(q):
    """Rotation matrix applying q as an active rotation."""
    if not isinstance(q, Quaternion):
        q = Quaternion.from_array(q)
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
            [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
            [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def check_rotation(R, tol=ORTHONORMAL_TOL):
    """Return R as a float array, raising InvalidArgumentError unless it is a proper rotation."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise InvalidArgumentError(f"Rotation matrix must be 3x3, got shape {R.shape}")
    if not np.all(np.isfinite(R)):
        raise InvalidArgumentError("Rotation matrix must be finite")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidArgumentError("Matrix is not a proper rotation within tolerance")
    return R


def is_rotation_matrix(R, tol=1e-9):
    try:
        check_rotation(R, tol)
    except InvalidArgumentError:
        return False
    return True


def project_to_rotation(M):
    """Closest rotation matrix in the Frobenius sense (SVD projection)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotmat_to_quat(R):
    """Shepperd's method; output has canonical sign."""
    R = check_rotation(R)
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    branch = int(np.argmax([trace, R[0, 0], R[1, 1], R[2, 2]]))
    if branch == 0:
        s = 2.0 * math.sqrt(1.0 + trace)
        q = (0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s)
    elif branch == 1:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = ((R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s)
    elif branch == 2:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = ((R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s)
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = ((R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s)
    return Quaternion(*q)


def skew(v):
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    x, y, z = _as_vector3(v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]], dtype=np.float64)


def vee(W):
    W = np.asarray(W, dtype=np.float64)
    return 0.5 * np.array([W[2, 1] - W[1, 2], W[0, 2] - W[2, 0], W[1, 0] - W[0, 1]])


def omega_matrix(w):
    """Quaternion product matrix for a body angular rate.

    q_dot = 0.5 * omega_matrix(w) @ q equals 0.5 * q (x) (0, w) for scalar-first q.
    """
    wx, wy, wz = _as_vector3(w, "angular rate")
    return np.array(
        [
            [0.0, -wx, -wy, -wz],
            [wx, 0.0, wz, -wy],
            [wy, -wz, 0.0, wx],
            [wz, wy, -wx, 0.0],
        ],
        dtype=np.float64,
    )


def so3_exp(v):
    """Rodrigues formula; second-order Taylor series below 1e-8 rad."""
    v = _as_vector3(v, "rotation vector")
    theta = float(np.linalg.norm(v))
    W = skew(v)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R):
    """Rotation vector of R. Raises DegenerateRotationError within 1e-6 rad of pi."""
    R = check_rotation(R)
    s = vee(R)
    sin_theta = float(np.linalg.norm(s))
    cos_theta = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(sin_theta, cos_theta)
    if math.pi - theta < NEAR_PI_DEGENERATE:
        raise DegenerateRotationError(f"Rotation angle {theta!r} is within {NEAR_PI_DEGENERATE} of pi")
    if theta < SMALL_ANGLE:
        return s * (1.0 + theta * theta / 6.0)
    if math.pi - theta < NEAR_PI_EIGEN_BRANCH:
        # axis is the eigenvector of the symmetric part with eigenvalue 1
        values, vectors = np.linalg.eigh(0.5 * (R + R.T))
        axis = vectors[:, int(np.argmax(values))]
        if np.dot(axis, s) < 0.0:
            axis = -axis
        return theta * axis / np.linalg.norm(axis)
    return theta * s / sin_theta


def rotation_angle(R):
    R = np.asarray(R, dtype=np.float64)
    return math.atan2(float(np.linalg.norm(vee(R))), 0.5 * (np.trace(R) - 1.0))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x_parent = R(rotation) @ x_child + translation."""

    rotation: Quaternion = field(default_factory=Quaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not isinstance(self.rotation, Quaternion):
            object.__setattr__(self, "rotation", Quaternion.from_array(self.rotation))
        t = _as_vector3(self.translation, "translation").copy()
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rt(cls, R, t):
        return cls(rotmat_to_quat(R), t)

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        if T.shape not in ((4, 4), (3, 4)):
            raise InvalidArgumentError(f"Pose matrix must be 3x4 or 4x4, got {T.shape}")
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @property
    def R(self):
        return quat_to_rotmat(self.rotation)

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other):
        return pose_compose(self, other)

    def inverse(self):
        return pose_inverse(self)

    def transform(self, points):
        """Map (N, 3) or (3,) points from the child frame into the parent frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.R.T + self.translation

    def is_close(self, other, tol=1e-9):
        return bool(
            np.max(np.abs(self.translation - other.translation)) <= tol
            and np.max(np.abs(self.R - other.R)) <= tol
        )

    def to_dict(self) -> Dict[str, list]:
        return {"rotation": self.rotation.as_array().tolist(), "translation": self.translation.tolist()}

    def __repr__(self):
        q = self.rotation
        t = self.translation
        return f"Pose(q=({q.w:.6f}, {q.x:.6f}, {q.y:.6f}, {q.z:.6f}), t=({t[0]:.6f}, {t[1]:.6f}, {t[2]:.6f}))"


def pose_compose(a: Pose, b: Pose) -> Pose:
    """a o b: apply b first, then a."""
    return Pose(a.rotation * b.rotation, a.R @ b.translation + a.translation)


def pose_inverse(a: Pose) -> Pose:
    inv = a.rotation.conjugate()
    return Pose(inv, -(quat_to_rotmat(inv) @ a.translation))


def relative_pose(a: Pose, b: Pose) -> Pose:
    """inverse(a) o b: b expressed in the frame of a."""
    return pose_compose(pose_inverse(a), b)


def anchor_poses(poses: Sequence[Pose]) -> list:
    """Re-express a pose sequence relative to its first element."""
    if not poses:
        return []
    first_inv = pose_inverse(poses[0])
    return [pose_compose(first_inv, p) for p in poses]


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        values = (self.fx, self.fy, self.cx, self.cy)
        if not all(math.isfinite(float(v)) for v in values):
            raise InvalidArgumentError("Intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise InvalidArgumentError(
                f"Principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @classmethod
    def default_for(cls, width, height, focal_scale=0.8):
        f = focal_scale * width
        return cls(f, f, width / 2.0, height / 2.0, int(width), int(height))

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"])
            )
        except KeyError as e:
            raise InvalidArgumentError(f"Intrinsics missing field {e}") from e

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def mean_focal(self):
        return 0.5 * (self.fx + self.fy)

    def project(self, points_cam):
        """Pinhole projection of (N, 3) camera-frame points to (N, 2) pixels."""
        P = np.atleast_2d(np.asarray(points_cam, dtype=np.float64))
        u = self.fx * P[:, 0] / P[:, 2] + self.cx
        v = self.fy * P[:, 1] / P[:, 2] + self.cy
        return np.stack([u, v], axis=1)


def random_rotation(rng, max_angle=math.pi):
    """Uniformly random axis with angle uniform in [0, max_angle)."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0.0, max_angle))


def random_quaternion(rng):
    return Quaternion.from_array(rng.normal(size=4))
