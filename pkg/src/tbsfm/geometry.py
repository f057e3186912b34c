"""Rotations, rigid motions, similarity transforms and pinhole projection.

Conventions
-----------
Camera poses map world points to the camera frame as ``R (X - c)``; pixels are
``K pi(R (X - c))`` with ``pi([x, y, z]) = [x / z, y / z]``.  Rotations are kept
as 3x3 matrices everywhere; axis-angle vectors only appear as optimizer
increments.  Quaternions are ``(qw, qx, qy, qz)`` with ``qw >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DEPTH_EPS = 1e-12


class CheiralityError(ValueError):
    """Raised when a point lies on or behind the image plane."""


def skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def rotvec_to_matrix(w):
    """Rodrigues formula, with a second-order expansion near zero."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * W @ W


def matrix_to_rotvec(R):
    """Inverse of :func:`rotvec_to_matrix`, angle in ``[0, pi]``."""
    R = np.asarray(R, dtype=float)
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(v)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if theta < 1e-8:
        return v
    if np.pi - theta > 1e-6:
        return v * (theta / s)
    # near pi the antisymmetric part vanishes; read the axis from R + I
    M = 0.5 * (R + np.eye(3))
    k = int(np.argmax(np.diag(M)))
    axis = M[:, k] / np.sqrt(max(M[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if np.dot(axis, v) < 0:
        axis = -axis
    return axis * theta


def quat_to_matrix(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Shepperd's method; returns a unit quaternion with ``qw >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def project_to_rotation(M):
    """Closest rotation to ``M`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def is_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=float)
    return (R.shape == (3, 3)
            and np.abs(R.T @ R - np.eye(3)).max() <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol)


def random_rotation(rng):
    q = rng.normal(size=4)
    return quat_to_matrix(q)


def rotation_geodesic_distance(r1, r2):
    """Angle of ``r1.T @ r2`` in ``[0, pi]``."""
    M = np.asarray(r1).T @ np.asarray(r2)
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    c = 0.5 * (np.trace(M) - 1.0)
    return float(np.arctan2(s, c))


def chordal_mean(rotations):
    return project_to_rotation(np.sum(rotations, axis=0))


@dataclass(frozen=True, eq=False)
class RigidMotion:
    """Motion ``X -> A X + a``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, X):
        return np.asarray(X) @ self.rotation.T + self.translation

    def __eq__(self, other):
        return (isinstance(other, RigidMotion)
                and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __repr__(self):
        return f"RigidMotion(rotvec={matrix_to_rotvec(self.rotation)}, translation={self.translation})"


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """Change of coordinates ``X -> scale * B X + b``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))
        if not self.scale > 0:
            raise ValueError(f"similarity scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3), 1.0)

    @classmethod
    def from_motion(cls, m: RigidMotion):
        return cls(m.rotation, m.translation, 1.0)

    def apply(self, X):
        return self.scale * (np.asarray(X) @ self.rotation.T) + self.translation

    def __eq__(self, other):
        return (isinstance(other, SimilarityTransform)
                and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation)
                and self.scale == other.scale)

    def __repr__(self):
        return (f"SimilarityTransform(rotvec={matrix_to_rotvec(self.rotation)}, "
                f"translation={self.translation}, scale={self.scale})")


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def as_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def normalize(self, pixels):
        """Pixels -> normalized image coordinates."""
        pixels = np.asarray(pixels, dtype=float)
        return np.column_stack([(pixels[..., 0] - self.cx) / self.fx,
                                (pixels[..., 1] - self.cy) / self.fy])


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Registered view: intrinsics plus world->camera rotation and centre.

    ``quaternion`` caches the exact quaternion a pose was read from so that
    text round-trips are bit-identical; it does not take part in equality.
    """

    intrinsics: Intrinsics
    rotation: np.ndarray
    center: np.ndarray
    quat: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))

    @classmethod
    def from_quaternion(cls, intrinsics, q, center):
        q = np.asarray(q, dtype=float)
        return cls(intrinsics, quat_to_matrix(q), center, quat=q)

    @classmethod
    def canonical(cls, intrinsics, R, center):
        """Pose whose rotation is exactly reproducible from its stored quaternion."""
        q = matrix_to_quat(R)
        return cls(intrinsics, quat_to_matrix(q), center, quat=q)

    @property
    def quaternion(self):
        return self.quat if self.quat is not None else matrix_to_quat(self.rotation)

    @property
    def translation(self):
        return -self.rotation @ self.center

    def with_motion(self, R, c):
        return CameraPose(self.intrinsics, R, c)

    def projection_matrix(self):
        return self.intrinsics.matrix @ np.column_stack([self.rotation, self.translation])

    def __eq__(self, other):
        return (isinstance(other, CameraPose)
                and self.intrinsics == other.intrinsics
                and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.center, other.center))


def project(pose: CameraPose, point):
    """Pixel coordinates of ``point`` seen by ``pose``."""
    p = pose.rotation @ (np.asarray(point, dtype=float) - pose.center)
    if p[2] <= DEPTH_EPS:
        raise CheiralityError(f"point at depth {p[2]:.3g} is behind the camera")
    K = pose.intrinsics
    return np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy])


def project_many(pose: CameraPose, points):
    """Vectorized projection; returns ``(pixels, depth)`` without raising."""
    P = (np.asarray(points, dtype=float) - pose.center) @ pose.rotation.T
    z = P[:, 2]
    safe = np.where(z > DEPTH_EPS, z, np.nan)
    K = pose.intrinsics
    uv = np.column_stack([K.fx * P[:, 0] / safe + K.cx, K.fy * P[:, 1] / safe + K.cy])
    return uv, z


def reprojection_error(pose: CameraPose, motion: RigidMotion, point, obs):
    """Pixel distance between ``obs`` and the projection of the moved point."""
    moved = motion.rotation @ np.asarray(point, dtype=float) + motion.translation
    return float(np.linalg.norm(project(pose, moved) - np.asarray(obs, dtype=float)))


def backproject(pose: CameraPose, pixel, depth):
    """World point at ``depth`` along the ray through ``pixel``."""
    K = pose.intrinsics
    ray = np.array([(pixel[0] - K.cx) / K.fx, (pixel[1] - K.cy) / K.fy, 1.0])
    return pose.center + pose.rotation.T @ (depth * ray)


def apply_motion(m: RigidMotion, X):
    return m.apply(X)


def compose_motion(first: RigidMotion, second: RigidMotion) -> RigidMotion:
    """Motion from configuration s to t given the motions of s and of t."""
    A = second.rotation @ first.rotation.T
    return RigidMotion(A, second.translation - A @ first.translation)


def invert_motion(m: RigidMotion) -> RigidMotion:
    At = m.rotation.T
    return RigidMotion(At, -At @ m.translation)


def chain_motion(first: RigidMotion, second: RigidMotion) -> RigidMotion:
    """``second`` applied after ``first``."""
    return RigidMotion(second.rotation @ first.rotation,
                       second.rotation @ first.translation + second.translation)


def compose_similarity(s: SimilarityTransform, t: SimilarityTransform) -> SimilarityTransform:
    """Change of coordinates from system s to system t, both given from the world."""
    B = t.rotation @ s.rotation.T
    ratio = t.scale / s.scale
    return SimilarityTransform(B, t.translation - ratio * B @ s.translation, ratio)


def invert_similarity(s: SimilarityTransform) -> SimilarityTransform:
    Bt = s.rotation.T
    return SimilarityTransform(Bt, -(Bt @ s.translation) / s.scale, 1.0 / s.scale)


def chain_similarity(first: SimilarityTransform, second: SimilarityTransform) -> SimilarityTransform:
    """``second`` applied after ``first``."""
    return SimilarityTransform(second.rotation @ first.rotation,
                               second.scale * second.rotation @ first.translation + second.translation,
                               second.scale * first.scale)


def transport_pose(pose: CameraPose, s: SimilarityTransform) -> CameraPose:
    """Express a camera in the frame reached by applying ``s`` to the points."""
    R = pose.rotation @ s.rotation.T
    c = s.translation + s.scale * s.rotation @ pose.center
    return CameraPose(pose.intrinsics, R, c)


def conjugate_motion(m: RigidMotion, s: SimilarityTransform) -> RigidMotion:
    """The motion ``m`` expressed in the frame reached through ``s``."""
    A = s.rotation @ m.rotation @ s.rotation.T
    a = s.translation + s.scale * s.rotation @ m.translation - A @ s.translation
    return RigidMotion(A, a)


def projection_jacobian(P, intr: Intrinsics):
    """d(pixel)/d(camera-frame point) for an ``(n, 3)`` array; shape ``(n, 2, 3)``."""
    z = P[:, 2]
    J = np.zeros((len(P), 2, 3))
    J[:, 0, 0] = intr.fx / z
    J[:, 0, 2] = -intr.fx * P[:, 0] / z**2
    J[:, 1, 1] = intr.fy / z
    J[:, 1, 2] = -intr.fy * P[:, 1] / z**2
    return J


def skew_batch(V):
    S = np.zeros((len(V), 3, 3))
    S[:, 0, 1] = -V[:, 2]
    S[:, 0, 2] = V[:, 1]
    S[:, 1, 0] = V[:, 2]
    S[:, 1, 2] = -V[:, 0]
    S[:, 2, 0] = -V[:, 1]
    S[:, 2, 1] = V[:, 0]
    return S
