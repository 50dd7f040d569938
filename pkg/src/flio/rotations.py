"""Rotation and rigid-body math: quaternions, SO(3) maps, pose interpolation.

Conventions, fixed project-wide:
  - Quaternions are Hamilton, stored as (w, x, y, z), unit norm.
  - ``q`` denotes the rotation of a child frame with respect to a parent
    frame; ``quat_to_rotmat(q) @ v`` maps child-frame vectors to the parent.
  - Attitude perturbations are right-sided in the child (body) frame:
    ``R_true = R @ exp_so3(dphi)``.
  - Euler angles are intrinsic Z-Y-X (yaw, pitch, roll), radians, for a
    front-right-down body in a gravity-aligned, z-down world frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that skew(v) @ u == cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(phi: np.ndarray) -> np.ndarray:
    """Rodrigues exponential map from a rotation vector to a rotation matrix."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    s = np.sin(angle) / angle
    c = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + s * K + c * (K @ K)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix, magnitude in [0, pi]."""
    return quat_log(quat_from_rotmat(R))


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        - (1.0 - np.cos(angle)) / a2 * K
        + (angle - np.sin(angle)) / (a2 * angle) * (K @ K)
    )


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse of the right Jacobian of SO(3)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    half = 0.5 * angle
    cot = 1.0 / np.tan(half)
    return np.eye(3) + 0.5 * K + (1.0 / (angle * angle) - cot / (2.0 * angle)) * (K @ K)


# --------------------------------------------------------------------------- #
# Quaternions (w, x, y, z)
# --------------------------------------------------------------------------- #

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Resolve the double cover: flip sign so that w >= 0."""
    q = quat_normalize(q)
    return -q if q[0] < 0.0 else q


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b, renormalized."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    q = np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )
    return quat_normalize(q)


def quat_exp(phi: np.ndarray) -> np.ndarray:
    """Unit quaternion for a rotation vector."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    if angle < _SMALL_ANGLE:
        # 2nd-order series on the half-angle, exact enough at 1e-8 rad
        half = 0.5 * phi
        return quat_normalize(np.array([1.0, half[0], half[1], half[2]]))
    axis = phi / angle
    half = 0.5 * angle
    s = np.sin(half)
    return np.array([np.cos(half), s * axis[0], s * axis[1], s * axis[2]])


def quat_log(q: np.ndarray) -> np.ndarray:
    """Rotation vector of a unit quaternion, magnitude in [0, pi]."""
    q = quat_canonical(q)
    w = min(q[0], 1.0)
    vec = q[1:]
    sin_half = np.linalg.norm(vec)
    if sin_half < _SMALL_ANGLE:
        return 2.0 * vec / w
    angle = 2.0 * np.arctan2(sin_half, w)
    return vec * (angle / sin_half)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate v by q (child -> parent frame)."""
    return quat_to_rotmat(q) @ np.asarray(v, dtype=float)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_rotmat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the canonical (w >= 0) quaternion."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return quat_canonical(q)


def quat_slerp(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    """Spherical-linear interpolation from a (alpha=0) to b (alpha=1)."""
    rel = quat_mul(quat_conj(a), b)
    return quat_mul(a, quat_exp(alpha * quat_log(rel)))


def euler_to_quat(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Intrinsic Z-Y-X Euler angles to a quaternion."""
    qz = quat_exp(np.array([0.0, 0.0, yaw]))
    qy = quat_exp(np.array([0.0, pitch, 0.0]))
    qx = quat_exp(np.array([roll, 0.0, 0.0]))
    return quat_mul(quat_mul(qz, qy), qx)


def quat_to_euler(q: np.ndarray) -> np.ndarray:
    """Quaternion to (roll, pitch, yaw), pitch clamped at +-pi/2."""
    R = quat_to_rotmat(q)
    pitch = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])


# --------------------------------------------------------------------------- #
# Batched quaternion kernels (N, 4) / (N, 3); hot paths in undistortion
# --------------------------------------------------------------------------- #

def bquat_conj(q: np.ndarray) -> np.ndarray:
    out = q.copy()
    out[:, 1:] = -out[:, 1:]
    return out


def bquat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    out = np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=1,
    )
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def bquat_exp(phi: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(phi, axis=1)
    half = 0.5 * angle
    small = angle < _SMALL_ANGLE
    scale = np.where(small, 0.5, np.sin(half) / np.maximum(angle, 1e-300))
    out = np.empty((len(phi), 4))
    out[:, 0] = np.cos(half)
    out[:, 1:] = phi * scale[:, None]
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def bquat_log(q: np.ndarray) -> np.ndarray:
    q = np.where(q[:, :1] < 0.0, -q, q)
    sin_half = np.linalg.norm(q[:, 1:], axis=1)
    angle = 2.0 * np.arctan2(sin_half, q[:, 0])
    small = sin_half < _SMALL_ANGLE
    scale = np.where(small, 2.0 / np.maximum(q[:, 0], 1e-300),
                     angle / np.maximum(sin_half, 1e-300))
    return q[:, 1:] * scale[:, None]


def bquat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate each row of v by the corresponding row of q."""
    u = q[:, 1:]
    t = 2.0 * np.cross(u, v)
    return v + q[:, :1] * t + np.cross(u, t)


def bquat_slerp(a: np.ndarray, b: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    rel = bquat_mul(bquat_conj(a), b)
    return bquat_mul(a, bquat_exp(alpha[:, None] * bquat_log(rel)))


# --------------------------------------------------------------------------- #
# Poses
# --------------------------------------------------------------------------- #

@dataclass
class Pose:
    """Rigid transform of a child frame in a parent frame."""

    translation: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = quat_to_rotmat(self.rotation)
        T[:3, 3] = self.translation
        return T

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to one point (3,) or a stack (N, 3)."""
        R = quat_to_rotmat(self.rotation)
        return np.asarray(points, dtype=float) @ R.T + self.translation

    def inverse(self) -> "Pose":
        q_inv = quat_conj(self.rotation)
        return Pose(-quat_rotate(q_inv, self.translation), q_inv)

    def compose(self, other: "Pose") -> "Pose":
        """self * other: first apply other, then self."""
        return Pose(
            self.transform(other.translation),
            quat_mul(self.rotation, other.rotation),
        )


def pose_interpolate(p0: Pose, t0: float, p1: Pose, t1: float, t: float) -> Pose:
    """Interpolate between two timed poses; no extrapolation allowed."""
    if t1 <= t0:
        raise ValueError(f"degenerate interval [{t0}, {t1}]")
    if t < t0 or t > t1:
        raise ValueError(f"query {t} outside [{t0}, {t1}]")
    alpha = (t - t0) / (t1 - t0)
    trans = (1.0 - alpha) * p0.translation + alpha * p1.translation
    return Pose(trans, quat_slerp(p0.rotation, p1.rotation, alpha))
