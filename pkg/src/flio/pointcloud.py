"""LiDAR frame containers, voxel filtering, NN index, plane fits, undistortion.

Frames are stored struct-of-arrays: per-point time offsets (seconds from the
frame stamp) and xyz in the sensor (r) frame at sample time. Undistortion
re-expresses every point in the r-frame at the frame's anchor epoch (frame
start plus the current time-delay estimate) using interpolated INS poses.
Keyframe maps accumulate all frames since the previous keyframe, projected
to the new keyframe's epoch with the INS prior poses, then voxel-filtered.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .imu import InsPoseBuffer
from .rotations import Pose, bquat_rotate, quat_to_rotmat

MIN_RANGE = 0.5     # m, near-range blind zone
MAX_RANGE = 200.0   # m

_VOXEL_BITS = 21
_VOXEL_OFFSET = 1 << 20


@dataclass
class LidarFrame:
    """One LiDAR frame: stamp (s, sensor clock) plus per-point offsets/xyz."""

    stamp: float
    t_offsets: np.ndarray          # (N,), seconds from stamp, sorted ascending
    xyz: np.ndarray                # (N, 3), r-frame at sample time, meters
    is_keyframe: bool = False

    def __len__(self) -> int:
        return len(self.t_offsets)


def new_frame(stamp: float, t_offsets: np.ndarray, xyz: np.ndarray,
              min_range: float = MIN_RANGE, max_range: float = MAX_RANGE) -> LidarFrame:
    """Build a frame with range gating and time ordering applied."""
    t_offsets = np.asarray(t_offsets, dtype=float)
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    if len(t_offsets) != len(xyz):
        raise ValueError("t_offsets and xyz disagree in length")
    if np.any(t_offsets < 0.0):
        raise ValueError("negative point time offset")
    if not np.all(np.isfinite(xyz)):
        raise ValueError("non-finite point coordinates")
    r = np.linalg.norm(xyz, axis=1)
    keep = (r >= min_range) & (r <= max_range)
    t_offsets, xyz = t_offsets[keep], xyz[keep]
    order = np.argsort(t_offsets, kind="stable")
    return LidarFrame(float(stamp), t_offsets[order], xyz[order])


# --------------------------------------------------------------------------- #
# Voxel grid filter
# --------------------------------------------------------------------------- #

def voxel_downsample(xyz: np.ndarray, leaf: float) -> np.ndarray:
    """One centroid per occupied voxel; output ordered by packed voxel key."""
    if leaf <= 0.0:
        raise ValueError("leaf size must be positive")
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    if len(xyz) == 0:
        return xyz.copy()
    cells = np.floor(xyz / leaf).astype(np.int64) + _VOXEL_OFFSET
    if cells.min() < 0 or cells.max() >= (1 << _VOXEL_BITS):
        raise ValueError("points exceed the voxel key range")
    key = (cells[:, 0] << (2 * _VOXEL_BITS)) | (cells[:, 1] << _VOXEL_BITS) | cells[:, 2]
    uniq, inverse = np.unique(key, return_inverse=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, xyz)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(float)
    return sums / counts[:, None]


# --------------------------------------------------------------------------- #
# Keyframe map + exact nearest neighbours
# --------------------------------------------------------------------------- #

@dataclass
class KeyframeMap:
    """Accumulated, downsampled cloud in one keyframe's r-frame, NN-indexed."""

    kf_id: int
    points: np.ndarray
    tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("keyframe map cannot be empty")
        self.tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)


def knn(kf_map: KeyframeMap, query: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k exact nearest neighbours, sorted by distance: (distances, points)."""
    k_eff = min(k, len(kf_map))
    d, idx = kf_map.tree.query(np.asarray(query, dtype=float), k=k_eff)
    d = np.atleast_1d(d)
    idx = np.atleast_1d(idx)
    return d, kf_map.points[idx]


# --------------------------------------------------------------------------- #
# Local plane fitting
# --------------------------------------------------------------------------- #

@dataclass
class PlaneCoeffs:
    """Plane n^T p + d = 0 with unit normal."""

    normal: np.ndarray
    d: float


def fit_planes(
    stacks: np.ndarray,
    residual_gate: float = 0.1,
    cond_gate: float = 1e-3,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched least-squares plane fits on (M, k, 3) point stacks.

    Solves the overdetermined system  P x = -1  per stack via the normal
    equations (the d=1 normalization), then rescales to a unit normal. A fit
    is valid only when the stack's singular-value ratio passes ``cond_gate``
    and every point sits within ``residual_gate`` of the plane.

    Returns (normals (M,3), ds (M,), valid (M,)).
    """
    stacks = np.asarray(stacks, dtype=float)
    m = len(stacks)
    normals = np.zeros((m, 3))
    ds = np.zeros(m)
    valid = np.zeros(m, dtype=bool)
    if m == 0:
        return normals, ds, valid

    AtA = np.einsum("mki,mkj->mij", stacks, stacks)
    At1 = stacks.sum(axis=1)
    evals = np.linalg.eigvalsh(AtA)  # ascending
    ok = evals[:, 0] > (cond_gate**2) * evals[:, 2]
    ok &= evals[:, 2] > 0.0
    if np.any(ok):
        x = np.linalg.solve(AtA[ok], -At1[ok][..., None])[..., 0]
        norm = np.linalg.norm(x, axis=1)
        nz = norm > 1e-12
        n_unit = np.zeros_like(x)
        n_unit[nz] = x[nz] / norm[nz, None]
        d_fit = np.where(nz, 1.0 / np.maximum(norm, 1e-300), np.inf)
        res = np.abs(np.einsum("mki,mi->mk", stacks[ok], n_unit) + d_fit[:, None])
        good = nz & (res.max(axis=1) < residual_gate)
        idx = np.flatnonzero(ok)
        normals[idx] = n_unit
        ds[idx] = np.where(np.isfinite(d_fit), d_fit, 0.0)
        valid[idx] = good
    return normals, ds, valid


def fit_plane(points: np.ndarray, residual_gate: float = 0.1,
              cond_gate: float = 1e-3) -> PlaneCoeffs | None:
    """Plane through (typically five) points, or None when degenerate or the
    point-to-plane gate fails."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) < 3:
        raise ValueError("plane fit needs at least three points")
    normals, ds, valid = fit_planes(points[None], residual_gate, cond_gate)
    if not valid[0]:
        return None
    return PlaneCoeffs(normals[0], float(ds[0]))


# --------------------------------------------------------------------------- #
# Motion-distortion compensation
# --------------------------------------------------------------------------- #

def undistort_frame(frame: LidarFrame, buffer: InsPoseBuffer, T_b_r: Pose,
                    t_d: float) -> LidarFrame:
    """Re-express every point in the r-frame at the frame's anchor epoch.

    Each point's pose chain world <- IMU <- LiDAR is evaluated at its sample
    time ``stamp + t_offset + t_d``; the anchor epoch is the frame start
    ``stamp + t_d``. Raises ValueError when the INS buffer has a gap.
    """
    anchor = frame.stamp + t_d
    if len(frame) == 0:
        return LidarFrame(frame.stamp, frame.t_offsets.copy(), frame.xyz.copy(),
                          frame.is_keyframe)
    times = frame.stamp + frame.t_offsets + t_d
    lo = min(anchor, float(times.min()))
    hi = max(anchor, float(times.max()))
    if not buffer.covers(lo, hi):
        raise ValueError(
            f"INS buffer [{buffer.t_start:.6f}, {buffer.t_end:.6f}] does not cover "
            f"frame span [{lo:.6f}, {hi:.6f}]"
        )
    R_br = quat_to_rotmat(T_b_r.rotation)
    p_b = frame.xyz @ R_br.T + T_b_r.translation
    ps, qs = buffer.poses_at_batch(times)
    p_w = bquat_rotate(qs, p_b) + ps

    T_w_r_anchor = buffer.pose_at(anchor).compose(T_b_r)
    R_a = quat_to_rotmat(T_w_r_anchor.rotation)
    p_out = (p_w - T_w_r_anchor.translation) @ R_a
    return LidarFrame(frame.stamp, frame.t_offsets.copy(), p_out, frame.is_keyframe)


def build_keyframe_map(
    kf_id: int,
    keyframe: LidarFrame,
    intermediates: list[LidarFrame],
    buffer: InsPoseBuffer,
    T_b_r: Pose,
    t_d: float,
    leaf: float,
) -> KeyframeMap:
    """Accumulate undistorted frames into the new keyframe's epoch.

    ``keyframe`` and ``intermediates`` must already be undistorted (anchored
    at their own epochs). Intermediate clouds are projected through the INS
    relative poses, unioned with the keyframe cloud, and voxel-filtered.
    """
    kf_epoch = keyframe.stamp + t_d
    T_w_kf = buffer.pose_at(kf_epoch).compose(T_b_r)
    T_kf_w = T_w_kf.inverse()
    clouds = [keyframe.xyz]
    for f in intermediates:
        if len(f) == 0:
            continue
        T_w_f = buffer.pose_at(f.stamp + t_d).compose(T_b_r)
        clouds.append(T_kf_w.compose(T_w_f).transform(f.xyz))
    union = np.vstack(clouds)
    return KeyframeMap(kf_id, voxel_downsample(union, leaf))
