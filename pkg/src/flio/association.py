"""Frame-to-frame data association against the sliding window's keyframe maps.

Every point of the newest keyframe cloud is projected into each older
keyframe's map, bound to a locally fitted plane, and kept only when the
search-radius, plane-fit, and projection-distance gates all pass. The newest
keyframe never associates against its own map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import KeyframeMap, PlaneCoeffs, fit_planes
from .rotations import Pose, quat_to_rotmat


@dataclass
class AssociationParams:
    k_neighbors: int = 5
    search_radius: float = 1.0      # m, farthest-of-k gate before plane fitting
    plane_fit_gate: float = 0.1     # m, max point-to-plane distance of the fit points
    projection_gate: float = 0.2    # m, max distance of the projected query point
    sigma: float = 0.1              # m, plane-distance measurement std


@dataclass
class PlaneAssociation:
    """A raw newest-keyframe point bound to a plane in an older keyframe map."""

    point: np.ndarray               # r-frame of the newest keyframe, raw
    point_index: int
    target: int                     # window slot of the map's keyframe
    plane: PlaneCoeffs              # in the target keyframe's r-frame
    sigma: float


def project_points(points: np.ndarray, pose_n: Pose, pose_i: Pose) -> np.ndarray:
    """Express r-frame-n points in r-frame i through the world frame."""
    R_n = quat_to_rotmat(pose_n.rotation)
    R_i = quat_to_rotmat(pose_i.rotation)
    world = points @ R_n.T + pose_n.translation
    return (world - pose_i.translation) @ R_i


def project_point(p: np.ndarray, pose_n: Pose, pose_i: Pose) -> np.ndarray:
    return project_points(np.asarray(p, dtype=float)[None], pose_n, pose_i)[0]


def associate_keyframe(
    points: np.ndarray,
    maps: list[KeyframeMap],
    pose_n: Pose,
    poses: list[Pose],
    params: AssociationParams | None = None,
) -> list[PlaneAssociation]:
    """Associate newest-keyframe points with every older map in the window.

    ``points`` is the undistorted, downsampled newest cloud in its own
    r-frame; ``pose_n`` its prior LiDAR pose; ``poses`` the current estimated
    LiDAR poses of the map keyframes. Results come out in (map index, point
    index) order; an empty list is a legal outcome.
    """
    params = params or AssociationParams()
    out: list[PlaneAssociation] = []
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return out
    for slot, (kf_map, pose_i) in enumerate(zip(maps, poses)):
        proj = project_points(points, pose_n, pose_i)
        k = min(params.k_neighbors, len(kf_map))
        if k < params.k_neighbors:
            continue  # too few map points for a plane fit
        dists, idx = kf_map.tree.query(proj, k=k)
        candidates = np.flatnonzero(dists[:, -1] <= params.search_radius)
        if candidates.size == 0:
            continue
        stacks = kf_map.points[idx[candidates]]
        normals, ds, valid = fit_planes(stacks, residual_gate=params.plane_fit_gate)
        dis = np.abs(np.einsum("mi,mi->m", normals, proj[candidates]) + ds)
        keep = valid & (dis < params.projection_gate)
        for j in np.flatnonzero(keep):
            pi = int(candidates[j])
            out.append(
                PlaneAssociation(
                    point=points[pi].copy(),
                    point_index=pi,
                    target=slot,
                    plane=PlaneCoeffs(normals[j].copy(), float(ds[j])),
                    sigma=params.sigma,
                )
            )
    return out
