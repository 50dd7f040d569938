"""Trajectory evaluation: gauge-respecting alignment, ATE, ARE, end-to-end.

Alignment is deliberately 4-dof (yaw about gravity plus translation): the
global position and yaw of a dead-reckoning LiDAR-inertial system are
unobservable, so a full 6-dof fit would hide exactly the roll/pitch errors
the estimator is supposed to keep observable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import TrajectoryRecord
from .rotations import (
    Pose,
    pose_interpolate,
    quat_conj,
    quat_exp,
    quat_log,
    quat_mul,
    quat_to_euler,
)


@dataclass
class EvalMetrics:
    ate_m: float
    are_deg: float
    end_to_end_m: float
    n_poses: int


def _interpolate_truth(truth: list[TrajectoryRecord], t: float) -> TrajectoryRecord | None:
    ts = np.array([r.t for r in truth])
    if t < ts[0] - 1e-9 or t > ts[-1] + 1e-9:
        return None
    i = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2))
    a, b = truth[i], truth[i + 1]
    t_clamped = min(max(t, a.t), b.t)
    pose = pose_interpolate(Pose(a.p, a.q), a.t, Pose(b.p, b.q), b.t, t_clamped)
    return TrajectoryRecord(t, pose.translation, pose.rotation)


def _yaw_rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def evaluate(estimate: list[TrajectoryRecord],
             truth: list[TrajectoryRecord]) -> EvalMetrics:
    """ATE/ARE after optimal 4-dof alignment, plus the end-to-end error.

    Truth is interpolated at the estimate's timestamps over the overlapping
    span; fewer than two overlapping poses is an error. The end-to-end error
    aligns the first pose exactly (position and yaw) and reports the final
    position difference.
    """
    if len(estimate) < 2 or len(truth) < 2:
        raise ValueError("need at least two poses in each trajectory")
    pairs = []
    for rec in estimate:
        ref = _interpolate_truth(truth, rec.t)
        if ref is not None:
            pairs.append((rec, ref))
    if len(pairs) < 2:
        raise ValueError("fewer than two overlapping poses between the trajectories")

    p_e = np.array([a.p for a, _ in pairs])
    p_t = np.array([b.p for _, b in pairs])

    # optimal yaw about gravity from centered horizontal coordinates
    ce = p_e - p_e.mean(axis=0)
    ct = p_t - p_t.mean(axis=0)
    num = float(np.sum(ce[:, 0] * ct[:, 1] - ce[:, 1] * ct[:, 0]))
    den = float(np.sum(ce[:, 0] * ct[:, 0] + ce[:, 1] * ct[:, 1]))
    yaw = np.arctan2(num, den) if (num != 0.0 or den != 0.0) else 0.0
    R = _yaw_rotation(yaw)
    t_shift = p_t.mean(axis=0) - R @ p_e.mean(axis=0)

    resid = p_e @ R.T + t_shift - p_t
    ate = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))

    q_yaw = quat_exp(np.array([0.0, 0.0, yaw]))
    angles = []
    for a, b in pairs:
        q_al = quat_mul(q_yaw, a.q)
        angles.append(np.linalg.norm(quat_log(quat_mul(quat_conj(b.q), q_al))))
    are = float(np.rad2deg(np.sqrt(np.mean(np.square(angles)))))

    first_e, first_t = pairs[0]
    yaw0 = quat_to_euler(first_t.q)[2] - quat_to_euler(first_e.q)[2]
    R0 = _yaw_rotation(yaw0)
    t0 = first_t.p - R0 @ first_e.p
    last_e, last_t = pairs[-1]
    end_to_end = float(np.linalg.norm(R0 @ last_e.p + t0 - last_t.p))

    return EvalMetrics(ate, are, end_to_end, len(pairs))
