"""Measurement factors of the sliding-window optimizer.

``LidarFactor`` implements the frame-to-frame point-to-plane residual: a raw
point of the newest keyframe is carried through LiDAR -> IMU -> world ->
IMU(i) -> LiDAR(i) with the shared extrinsics, and the signed distance to
its associated plane is whitened by the plane-distance std. All Jacobians
(poses, extrinsics, time delay) are analytic; rows are vectorized per
(newest, target) keyframe pair.

The time delay enters through a first-order epoch shift: each raw point
moves along its frozen INS-induced apparent velocity by (t_d - t_d_lin), so
the residual stays exactly linear in t_d and the state Jacobians remain the
exact derivatives of the implemented model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .association import PlaneAssociation
from .imu import NavState
from .preintegration import Preintegration, preintegration_residual
from .rotations import Pose, quat_identity, quat_to_rotmat
from .solver import HuberLoss, ParameterBlock, ResidualBlock


@dataclass
class ExtrinsicState:
    """LiDAR-to-IMU rigid transform: p^b = R(q_r_b) p^r + p_br."""

    p_br: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_r_b: np.ndarray = field(default_factory=quat_identity)

    MAX_LEVER_ARM = 2.0  # m, sanity gate

    def __post_init__(self):
        if np.linalg.norm(self.p_br) >= self.MAX_LEVER_ARM:
            raise ValueError(f"lever arm {self.p_br} exceeds {self.MAX_LEVER_ARM} m")

    def pose(self) -> Pose:
        return Pose(np.asarray(self.p_br, dtype=float), np.asarray(self.q_r_b, dtype=float))


@dataclass
class TimeDelay:
    """Clock offset between LiDAR and IMU data streams, seconds."""

    t_d: float = 0.0

    MAX_DELAY = 0.1  # s, config gate

    def __post_init__(self):
        if abs(self.t_d) >= self.MAX_DELAY:
            raise ValueError(f"time delay {self.t_d} s exceeds {self.MAX_DELAY} s")


def _row_cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise a_h^T [b_h]_x, using a^T [b]_x = (a x b)^T."""
    return np.cross(a, b)


class LidarFactor(ResidualBlock):
    """Point-to-plane rows between the newest keyframe n and one keyframe i.

    Parameter blocks: p_n, q_n, p_i, q_i, ext_p, ext_q, t_d.
    """

    def __init__(
        self,
        blocks: list[ParameterBlock],
        points: np.ndarray,
        normals: np.ndarray,
        ds: np.ndarray,
        sigma: float,
        rates: np.ndarray | None = None,
        t_d_lin: float = 0.0,
        loss: HuberLoss | None = None,
        target_slot: int = -1,
    ):
        if len(blocks) != 7:
            raise ValueError("LidarFactor takes (p_n, q_n, p_i, q_i, ext_p, ext_q, td)")
        self.blocks = list(blocks)
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        self.ds = np.asarray(ds, dtype=float).reshape(-1)
        self.sigma = float(sigma)
        self.rates = (np.zeros_like(self.points) if rates is None
                      else np.asarray(rates, dtype=float).reshape(-1, 3))
        self.t_d_lin = float(t_d_lin)
        self.loss = loss
        self.target_slot = target_slot

    def __len__(self) -> int:
        return len(self.points)

    def keep_rows(self, mask: np.ndarray) -> "LidarFactor":
        return LidarFactor(
            self.blocks, self.points[mask], self.normals[mask], self.ds[mask],
            self.sigma, self.rates[mask], self.t_d_lin, self.loss, self.target_slot,
        )

    def evaluate(self, values, jacobians):
        p_n, q_n, p_i, q_i, ext_p, ext_q, td = values
        R_n = quat_to_rotmat(q_n)
        R_i = quat_to_rotmat(q_i)
        R_e = quat_to_rotmat(ext_q)
        dtd = float(td[0]) - self.t_d_lin

        p_rn = self.points + dtd * self.rates
        p_bn = p_rn @ R_e.T + ext_p
        p_w = p_bn @ R_n.T + p_n
        p_bi = (p_w - p_i) @ R_i
        p_ri = (p_bi - ext_p) @ R_e

        n = self.normals
        inv_s = 1.0 / self.sigma
        r = (np.einsum("hk,hk->h", n, p_ri) + self.ds) * inv_s
        if not jacobians:
            return r, None

        J_pn = n @ (R_e.T @ R_i.T) * inv_s       # rows n^T R_e^T R_i^T
        base_n = n @ (R_e.T @ R_i.T @ R_n)       # rows n^T R_e^T R_i^T R_n
        J_qn = -_row_cross(base_n, p_bn) * inv_s
        J_pi = -J_pn
        ne = n @ R_e.T                           # rows n^T R_e^T
        J_qi = _row_cross(ne, p_bi) * inv_s
        R_bn_i = R_e.T @ R_i.T @ R_n
        J_ep = (n @ (R_bn_i - R_e.T)) * inv_s
        a = n @ (R_bn_i @ R_e)                   # rows n^T R_bn_i R_e
        J_eq = (_row_cross(n, p_ri) - _row_cross(a, p_rn)) * inv_s
        J_td = np.einsum("hk,hk->h", a, self.rates)[:, None] * inv_s
        return r, [J_pn, J_qn, J_pi, J_qi, J_ep, J_eq, J_td]


# --------------------------------------------------------------------------- #
# Thin single-measurement views used by tests and diagnostics
# --------------------------------------------------------------------------- #

def _lidar_blocks(x_n: NavState, x_i: NavState, ext: ExtrinsicState, t_d: TimeDelay):
    from .solver import QuaternionManifold

    return [
        ParameterBlock(x_n.p, name="p_n"),
        ParameterBlock(x_n.q, QuaternionManifold(), name="q_n"),
        ParameterBlock(x_i.p, name="p_i"),
        ParameterBlock(x_i.q, QuaternionManifold(), name="q_i"),
        ParameterBlock(ext.p_br, name="ext_p"),
        ParameterBlock(ext.q_r_b, QuaternionManifold(), name="ext_q"),
        ParameterBlock(np.array([t_d.t_d]), name="t_d"),
    ]


def lidar_residual(
    x_n: NavState,
    x_i: NavState,
    ext: ExtrinsicState,
    t_d: TimeDelay,
    assoc: PlaneAssociation,
    rate: np.ndarray | None = None,
    t_d_lin: float = 0.0,
) -> float:
    """Whitened point-to-plane residual of one association."""
    blocks = _lidar_blocks(x_n, x_i, ext, t_d)
    factor = LidarFactor(
        blocks, assoc.point[None], assoc.plane.normal[None],
        np.array([assoc.plane.d]), assoc.sigma,
        None if rate is None else np.asarray(rate, dtype=float)[None], t_d_lin,
    )
    r, _ = factor.evaluate([b.values for b in blocks], False)
    return float(r[0])


def lidar_jacobians(
    x_n: NavState,
    x_i: NavState,
    ext: ExtrinsicState,
    t_d: TimeDelay,
    assoc: PlaneAssociation,
    rate: np.ndarray | None = None,
    t_d_lin: float = 0.0,
) -> dict[str, np.ndarray]:
    """Whitened Jacobian rows keyed by block name."""
    blocks = _lidar_blocks(x_n, x_i, ext, t_d)
    factor = LidarFactor(
        blocks, assoc.point[None], assoc.plane.normal[None],
        np.array([assoc.plane.d]), assoc.sigma,
        None if rate is None else np.asarray(rate, dtype=float)[None], t_d_lin,
    )
    _, jacs = factor.evaluate([b.values for b in blocks], True)
    names = ["p_n", "q_n", "p_i", "q_i", "ext_p", "ext_q", "t_d"]
    return {name: J[0] for name, J in zip(names, jacs)}


# --------------------------------------------------------------------------- #
# Preintegration factor
# --------------------------------------------------------------------------- #

class PreintegrationFactor(ResidualBlock):
    """Whitened 15-row IMU factor over (p_i, q_i, sb_i, p_j, q_j, sb_j).

    Speed-bias blocks stack (v, bg, ba). Whitening comes from the
    preintegrated covariance's square-root information.
    """

    def __init__(self, blocks: list[ParameterBlock], pre: Preintegration,
                 gravity, t_i: float):
        if len(blocks) != 6:
            raise ValueError("PreintegrationFactor takes (p_i, q_i, sb_i, p_j, q_j, sb_j)")
        self.blocks = list(blocks)
        self.pre = pre
        self.gravity = gravity
        self.t_i = t_i
        self.loss = None

    def _states(self, values):
        p_i, q_i, sb_i, p_j, q_j, sb_j = values
        x_i = NavState(self.t_i, p_i, q_i, sb_i[0:3], sb_i[3:6], sb_i[6:9])
        x_j = NavState(self.t_i + self.pre.dt, p_j, q_j, sb_j[0:3], sb_j[3:6], sb_j[6:9])
        return x_i, x_j

    def evaluate(self, values, jacobians):
        x_i, x_j = self._states(values)
        W = self.pre.sqrt_info()
        r, Ji, Jj = preintegration_residual(x_i, x_j, self.pre, self.gravity,
                                            with_jacobians=jacobians)
        rw = W @ r
        if not jacobians:
            return rw, None
        WJi = W @ Ji
        WJj = W @ Jj
        # error columns (dp, dphi, dv, dbg, dba) -> blocks (p, q, sb=v+bg+ba)
        return rw, [WJi[:, 0:3], WJi[:, 3:6], WJi[:, 6:15],
                    WJj[:, 0:3], WJj[:, 3:6], WJj[:, 6:15]]
