"""IMU preintegration between consecutive keyframes.

Compounds IMU samples into relative-motion deltas that are independent of
the absolute world-frame state (gravity is applied in the residual, not in
the deltas), with a 15x15 covariance and first-order bias Jacobians. The
integration scheme matches the mechanization in :mod:`flio.imu` step for
step, so a state propagated through ``Preintegration.predict`` equals the
mechanized state bit for bit on the same samples.

Error-state ordering, fixed project-wide: (dp, dphi, dv, dbg, dba), with a
right-multiplicative body-frame attitude error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imu import Gravity, ImuSample, NavState
from .rotations import (
    exp_so3,
    quat_conj,
    quat_exp,
    quat_identity,
    quat_log,
    quat_mul,
    quat_to_rotmat,
    right_jacobian,
    right_jacobian_inv,
    skew,
)


@dataclass
class ImuNoise:
    """Continuous-time IMU noise densities (SI, per sqrt(Hz))."""

    gyro_noise: float = 2.909e-5        # rad/s/sqrt(Hz)  (0.1 deg/sqrt(hr) class)
    accel_noise: float = 1.667e-4       # m/s^2/sqrt(Hz)  (0.01 m/s/sqrt(hr) class)
    gyro_bias_walk: float = 1.0e-6      # rad/s/sqrt(s)
    accel_bias_walk: float = 1.0e-5     # m/s^2/sqrt(s)


@dataclass
class Preintegration:
    """Relative-motion deltas, covariance, and bias Jacobians over [t_i, t_j]."""

    dt: float
    dp: np.ndarray
    dq: np.ndarray
    dv: np.ndarray
    cov: np.ndarray                     # 15x15, (dp, dphi, dv, dbg, dba)
    J_p_bg: np.ndarray
    J_p_ba: np.ndarray
    J_v_bg: np.ndarray
    J_v_ba: np.ndarray
    J_q_bg: np.ndarray
    bg0: np.ndarray
    ba0: np.ndarray
    _sqrt_info: np.ndarray | None = field(default=None, repr=False)

    def corrected_deltas(self, bg: np.ndarray, ba: np.ndarray):
        """First-order bias-corrected deltas around (bg0, ba0)."""
        dbg = bg - self.bg0
        dba = ba - self.ba0
        dp = self.dp + self.J_p_bg @ dbg + self.J_p_ba @ dba
        dv = self.dv + self.J_v_bg @ dbg + self.J_v_ba @ dba
        dq = quat_mul(self.dq, quat_exp(self.J_q_bg @ dbg))
        return dp, dq, dv

    def predict(self, x_i: NavState, gravity: Gravity) -> NavState:
        """Propagate x_i through the (bias-corrected) deltas and gravity."""
        dp, dq, dv = self.corrected_deltas(x_i.bg, x_i.ba)
        Ri = quat_to_rotmat(x_i.q)
        dt = self.dt
        return NavState(
            t=x_i.t + dt,
            p=x_i.p + x_i.v * dt + 0.5 * gravity.g * dt * dt + Ri @ dp,
            q=quat_mul(x_i.q, dq),
            v=x_i.v + gravity.g * dt + Ri @ dv,
            bg=x_i.bg.copy(),
            ba=x_i.ba.copy(),
        )

    def sqrt_info(self) -> np.ndarray:
        """Whitening matrix W with W^T W = cov^-1 (eigendecomposition form)."""
        if self._sqrt_info is None:
            vals, vecs = np.linalg.eigh(0.5 * (self.cov + self.cov.T))
            floor = max(vals.max(), 0.0) * 1e-14 + 1e-300
            vals = np.maximum(vals, floor)
            self._sqrt_info = (vecs / np.sqrt(vals)).T
        return self._sqrt_info


def preintegrate(
    samples: list[ImuSample],
    bg0: np.ndarray,
    ba0: np.ndarray,
    noise: ImuNoise,
) -> Preintegration:
    """Integrate an IMU sample list spanning the interval between keyframes.

    Midpoint angular rate per interval and trapezoidal specific force, the
    same scheme as mechanization. Covariance propagates in discrete time from
    the configured noise densities; bias Jacobians are the exact first-order
    derivatives of the integrated deltas.
    """
    if len(samples) < 2:
        raise ValueError("preintegration needs at least two samples")
    bg0 = np.asarray(bg0, dtype=float)
    ba0 = np.asarray(ba0, dtype=float)

    dp = np.zeros(3)
    dv = np.zeros(3)
    dq = quat_identity()
    J_p_bg = np.zeros((3, 3))
    J_p_ba = np.zeros((3, 3))
    J_v_bg = np.zeros((3, 3))
    J_v_ba = np.zeros((3, 3))
    J_q_bg = np.zeros((3, 3))
    P = np.zeros((15, 15))
    I3 = np.eye(3)
    total = 0.0

    for s0, s1 in zip(samples[:-1], samples[1:]):
        dt = s1.t - s0.t
        if dt <= 0.0:
            raise ValueError(f"non-monotone IMU timestamps: {s0.t} -> {s1.t}")
        w = 0.5 * (s0.w + s1.w) - bg0
        theta = w * dt
        R0 = quat_to_rotmat(dq)
        dq_next = quat_mul(dq, quat_exp(theta))
        R1 = quat_to_rotmat(dq_next)
        f0 = s0.f - ba0
        f1 = s1.f - ba0
        acc = 0.5 * (R0 @ f0 + R1 @ f1)

        E_T = exp_so3(theta).T
        Jr = right_jacobian(theta)
        J_q_bg_next = E_T @ J_q_bg - Jr * dt

        # exact first-order sensitivities of the trapezoidal acceleration
        dacc_dbg = -0.5 * (R0 @ skew(f0) @ J_q_bg + R1 @ skew(f1) @ J_q_bg_next)
        dacc_dba = -0.5 * (R0 + R1)
        dacc_dphi = -0.5 * (R0 @ skew(f0) + R1 @ skew(f1) @ E_T)
        dacc_nbg = 0.5 * (R1 @ skew(f1) @ Jr * dt)  # via the attitude noise path

        F = np.eye(15)
        F[0:3, 3:6] = 0.5 * dt * dt * dacc_dphi
        F[0:3, 6:9] = I3 * dt
        F[0:3, 9:12] = 0.5 * dt * dt * dacc_dbg
        F[0:3, 12:15] = 0.5 * dt * dt * dacc_dba
        F[3:6, 3:6] = E_T
        F[3:6, 9:12] = -Jr * dt
        F[6:9, 3:6] = dt * dacc_dphi
        F[6:9, 9:12] = dt * dacc_dbg
        F[6:9, 12:15] = dt * dacc_dba

        G = np.zeros((15, 12))
        G[3:6, 0:3] = -Jr * dt
        G[6:9, 0:3] = dt * dacc_nbg
        G[0:3, 0:3] = 0.5 * dt * dt * dacc_nbg
        G[6:9, 3:6] = -dacc_dba * dt
        G[0:3, 3:6] = -dacc_dba * 0.5 * dt * dt
        G[9:12, 6:9] = I3 * dt
        G[12:15, 9:12] = I3 * dt

        q_diag = np.concatenate([
            np.full(3, noise.gyro_noise**2),
            np.full(3, noise.accel_noise**2),
            np.full(3, noise.gyro_bias_walk**2),
            np.full(3, noise.accel_bias_walk**2),
        ]) / dt
        P = F @ P @ F.T + (G * q_diag) @ G.T
        P = 0.5 * (P + P.T)

        J_p_bg = J_p_bg + J_v_bg * dt + 0.5 * dt * dt * dacc_dbg
        J_p_ba = J_p_ba + J_v_ba * dt + 0.5 * dt * dt * dacc_dba
        J_v_bg = J_v_bg + dt * dacc_dbg
        J_v_ba = J_v_ba + dt * dacc_dba
        J_q_bg = J_q_bg_next

        dp = dp + dv * dt + 0.5 * acc * dt * dt
        dv = dv + acc * dt
        dq = dq_next
        total += dt

    return Preintegration(
        dt=total, dp=dp, dq=dq, dv=dv, cov=P,
        J_p_bg=J_p_bg, J_p_ba=J_p_ba, J_v_bg=J_v_bg, J_v_ba=J_v_ba, J_q_bg=J_q_bg,
        bg0=bg0, ba0=ba0,
    )


def preintegration_residual(
    x_i: NavState,
    x_j: NavState,
    pre: Preintegration,
    gravity: Gravity,
    with_jacobians: bool = False,
):
    """Unwhitened 15-residual and, on request, Jacobians w.r.t. both states.

    Residual rows follow the (dp, dphi, dv, dbg, dba) ordering; the bias rows
    implement the random-walk model b_j - b_i. Jacobian columns are the
    15-dim error states of x_i and x_j in the same ordering.
    """
    if abs(x_i.t + pre.dt - x_j.t) > 1e-6:
        raise ValueError(
            f"preintegration spans {pre.dt:.6f}s but states are "
            f"{x_j.t - x_i.t:.6f}s apart"
        )
    g = gravity.g
    dt = pre.dt
    dbg = x_i.bg - pre.bg0
    dp_c, dq_c, dv_c = pre.corrected_deltas(x_i.bg, x_i.ba)

    Ri = quat_to_rotmat(x_i.q)
    Rj = quat_to_rotmat(x_j.q)
    s_p = x_j.p - x_i.p - x_i.v * dt - 0.5 * g * dt * dt
    s_v = x_j.v - x_i.v - g * dt

    r = np.empty(15)
    r[0:3] = Ri.T @ s_p - dp_c
    e_q = quat_mul(quat_conj(dq_c), quat_mul(quat_conj(x_i.q), x_j.q))
    r[3:6] = quat_log(e_q)
    r[6:9] = Ri.T @ s_v - dv_c
    r[9:12] = x_j.bg - x_i.bg
    r[12:15] = x_j.ba - x_i.ba

    if not with_jacobians:
        return r, None, None

    Jri = np.zeros((15, 15))
    Jrj = np.zeros((15, 15))
    Jr_inv = right_jacobian_inv(r[3:6])
    E = exp_so3(r[3:6])

    Jri[0:3, 0:3] = -Ri.T
    Jri[0:3, 3:6] = skew(Ri.T @ s_p)
    Jri[0:3, 6:9] = -Ri.T * dt
    Jri[0:3, 9:12] = -pre.J_p_bg
    Jri[0:3, 12:15] = -pre.J_p_ba

    Jri[3:6, 3:6] = -Jr_inv @ Rj.T @ Ri
    Jri[3:6, 9:12] = -Jr_inv @ E.T @ right_jacobian(pre.J_q_bg @ dbg) @ pre.J_q_bg

    Jri[6:9, 3:6] = skew(Ri.T @ s_v)
    Jri[6:9, 6:9] = -Ri.T
    Jri[6:9, 9:12] = -pre.J_v_bg
    Jri[6:9, 12:15] = -pre.J_v_ba

    Jri[9:12, 9:12] = -np.eye(3)
    Jri[12:15, 12:15] = -np.eye(3)

    Jrj[0:3, 0:3] = Ri.T
    Jrj[3:6, 3:6] = Jr_inv
    Jrj[6:9, 6:9] = Ri.T
    Jrj[9:12, 9:12] = np.eye(3)
    Jrj[12:15, 12:15] = np.eye(3)

    return r, Jri, Jrj
