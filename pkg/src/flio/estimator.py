"""Sliding-window factor-graph estimator.

Keyframes enter the window with an INS-propagated prior state; the newest
keyframe is associated against every older keyframe map and optimized
together with the IMU preintegration chain and the marginalization prior.
Optimization runs in two steps: a Huber-robust solve, a chi-square cull of
point-to-plane rows, then a solve on the survivors. When the window is full
the oldest state is marginalized into the prior.

Extrinsic and time-delay blocks stay constant until the window is full and
enough rotation has been accumulated; a degeneracy guard freezes them again
for steps whose accepted plane normals span too thin a set of directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .association import AssociationParams, associate_keyframe
from .factors import ExtrinsicState, LidarFactor, PreintegrationFactor, TimeDelay
from .imu import Gravity, InsPoseBuffer, NavState
from .pointcloud import KeyframeMap, LidarFrame, build_keyframe_map, undistort_frame, voxel_downsample
from .preintegration import ImuNoise, preintegrate
from .rotations import (
    Pose,
    quat_conj,
    quat_exp,
    quat_log,
    quat_mul,
    quat_to_euler,
    quat_to_rotmat,
)
from .solver import (
    HuberLoss,
    MarginalPrior,
    ParameterBlock,
    Problem,
    QuaternionManifold,
    SolveOptions,
    marginalize,
)

CHI2_95_1DOF = 3.841


class EstimatorError(RuntimeError):
    pass


def select_keyframe(translation: float, rotation: float, elapsed: float,
                    policy: "KeyframePolicy") -> bool:
    """Keyframe when motion exceeds a gate or too much time has passed."""
    if translation < 0.0 or rotation < 0.0 or elapsed < 0.0:
        raise ValueError("keyframe policy inputs must be non-negative")
    return (
        translation > policy.translation
        or rotation > policy.rotation
        or elapsed >= policy.max_interval
    )


@dataclass
class KeyframePolicy:
    translation: float = 0.4                       # m
    rotation: float = float(np.deg2rad(10.0))      # rad
    max_interval: float = 0.5                      # s

    def __post_init__(self):
        if min(self.translation, self.rotation, self.max_interval) <= 0.0:
            raise ValueError("keyframe policy thresholds must be positive")


@dataclass
class EstimatorConfig:
    window_size: int = 10                          # preintegration factors; n+1 keyframes
    policy: KeyframePolicy = field(default_factory=KeyframePolicy)
    association: AssociationParams = field(default_factory=AssociationParams)
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    leaf_size: float = 0.5
    huber_delta: float = 1.0
    chi2_gate: float = CHI2_95_1DOF
    calibrate: bool = True
    calib_min_rotation: float = float(np.deg2rad(15.0))
    degeneracy_min_eig: float = 0.01
    max_iterations: int = 30
    # initial prior stds: position/yaw pin the world-frame gauge, roll/pitch
    # reflect accelerometer leveling accuracy
    sigma_p0: float = 1e-3
    sigma_rp0: float = 0.01
    sigma_yaw0: float = 2e-4
    sigma_v0: float = 0.01
    sigma_bg0: float = 1e-3
    sigma_ba0: float = 0.05
    # weak standing prior on the calibration blocks, added at activation
    sigma_ext_rot_prior: float = 0.1
    sigma_ext_pos_prior: float = 0.2
    sigma_td_prior: float = 0.02


@dataclass
class CalibrationSnapshot:
    euler_deg: np.ndarray
    lever: np.ndarray
    t_d_ms: float


@dataclass
class FrameResult:
    t: float                       # state epoch, IMU clock
    stamp: float                   # frame stamp, LiDAR clock
    pose: Pose                     # IMU body in world
    is_keyframe: bool
    source: str                    # "ins" or "optimized"
    n_points: int = 0
    n_associations: int = 0
    n_culled: int = 0
    attitude_std_deg: np.ndarray | None = None
    calibration: CalibrationSnapshot | None = None


class WindowEntry:
    """One keyframe in the window: state blocks, cloud, map, preintegration."""

    def __init__(self, kf_id: int, stamp: float, epoch: float, cloud: np.ndarray,
                 kf_map: KeyframeMap, preint, state: NavState):
        self.id = kf_id
        self.stamp = stamp
        self.epoch = epoch
        self.cloud = cloud
        self.map = kf_map
        self.preint = preint
        self.p = ParameterBlock(state.p, name=f"p{kf_id}")
        self.q = ParameterBlock(state.q, QuaternionManifold(), name=f"q{kf_id}")
        self.sb = ParameterBlock(np.concatenate([state.v, state.bg, state.ba]),
                                 name=f"sb{kf_id}")

    def state(self) -> NavState:
        sb = self.sb.values
        return NavState(self.epoch, self.p.values.copy(), self.q.values.copy(),
                        sb[0:3].copy(), sb[3:6].copy(), sb[6:9].copy())

    def body_pose(self) -> Pose:
        return Pose(self.p.values.copy(), self.q.values.copy())

    def blocks(self) -> list[ParameterBlock]:
        return [self.p, self.q, self.sb]


class Estimator:
    """Processes undistorted LiDAR frames against a shared INS pose buffer."""

    def __init__(self, config: EstimatorConfig, buffer: InsPoseBuffer,
                 extrinsics: ExtrinsicState | None = None,
                 t_d: TimeDelay | None = None):
        self.config = config
        self.buffer = buffer
        self.gravity = buffer.gravity
        ext = extrinsics or ExtrinsicState()
        td = t_d or TimeDelay()
        self.ext_p = ParameterBlock(ext.p_br, name="ext_p")
        self.ext_q = ParameterBlock(ext.q_r_b, QuaternionManifold(), name="ext_q")
        self.td = ParameterBlock(np.array([td.t_d]), name="t_d")
        self.entries: list[WindowEntry] = []
        self.prior: MarginalPrior | None = None
        self.calib_prior: MarginalPrior | None = None
        self.calib_active = False
        self.rotation_excitation = 0.0
        self._next_id = 0
        self._last_problem: Problem | None = None
        self._last_kf_body_pose: Pose | None = None
        self._pending: list[LidarFrame] = []

    # -- small accessors ------------------------------------------------------

    @property
    def t_d(self) -> float:
        return float(self.td.values[0])

    def extrinsic_pose(self) -> Pose:
        return Pose(self.ext_p.values.copy(), self.ext_q.values.copy())

    def lidar_pose(self, body: Pose) -> Pose:
        return body.compose(self.extrinsic_pose())

    def newest(self) -> WindowEntry:
        if not self.entries:
            raise EstimatorError("window is empty")
        return self.entries[-1]

    def calibration_snapshot(self) -> CalibrationSnapshot:
        euler = np.rad2deg(quat_to_euler(self.ext_q.values))
        return CalibrationSnapshot(euler, self.ext_p.values.copy(),
                                   self.t_d * 1e3)

    def window_states(self) -> list[NavState]:
        return [e.state() for e in self.entries]

    # -- frame processing -----------------------------------------------------

    def process_frame(self, frame: LidarFrame) -> FrameResult | None:
        """Undistort, select, and (for keyframes) associate + optimize.

        The INS buffer must already cover the frame's sampling span plus the
        current time-delay estimate; the pipeline guarantees that by queueing
        frames until enough IMU has arrived.
        """
        if len(frame) == 0:
            return None
        t_d = self.t_d
        epoch = frame.stamp + t_d
        und = undistort_frame(frame, self.buffer, self.extrinsic_pose(), t_d)
        cloud = voxel_downsample(und.xyz, self.config.leaf_size)
        processed = LidarFrame(frame.stamp, np.zeros(len(cloud)), cloud)
        ins_state = self.buffer.state_at(epoch)

        if not self.entries:
            return self._first_keyframe(processed, epoch, ins_state)

        prev_pose = self._last_kf_body_pose
        trans = float(np.linalg.norm(ins_state.p - prev_pose.translation))
        rot = float(np.linalg.norm(quat_log(
            quat_mul(quat_conj(prev_pose.rotation), ins_state.q))))
        elapsed = epoch - self.entries[-1].epoch
        if not select_keyframe(trans, rot, elapsed, self.config.policy):
            self._pending.append(processed)
            return FrameResult(epoch, frame.stamp, ins_state.pose(),
                               is_keyframe=False, source="ins",
                               n_points=len(cloud))
        return self._new_keyframe(processed, epoch, ins_state, rot)

    def _first_keyframe(self, processed: LidarFrame, epoch: float,
                        ins_state: NavState) -> FrameResult:
        kf_map = build_keyframe_map(self._next_id, processed, [], self.buffer,
                                    self.extrinsic_pose(), self.t_d,
                                    self.config.leaf_size)
        entry = WindowEntry(self._next_id, processed.stamp, epoch,
                            processed.xyz, kf_map, None, ins_state)
        self._next_id += 1
        self.entries.append(entry)
        c = self.config
        sigmas = np.concatenate([
            np.full(3, c.sigma_p0),
            [c.sigma_rp0, c.sigma_rp0, c.sigma_yaw0],
            np.full(3, c.sigma_v0),
            np.full(3, c.sigma_bg0),
            np.full(3, c.sigma_ba0),
        ])
        self.prior = MarginalPrior.diagonal(entry.blocks(), sigmas)
        self._last_kf_body_pose = entry.body_pose()
        self._last_problem = None
        return FrameResult(epoch, processed.stamp, entry.body_pose(),
                           is_keyframe=True, source="optimized",
                           n_points=len(processed.xyz),
                           attitude_std_deg=self.attitude_std(),
                           calibration=self.calibration_snapshot())

    def _new_keyframe(self, processed: LidarFrame, epoch: float,
                      ins_state: NavState, rotation: float) -> FrameResult:
        prev = self.entries[-1]
        prev_state = prev.state()
        samples = self.buffer.samples_between(prev.epoch, epoch)
        preint = preintegrate(samples, prev_state.bg, prev_state.ba,
                              self.config.imu_noise)
        kf_map = build_keyframe_map(self._next_id, processed, self._pending,
                                    self.buffer, self.extrinsic_pose(),
                                    self.t_d, self.config.leaf_size)
        self._pending = []
        entry = WindowEntry(self._next_id, processed.stamp, epoch,
                            processed.xyz, kf_map, preint, ins_state)
        self._next_id += 1
        self.entries.append(entry)
        self.rotation_excitation += rotation

        groups = self._associate(entry, ins_state)
        n_assoc = sum(len(g) for g in groups)
        groups, n_culled = self.optimize_window(groups)
        if len(self.entries) == self.config.window_size + 1:
            self.marginalize_and_slide(groups)

        newest = self.entries[-1]
        self._last_kf_body_pose = newest.body_pose()
        opt_state = newest.state()
        self.buffer.rebase(opt_state)
        return FrameResult(epoch, processed.stamp, newest.body_pose(),
                           is_keyframe=True, source="optimized",
                           n_points=len(processed.xyz),
                           n_associations=n_assoc, n_culled=n_culled,
                           attitude_std_deg=self.attitude_std(),
                           calibration=self.calibration_snapshot())

    # -- association ----------------------------------------------------------

    def _point_rates(self, points: np.ndarray, epoch: float) -> np.ndarray:
        """Apparent r-frame velocity of static points at the keyframe epoch."""
        w_b, v_w = self.buffer.rates_at(epoch)
        R_wb = quat_to_rotmat(self.buffer.state_at(epoch).q)
        R_e = quat_to_rotmat(self.ext_q.values)
        w_r = R_e.T @ w_b
        v_r = R_e.T @ (R_wb.T @ v_w + np.cross(w_b, self.ext_p.values))
        return -(np.cross(np.broadcast_to(w_r, points.shape), points) + v_r)

    def _associate(self, entry: WindowEntry, ins_state: NavState) -> list[LidarFactor]:
        older = self.entries[:-1]
        if not older or len(entry.cloud) == 0:
            return []
        pose_n = self.lidar_pose(ins_state.pose())
        poses = [self.lidar_pose(e.body_pose()) for e in older]
        assoc = associate_keyframe(entry.cloud, [e.map for e in older], pose_n,
                                   poses, self.config.association)
        if not assoc:
            return []
        rates = self._point_rates(entry.cloud, entry.epoch)
        groups: list[LidarFactor] = []
        by_slot: dict[int, list] = {}
        for a in assoc:
            by_slot.setdefault(a.target, []).append(a)
        for slot in sorted(by_slot):
            items = by_slot[slot]
            target = older[slot]
            blocks = [entry.p, entry.q, target.p, target.q,
                      self.ext_p, self.ext_q, self.td]
            groups.append(LidarFactor(
                blocks,
                np.array([a.point for a in items]),
                np.array([a.plane.normal for a in items]),
                np.array([a.plane.d for a in items]),
                self.config.association.sigma,
                rates[[a.point_index for a in items]],
                t_d_lin=self.t_d,
                loss=HuberLoss(self.config.huber_delta),
                target_slot=slot,
            ))
        return groups

    # -- optimization ---------------------------------------------------------

    def _preint_factors(self) -> list[PreintegrationFactor]:
        out = []
        for prev, cur in zip(self.entries[:-1], self.entries[1:]):
            out.append(PreintegrationFactor(prev.blocks() + cur.blocks(),
                                            cur.preint, self.gravity, prev.epoch))
        return out

    def _update_calibration_gating(self, groups: list[LidarFactor]) -> None:
        c = self.config
        if not self.calib_active and c.calibrate:
            if (len(self.entries) >= c.window_size + 1
                    and self.rotation_excitation >= c.calib_min_rotation):
                self.calib_active = True
                sig = np.concatenate([
                    np.full(3, c.sigma_ext_pos_prior),
                    np.full(3, c.sigma_ext_rot_prior),
                    [c.sigma_td_prior],
                ])
                self.calib_prior = MarginalPrior.diagonal(
                    [self.ext_p, self.ext_q, self.td], sig)
        freeze = not self.calib_active
        if not freeze and groups:
            # all normals near-parallel: the extrinsics are unobservable here
            R_e = quat_to_rotmat(self.ext_q.values)
            normals = []
            for g in groups:
                R_wb = quat_to_rotmat(g.blocks[3].values)  # target body -> world
                normals.append(g.normals @ (R_wb @ R_e).T)
            n_w = np.vstack(normals)
            cov = (n_w.T @ n_w) / len(n_w)
            if np.linalg.eigvalsh(cov)[0] < c.degeneracy_min_eig:
                freeze = True
        elif not groups:
            freeze = True
        self.ext_p.constant = freeze
        self.ext_q.constant = freeze
        self.td.constant = freeze

    def optimize_window(self, groups: list[LidarFactor]):
        """Two-step solve with a chi-square cull of LiDAR rows in between."""
        if len(self.entries) < 2 and not groups:
            # single-keyframe window: prior and propagation only
            self._last_problem = self._build_problem([])
            return [], 0
        self._update_calibration_gating(groups)
        opts = SolveOptions(max_iterations=self.config.max_iterations)

        problem = self._build_problem(groups)
        summary = problem.solve(opts)
        if not summary.success:
            raise EstimatorError(
                f"window solve failed ({summary.termination}): {summary.message}; "
                f"{len(self.entries)} keyframes, {sum(len(g) for g in groups)} rows"
            )

        culled = 0
        survivors: list[LidarFactor] = []
        for g in groups:
            r, _ = g.evaluate([b.values for b in g.blocks], False)
            keep = r * r <= self.config.chi2_gate
            culled += int(np.sum(~keep))
            if np.all(keep):
                survivors.append(g)
            elif np.any(keep):
                survivors.append(g.keep_rows(keep))

        if culled:
            problem = self._build_problem(survivors)
            summary = problem.solve(opts)
            if not summary.success:
                raise EstimatorError(
                    f"second-step solve failed ({summary.termination}): {summary.message}"
                )
        self._clip_states()
        self._last_problem = problem
        return survivors, culled

    def _build_problem(self, groups: list[LidarFactor]) -> Problem:
        problem = Problem()
        if self.prior is not None:
            problem.add(self.prior)
        if self.calib_prior is not None:
            problem.add(self.calib_prior)
        for f in self._preint_factors():
            problem.add(f)
        for g in groups:
            problem.add(g)
        return problem

    def _clip_states(self) -> None:
        for e in self.entries:
            st = e.state()
            st.clip_biases()
            e.sb.values[3:6] = st.bg
            e.sb.values[6:9] = st.ba
        lever = np.linalg.norm(self.ext_p.values)
        if lever >= ExtrinsicState.MAX_LEVER_ARM:
            self.ext_p.values *= (ExtrinsicState.MAX_LEVER_ARM - 1e-6) / lever
        self.td.values[0] = float(np.clip(self.td.values[0],
                                          -TimeDelay.MAX_DELAY + 1e-9,
                                          TimeDelay.MAX_DELAY - 1e-9))

    # -- marginalization ------------------------------------------------------

    def marginalize_and_slide(self, groups: list[LidarFactor]) -> None:
        """Absorb the oldest keyframe into the prior and drop it."""
        if len(self.entries) != self.config.window_size + 1:
            raise EstimatorError(
                f"slide requires a full window of {self.config.window_size + 1}, "
                f"have {len(self.entries)}"
            )
        oldest = self.entries[0]
        absorbed: list = []
        if self.prior is not None:
            absorbed.append(self.prior)
        if self.calib_prior is not None:
            absorbed.append(self.calib_prior)
        absorbed.append(self._preint_factors()[0])
        for g in groups:
            if g.target_slot == 0:
                absorbed.append(g)
        self.prior = marginalize(absorbed, oldest.blocks())
        self.calib_prior = None
        self.entries.pop(0)

    # -- uncertainty ----------------------------------------------------------

    def attitude_std(self) -> np.ndarray:
        """Roll/pitch/yaw std of the newest keyframe's attitude, degrees."""
        problem = self._last_problem
        if problem is None:
            problem = self._build_problem([])
            self._last_problem = problem
        entry = self.newest()
        cov_phi = problem.covariance([entry.q])
        # map the body-frame tangent covariance into Euler-angle errors
        q = entry.q.values
        h = 1e-6
        J = np.zeros((3, 3))
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            ep = quat_to_euler(quat_mul(q, quat_exp(d)))
            em = quat_to_euler(quat_mul(q, quat_exp(-d)))
            diff = np.mod(ep - em + np.pi, 2 * np.pi) - np.pi
            J[:, k] = diff / (2 * h)
        cov_euler = J @ cov_phi @ J.T
        return np.rad2deg(np.sqrt(np.maximum(np.diag(cov_euler), 0.0)))
