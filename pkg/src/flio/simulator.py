"""Synthetic ground-truth generation: plane worlds, trajectories, sensors.

Worlds are finite rectangular planes. Trajectories are analytic position and
Euler-angle laws warped through a C2 ramp so every run starts with a static
lead-in for INS initialization. IMU samples are the exact body rates and
specific forces of the trajectory (derivatives taken with high-order central
differences) plus configurable biases and noise. LiDAR frames follow a
rosette scan whose phase advances with absolute time, so consecutive frames
never repeat directions and accumulated frames densify coverage.

All synthesis is deterministic under a fixed seed; LiDAR frames draw from
per-frame child streams so frame generation could run in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .factors import ExtrinsicState, TimeDelay
from .imu import Gravity, ImuSample, NavState
from .pointcloud import LidarFrame, MAX_RANGE, MIN_RANGE
from .rotations import Pose, euler_to_quat, quat_to_rotmat


# --------------------------------------------------------------------------- #
# World
# --------------------------------------------------------------------------- #

@dataclass
class WorldPlane:
    """Finite rectangle: center, unit normal, and half-extent axes.

    ``extents[0]`` spans the in-plane projection of ``u_hint`` (default:
    world-x, falling back to world-y when the normal leans toward x).
    """

    center: np.ndarray
    normal: np.ndarray
    extents: tuple[float, float]
    u_hint: np.ndarray | None = None
    u: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        n = np.asarray(self.normal, dtype=float)
        self.normal = n / np.linalg.norm(n)
        if self.u_hint is not None:
            u = np.asarray(self.u_hint, dtype=float)
            u = u - (self.normal @ u) * self.normal
        else:
            u = np.array([1.0, 0.0, 0.0]) - self.normal[0] * self.normal
            if np.linalg.norm(u) < 0.5:
                u = np.array([0.0, 1.0, 0.0]) - self.normal[1] * self.normal
        if np.linalg.norm(u) < 1e-6:
            raise ValueError("u_hint is parallel to the plane normal")
        self.u = u / np.linalg.norm(u)
        self.v = np.cross(self.normal, self.u)
        if min(self.extents) <= 0.0:
            raise ValueError("plane extents must be positive")

    @property
    def d(self) -> float:
        """Plane offset in n^T p + d = 0."""
        return -float(self.normal @ self.center)


@dataclass
class PlaneWorld:
    planes: list[WorldPlane]


# --------------------------------------------------------------------------- #
# Trajectories
# --------------------------------------------------------------------------- #

def _ramp_time(t: float, t_start: float, ramp: float) -> float:
    """C2 time warp: zero until t_start, unit slope after the ramp."""
    if t <= t_start:
        return 0.0
    u = (t - t_start) / ramp
    if u >= 1.0:
        return 0.5 * ramp + (t - t_start - ramp)
    # integral of the smootherstep 6u^5 - 15u^4 + 10u^3
    return ramp * (u**6 - 3.0 * u**5 + 2.5 * u**4)


@dataclass
class TrajectorySpec:
    """Analytic pose law: position and intrinsic Z-Y-X Euler angles of time."""

    pos: Callable[[float], np.ndarray]
    euler: Callable[[float], tuple[float, float, float]]
    duration: float
    max_speed: float = 3.0

    _H_POS = 1e-3
    _H_ROT = 1e-4

    def pose(self, t: float) -> Pose:
        return Pose(np.asarray(self.pos(t), dtype=float),
                    euler_to_quat(*self.euler(t)))

    def velocity(self, t: float) -> np.ndarray:
        h = self._H_POS
        f = lambda x: np.asarray(self.pos(x), dtype=float)
        return (-f(t + 2 * h) + 8 * f(t + h) - 8 * f(t - h) + f(t - 2 * h)) / (12 * h)

    def acceleration(self, t: float) -> np.ndarray:
        h = self._H_POS
        f = lambda x: np.asarray(self.pos(x), dtype=float)
        return (-f(t + 2 * h) + 16 * f(t + h) - 30 * f(t) + 16 * f(t - h)
                - f(t - 2 * h)) / (12 * h * h)

    def rotation(self, t: float) -> np.ndarray:
        return quat_to_rotmat(euler_to_quat(*self.euler(t)))

    def angular_rate(self, t: float) -> np.ndarray:
        """Body angular rate from R^T dR/dt."""
        h = self._H_ROT
        dR = (-self.rotation(t + 2 * h) + 8 * self.rotation(t + h)
              - 8 * self.rotation(t - h) + self.rotation(t - 2 * h)) / (12 * h)
        A = self.rotation(t).T @ dR
        A = 0.5 * (A - A.T)
        return np.array([A[2, 1], A[0, 2], A[1, 0]])

    def state(self, t: float) -> NavState:
        pose = self.pose(t)
        return NavState(t, pose.translation, pose.rotation, self.velocity(t),
                        np.zeros(3), np.zeros(3))

    def validate(self) -> None:
        speeds = [np.linalg.norm(self.velocity(t))
                  for t in np.linspace(0.1, self.duration - 0.1, 60)]
        if max(speeds) > self.max_speed:
            raise ValueError(f"trajectory peaks at {max(speeds):.2f} m/s, "
                             f"bound is {self.max_speed} m/s")


# --------------------------------------------------------------------------- #
# Sensor rig
# --------------------------------------------------------------------------- #

@dataclass
class RigNoise:
    gyro_noise: float = 2.909e-5       # rad/s/sqrt(Hz)
    accel_noise: float = 1.667e-4      # m/s^2/sqrt(Hz)
    gyro_bias_walk: float = 1.0e-6     # rad/s/sqrt(s)
    accel_bias_walk: float = 1.0e-5    # m/s^2/sqrt(s)
    lidar_range_std: float = 0.02      # m

    @classmethod
    def silent(cls) -> "RigNoise":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class SensorRig:
    extrinsics: ExtrinsicState = field(default_factory=ExtrinsicState)
    time_delay: TimeDelay = field(default_factory=TimeDelay)
    imu_rate: float = 200.0
    lidar_rate: float = 10.0
    points_per_frame: int = 150
    fov_half_angle: float = float(np.deg2rad(35.0))
    rosette_f1: float = 91.7
    rosette_f2: float = 23.43
    min_range: float = MIN_RANGE
    max_range: float = MAX_RANGE
    noise: RigNoise = field(default_factory=RigNoise)
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))


def rosette_directions(times: np.ndarray, rig: SensorRig) -> np.ndarray:
    """Unit ray directions (sensor frame, boresight +x) at absolute times."""
    theta = rig.fov_half_angle * np.sin(2 * np.pi * rig.rosette_f1 * times)
    phi = 2 * np.pi * rig.rosette_f2 * times
    st = np.sin(theta)
    return np.column_stack([np.cos(theta), st * np.cos(phi), st * np.sin(phi)])


# --------------------------------------------------------------------------- #
# Synthesis
# --------------------------------------------------------------------------- #

def synth_imu(
    traj: TrajectorySpec,
    rig: SensorRig,
    gravity: Gravity,
    seed: int = 0,
) -> tuple[list[ImuSample], list[NavState]]:
    """IMU stream plus the ground-truth NavState at every sample time."""
    rng = np.random.default_rng([seed, 0])
    dt = 1.0 / rig.imu_rate
    n = int(round(traj.duration * rig.imu_rate)) + 1
    sw = rig.noise.gyro_noise * np.sqrt(rig.imu_rate)
    sf = rig.noise.accel_noise * np.sqrt(rig.imu_rate)
    bg = rig.gyro_bias.astype(float).copy()
    ba = rig.accel_bias.astype(float).copy()
    samples: list[ImuSample] = []
    truth: list[NavState] = []
    for k in range(n):
        t = k * dt
        R = traj.rotation(t)
        w = traj.angular_rate(t)
        f = R.T @ (traj.acceleration(t) - gravity.g)
        if k > 0:
            bg = bg + rig.noise.gyro_bias_walk * np.sqrt(dt) * rng.normal(size=3)
            ba = ba + rig.noise.accel_bias_walk * np.sqrt(dt) * rng.normal(size=3)
        w_meas = w + bg + sw * rng.normal(size=3)
        f_meas = f + ba + sf * rng.normal(size=3)
        samples.append(ImuSample(t, w_meas, f_meas))
        st = traj.state(t)
        st.bg = bg.copy()
        st.ba = ba.copy()
        truth.append(st)
    return samples, truth


def _ray_hits(world: PlaneWorld, origins: np.ndarray, dirs: np.ndarray,
              min_range: float, max_range: float):
    """Nearest finite-rectangle hit per ray: (ranges, plane index; -1 = miss)."""
    n_rays = len(origins)
    best_s = np.full(n_rays, np.inf)
    best_idx = np.full(n_rays, -1, dtype=int)
    for i, plane in enumerate(world.planes):
        denom = dirs @ plane.normal
        off = origins @ plane.normal + plane.d
        with np.errstate(divide="ignore", invalid="ignore"):
            s = -off / denom
        ok = (np.abs(denom) > 1e-9) & (s >= min_range) & (s <= max_range)
        if not np.any(ok):
            continue
        hit = origins + s[:, None] * dirs
        local = hit - plane.center
        ok &= np.abs(local @ plane.u) <= plane.extents[0] / 2
        ok &= np.abs(local @ plane.v) <= plane.extents[1] / 2
        closer = ok & (s < best_s)
        best_s[closer] = s[closer]
        best_idx[closer] = i
    return best_s, best_idx


def synth_lidar(
    traj: TrajectorySpec,
    world: PlaneWorld,
    rig: SensorRig,
    seed: int = 0,
) -> tuple[list[LidarFrame], list[np.ndarray]]:
    """LiDAR frames (sensor clock stamps) and per-point plane labels.

    Each ray is cast from the true LiDAR pose at its sample time
    ``stamp + t_offset + true delay``; rays that miss every plane are
    dropped, so frames may be sparse.
    """
    period = 1.0 / rig.lidar_rate
    n_frames = int(np.floor((traj.duration - rig.time_delay.t_d - 1e-9) / period))
    T_b_r = rig.extrinsics.pose()
    frames: list[LidarFrame] = []
    labels: list[np.ndarray] = []
    offsets = (np.arange(rig.points_per_frame) + 0.5) / rig.points_per_frame * period
    for k in range(n_frames):
        stamp = k * period
        rng = np.random.default_rng([seed, 1, k])
        times = stamp + offsets + rig.time_delay.t_d
        dirs_r = rosette_directions(times, rig)
        origins = np.empty((len(times), 3))
        dirs_w = np.empty((len(times), 3))
        for j, t in enumerate(times):
            T_w_r = traj.pose(t).compose(T_b_r)
            origins[j] = T_w_r.translation
            dirs_w[j] = quat_to_rotmat(T_w_r.rotation) @ dirs_r[j]
        s, idx = _ray_hits(world, origins, dirs_w, rig.min_range, rig.max_range)
        hit = idx >= 0
        if rig.noise.lidar_range_std > 0.0:
            s = s + rig.noise.lidar_range_std * rng.normal(size=len(s))
        pts = dirs_r[hit] * s[hit, None]
        frames.append(LidarFrame(stamp, offsets[hit].copy(), pts))
        labels.append(idx[hit].copy())
    return frames, labels


# --------------------------------------------------------------------------- #
# Scenarios
# --------------------------------------------------------------------------- #

@dataclass
class Scenario:
    name: str
    world: PlaneWorld
    traj: TrajectorySpec
    rig: SensorRig
    gravity: Gravity
    seed: int

    def synthesize(self):
        imu, truth = synth_imu(self.traj, self.rig, self.gravity, self.seed)
        frames, labels = synth_lidar(self.traj, self.world, self.rig, self.seed)
        return SimData(self, imu, truth, frames, labels)


@dataclass
class SimData:
    scenario: Scenario
    imu: list[ImuSample]
    truth: list[NavState]
    frames: list[LidarFrame]
    labels: list[np.ndarray]


def _warped(base_pos, base_euler, t_start: float, ramp: float):
    pos = lambda t: base_pos(_ramp_time(t, t_start, ramp))
    euler = lambda t: base_euler(_ramp_time(t, t_start, ramp))
    return pos, euler


def _corridor(duration: float) -> tuple[PlaneWorld, TrajectorySpec]:
    # faces never meet: gaps of ~1 m keep any two planes' surfaces farther
    # apart than a voxel diagonal, so voxel centroids always stay on-surface
    tilt = np.deg2rad(15.0)
    world = PlaneWorld([
        WorldPlane([55.0, 0.0, 1.5], [0.0, 0.0, -1.0], (260.0, 3.8)),
        WorldPlane([55.0, -2.7, 0.0], [0.0, np.cos(tilt), np.sin(tilt)], (260.0, 10.0)),
        WorldPlane([55.0, 2.7, 0.0], [0.0, -np.cos(tilt), np.sin(tilt)], (260.0, 10.0)),
        WorldPlane([118.0, 0.0, 0.0], [-1.0, 0.0, 0.0], (3.6, 1.4)),
    ])

    def pos(tau):
        return np.array([
            1.5 * tau,
            0.5 * np.sin(2 * np.pi * tau / 17.0),
            0.10 * np.sin(2 * np.pi * tau / 7.0),
        ])

    def euler(tau):
        return (
            0.05 * np.sin(2 * np.pi * tau / 5.0),
            0.04 * np.sin(2 * np.pi * tau / 6.0 + 1.0),
            0.05 * np.sin(2 * np.pi * tau / 13.0),
        )

    p, e = _warped(pos, euler, 1.5, 2.0)
    return world, TrajectorySpec(p, e, duration)


def _octagon_room(apothem: float, floor_z: float, tilt_deg: float,
                  side: float) -> list[WorldPlane]:
    """Octagonal walls, floor, and a gable roof, with >=0.8 m face gaps."""
    planes = []
    tilt = np.deg2rad(tilt_deg)
    for i in range(8):
        beta = i * np.pi / 4.0
        c, s = np.cos(beta), np.sin(beta)
        normal = np.array([-c * np.cos(tilt), -s * np.cos(tilt), -np.sin(tilt)])
        wall = WorldPlane([apothem * c, apothem * s, 0.0], normal, (side, 2.4),
                          u_hint=np.array([-s, c, 0.0]))
        # wall band z in [-1.5, +0.9]: clear of the floor below and roof above
        wall.center = wall.center + wall.v * (-0.3 / wall.v[2])
        planes.append(wall)
    planes.append(WorldPlane([0.0, 0.0, floor_z], [0.0, 0.0, -1.0], (14.0, 14.0)))
    slope = np.deg2rad(21.0)
    for sx in (1.0, -1.0):
        n = np.array([-sx * np.sin(slope), 0.0, np.cos(slope)])
        apex_z = -2.3 - 7.0 * np.tan(slope)
        center = np.array([sx * 3.7, 0.0, apex_z + 3.7 * np.tan(slope)])
        planes.append(WorldPlane(center, n, (7.0, 14.0)))
    return planes


def _room_orbit(duration: float) -> tuple[PlaneWorld, TrajectorySpec]:
    world = PlaneWorld(_octagon_room(8.0, 1.7, 10.0, 5.2))
    radius, period = 3.5, 36.0
    w0 = 2 * np.pi / period

    def pos(tau):
        a = w0 * tau
        return np.array([radius * np.cos(a), radius * np.sin(a),
                         0.15 * np.sin(2 * np.pi * tau / 9.0)])

    def euler(tau):
        a = w0 * tau
        return (
            0.10 * np.sin(2 * np.pi * 0.23 * tau),
            0.08 * np.sin(2 * np.pi * 0.31 * tau + 0.7),
            a + np.pi / 2.0 + 0.20 * np.sin(2 * np.pi * tau / 11.0),
        )

    p, e = _warped(pos, euler, 1.5, 2.0)
    return world, TrajectorySpec(p, e, duration)


def _figure_eight(duration: float) -> tuple[PlaneWorld, TrajectorySpec]:
    # every wall is a shallow V of two panels, so a head-on wall view always
    # contributes two distinct normal directions next to the floor; all face
    # rectangles keep >=0.8 m gaps so no two surfaces share a voxel
    lean = np.deg2rad(10.0)
    vee = np.deg2rad(25.0)
    walls = []
    for beta, dist, width in ((0.0, 10.0, 16.0), (np.pi, 10.0, 16.0),
                              (np.pi / 2, 7.0, 24.0), (-np.pi / 2, 7.0, 24.0)):
        e_o = np.array([np.cos(beta), np.sin(beta), 0.0])
        e_t = np.array([-np.sin(beta), np.cos(beta), 0.0])
        panel_len = (width / 2.0) / np.cos(vee) - 2.4
        for side in (1.0, -1.0):
            az = beta + side * vee
            normal = np.array([-np.cos(az) * np.cos(lean),
                               -np.sin(az) * np.cos(lean), -np.sin(lean)])
            center = (dist + (width / 4.0) * np.tan(vee)) * e_o + side * (width / 4.0) * e_t
            hint = np.array([-np.sin(az), np.cos(az), 0.0])
            panel = WorldPlane(center, normal, (panel_len, 2.4), u_hint=hint)
            panel.center = panel.center + panel.v * (-0.3 / panel.v[2])
            walls.append(panel)
    walls.append(WorldPlane([0.0, 0.0, 1.7], [0.0, 0.0, -1.0], (18.4, 12.4)))
    slope = np.arctan2(4.7, 12.0)
    for sx in (1.0, -1.0):
        n = np.array([-sx * np.sin(slope), 0.0, np.cos(slope)])
        apex_z = -7.0
        center = np.array([sx * 6.2, 0.0, apex_z + 6.2 * np.tan(slope)])
        walls.append(WorldPlane(center, n, (11.9, 24.0)))
    world = PlaneWorld(walls)

    A, B, period = 5.5, 2.75, 40.0
    w0 = 2 * np.pi / period

    def pos(tau):
        return np.array([A * np.sin(w0 * tau), B * np.sin(2 * w0 * tau),
                         0.15 * np.sin(2 * np.pi * tau / 8.0)])

    def heading(tau):
        vx = A * w0 * np.cos(w0 * tau)
        vy = 2 * B * w0 * np.cos(2 * w0 * tau)
        return np.arctan2(vy, vx)

    def euler(tau):
        return (
            0.09 * np.sin(2 * np.pi * 0.21 * tau),
            0.07 * np.sin(2 * np.pi * 0.33 * tau + 0.4),
            heading(tau),
        )

    p, e = _warped(pos, euler, 1.5, 2.0)
    return world, TrajectorySpec(p, e, duration)


_SCENARIOS = {
    "corridor": (_corridor, 75.0),
    "room-orbit": (_room_orbit, 75.0),
    "figure-eight": (_figure_eight, 120.0),
}


def make_scenario(name: str, seed: int = 0, duration: float | None = None,
                  noiseless: bool = False) -> Scenario:
    """Reproducible named scenarios; unknown names raise ValueError."""
    if name not in _SCENARIOS:
        raise ValueError(f"unknown scenario '{name}', have {sorted(_SCENARIOS)}")
    builder, default_duration = _SCENARIOS[name]
    world, traj = builder(duration or default_duration)
    traj.validate()
    rig = SensorRig(
        gyro_bias=np.array([0.002, -0.0015, 0.001]),
        accel_bias=np.array([0.02, -0.01, 0.015]),
    )
    if noiseless:
        rig.noise = RigNoise.silent()
        rig.gyro_bias = np.zeros(3)
        rig.accel_bias = np.zeros(3)
    return Scenario(name, world, traj, rig, Gravity(), seed)
