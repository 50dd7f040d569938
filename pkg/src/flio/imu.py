"""INS initialization, strapdown mechanization, and the high-rate pose buffer.

The world frame is gravity-aligned with z down, so the gravity vector is
(0, 0, +g) and a level front-right-down IMU senses a specific force of
(0, 0, -g). Mechanization integrates one IMU interval at a time: a single
quaternion increment from the averaged angular rate, trapezoidal specific
force for velocity, and trapezoidal velocity for position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rotations import (
    Pose,
    euler_to_quat,
    pose_interpolate,
    quat_exp,
    quat_mul,
    quat_to_rotmat,
)

GRAVITY_MAGNITUDE = 9.80665

# Bias sanity gates; estimates beyond these are clipped.
GYRO_BIAS_SATURATION = 0.1      # rad/s
ACCEL_BIAS_SATURATION = 2.0     # m/s^2


@dataclass
class ImuSample:
    """One IMU measurement: angular velocity (rad/s) and specific force (m/s^2)."""

    t: float
    w: np.ndarray
    f: np.ndarray


@dataclass
class Gravity:
    """Gravity vector in the world frame, fixed for a run."""

    g: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, GRAVITY_MAGNITUDE]))


@dataclass
class NavState:
    """IMU state at a time node: pose, velocity, and sensor biases."""

    t: float
    p: np.ndarray                 # position, world frame, m
    q: np.ndarray                 # body-to-world quaternion (w, x, y, z)
    v: np.ndarray                 # velocity, world frame, m/s
    bg: np.ndarray                # gyroscope bias, rad/s
    ba: np.ndarray                # accelerometer bias, m/s^2

    def copy(self) -> "NavState":
        return NavState(self.t, self.p.copy(), self.q.copy(), self.v.copy(),
                        self.bg.copy(), self.ba.copy())

    def pose(self) -> Pose:
        return Pose(self.p.copy(), self.q.copy())

    def clip_biases(self) -> None:
        ng = np.linalg.norm(self.bg)
        if ng > GYRO_BIAS_SATURATION:
            self.bg *= GYRO_BIAS_SATURATION / ng
        na = np.linalg.norm(self.ba)
        if na > ACCEL_BIAS_SATURATION:
            self.ba *= ACCEL_BIAS_SATURATION / na


def initial_nav_state(t: float, roll: float, pitch: float) -> NavState:
    """State at the world origin with zero yaw, zero velocity, zero biases."""
    return NavState(
        t=t,
        p=np.zeros(3),
        q=euler_to_quat(roll, pitch, 0.0),
        v=np.zeros(3),
        bg=np.zeros(3),
        ba=np.zeros(3),
    )


# --------------------------------------------------------------------------- #
# Static initialization
# --------------------------------------------------------------------------- #

def init_attitude_from_accel(samples: list[ImuSample],
                             gravity_magnitude: float = GRAVITY_MAGNITUDE) -> tuple[float, float]:
    """Leveling from the mean specific force of a near-static window.

    Returns (roll, pitch) such that the rotated mean specific force aligns
    with -g in the world frame; yaw is left at zero by convention.

    Raises ValueError on fewer than 20 samples or if the mean specific-force
    magnitude deviates from gravity by more than 10%.
    """
    if len(samples) < 20:
        raise ValueError(f"need >= 20 near-static samples, got {len(samples)}")
    f = np.mean([s.f for s in samples], axis=0)
    mag = np.linalg.norm(f)
    if abs(mag - gravity_magnitude) > 0.1 * gravity_magnitude:
        raise ValueError(
            f"mean specific force {mag:.3f} m/s^2 deviates from gravity by more than 10%"
        )
    roll = np.arctan2(-f[1], -f[2])
    pitch = np.arctan2(f[0], np.hypot(f[1], f[2]))
    return float(roll), float(pitch)


def detect_zero_velocity(
    window: list[ImuSample],
    gyro_std_threshold: float = 0.005,
    accel_std_threshold: float = 0.05,
    gyro_mean_threshold: float = 0.02,
) -> bool:
    """Variance gates on both sensors plus a mean-rate gate.

    The window must span at least one second. True only when the per-axis
    standard deviations of angular rate and specific force are below their
    thresholds and the mean angular-rate magnitude is below 0.02 rad/s (a
    steady rotation has small variance but is not zero-velocity).
    """
    if len(window) < 2 or window[-1].t - window[0].t < 1.0 - 1e-9:
        raise ValueError("zero-velocity window must span at least 1 s")
    w = np.array([s.w for s in window])
    f = np.array([s.f for s in window])
    if np.max(w.std(axis=0)) >= gyro_std_threshold:
        return False
    if np.max(f.std(axis=0)) >= accel_std_threshold:
        return False
    return bool(np.linalg.norm(w.mean(axis=0)) < gyro_mean_threshold)


def estimate_gyro_bias_static(window: list[ImuSample]) -> np.ndarray:
    """Mean angular rate over a verified zero-velocity window."""
    if not detect_zero_velocity(window):
        raise ValueError("window failed the zero-velocity test")
    return np.mean([s.w for s in window], axis=0)


# --------------------------------------------------------------------------- #
# Mechanization
# --------------------------------------------------------------------------- #

def mechanize_step(state: NavState, s0: ImuSample, s1: ImuSample,
                   gravity: Gravity) -> NavState:
    """Integrate the INS kinematics over one IMU interval [s0.t, s1.t].

    Biases from ``state`` are removed from both samples. Attitude advances by
    one quaternion increment from the averaged angular rate; velocity uses
    the trapezoid of the rotated specific force plus gravity; position uses
    the trapezoid of velocity.
    """
    dt = s1.t - s0.t
    if dt <= 0.0:
        raise ValueError(f"non-monotone IMU timestamps: {s0.t} -> {s1.t}")
    if abs(s0.t - state.t) > 1e-9:
        raise ValueError(f"state time {state.t} does not match first sample {s0.t}")

    w = 0.5 * (s0.w + s1.w) - state.bg
    q1 = quat_mul(state.q, quat_exp(w * dt))

    f0 = quat_to_rotmat(state.q) @ (s0.f - state.ba)
    f1 = quat_to_rotmat(q1) @ (s1.f - state.ba)
    a = 0.5 * (f0 + f1) + gravity.g

    v1 = state.v + a * dt
    p1 = state.p + 0.5 * (state.v + v1) * dt

    return NavState(t=s1.t, p=p1, q=q1, v=v1, bg=state.bg.copy(), ba=state.ba.copy())


def interpolate_sample(s0: ImuSample, s1: ImuSample, t: float) -> ImuSample:
    """Linear interpolation of the raw rates between two samples."""
    if not (s0.t <= t <= s1.t):
        raise ValueError(f"interpolation time {t} outside [{s0.t}, {s1.t}]")
    if s1.t == s0.t:
        return ImuSample(t, s0.w.copy(), s0.f.copy())
    a = (t - s0.t) / (s1.t - s0.t)
    return ImuSample(t, (1 - a) * s0.w + a * s1.w, (1 - a) * s0.f + a * s1.f)


def slice_samples(samples: list[ImuSample], t0: float, t1: float) -> list[ImuSample]:
    """Samples covering [t0, t1] with interpolated boundary samples.

    The input must bracket the interval. Output timestamps are strictly
    increasing, starting at t0 and ending at t1.
    """
    if t1 <= t0:
        raise ValueError(f"empty interval [{t0}, {t1}]")
    ts = np.array([s.t for s in samples])
    if t0 < ts[0] - 1e-9 or t1 > ts[-1] + 1e-9:
        raise ValueError(f"samples span [{ts[0]}, {ts[-1]}], cannot cover [{t0}, {t1}]")
    i0 = int(np.searchsorted(ts, t0, side="right")) - 1
    i0 = max(i0, 0)
    i1 = int(np.searchsorted(ts, t1, side="left"))
    i1 = min(i1, len(samples) - 1)
    out = [interpolate_sample(samples[i0], samples[min(i0 + 1, len(samples) - 1)], max(t0, ts[0]))]
    for s in samples[i0 + 1:i1]:
        if s.t > out[-1].t + 1e-12 and s.t < t1 - 1e-12:
            out.append(s)
    if t1 > out[-1].t + 1e-12:
        prev = samples[max(i1 - 1, 0)]
        out.append(interpolate_sample(prev, samples[i1], min(t1, ts[-1])))
    return out


def mechanize(state: NavState, samples: list[ImuSample], gravity: Gravity) -> list[NavState]:
    """Run mechanize_step over a sample list; returns states at samples[1:]."""
    states = []
    cur = state
    for s0, s1 in zip(samples[:-1], samples[1:]):
        cur = mechanize_step(cur, s0, s1, gravity)
        states.append(cur)
    return states


# --------------------------------------------------------------------------- #
# High-rate pose buffer
# --------------------------------------------------------------------------- #

class InsPoseBuffer:
    """Time-ordered NavState snapshots at IMU rate with interpolation queries.

    A single producer appends mechanized states; reads are pure. ``rebase``
    supports the closed-loop correction: the state at a past time is replaced
    and everything after it is re-mechanized from the retained raw samples.
    """

    def __init__(self, gravity: Gravity):
        self.gravity = gravity
        self.states: list[NavState] = []
        self.samples: list[ImuSample] = []
        self._arrays: tuple | None = None  # (ts, ps, qs, vs) cache for batch queries

    def start(self, state: NavState, sample: ImuSample) -> None:
        if abs(state.t - sample.t) > 1e-9:
            raise ValueError("initial state and sample must share a timestamp")
        self.states = [state.copy()]
        self.samples = [sample]
        self._arrays = None

    def push(self, sample: ImuSample) -> NavState:
        if not self.states:
            raise RuntimeError("buffer not started")
        if sample.t <= self.samples[-1].t:
            raise ValueError(f"non-monotone IMU timestamp {sample.t}")
        new = mechanize_step(self.states[-1], self.samples[-1], sample, self.gravity)
        self.states.append(new)
        self.samples.append(sample)
        return new

    @property
    def t_start(self) -> float:
        return self.states[0].t

    @property
    def t_end(self) -> float:
        return self.states[-1].t

    def covers(self, t0: float, t1: float) -> bool:
        return bool(self.states) and self.t_start <= t0 and t1 <= self.t_end

    def _bracket(self, t: float) -> int:
        if not self.states or t < self.t_start - 1e-9 or t > self.t_end + 1e-9:
            raise ValueError(
                f"query {t} outside buffered span"
                f" [{self.t_start if self.states else '-'}, {self.t_end if self.states else '-'}]"
            )
        ts = np.array([s.t for s in self.states])
        i = int(np.searchsorted(ts, t, side="right")) - 1
        return min(max(i, 0), len(self.states) - 2) if len(self.states) > 1 else 0

    def state_at(self, t: float) -> NavState:
        """Interpolated NavState (pose slerp, linear velocity)."""
        i = self._bracket(t)
        s0, s1 = self.states[i], self.states[min(i + 1, len(self.states) - 1)]
        if s1.t == s0.t or abs(t - s0.t) < 1e-12:
            out = s0.copy()
            out.t = t
            return out
        pose = pose_interpolate(s0.pose(), s0.t, s1.pose(), s1.t, min(t, s1.t))
        a = (t - s0.t) / (s1.t - s0.t)
        return NavState(t=t, p=pose.translation, q=pose.rotation,
                        v=(1 - a) * s0.v + a * s1.v, bg=s0.bg.copy(), ba=s0.ba.copy())

    def pose_at(self, t: float) -> Pose:
        return self.state_at(t).pose()

    def _stacked(self):
        if self._arrays is None or len(self._arrays[0]) != len(self.states):
            self._arrays = (
                np.array([s.t for s in self.states]),
                np.array([s.p for s in self.states]),
                np.array([s.q for s in self.states]),
                np.array([s.v for s in self.states]),
            )
        return self._arrays

    def poses_at_batch(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized pose interpolation: (positions (N,3), quaternions (N,4))."""
        from .rotations import bquat_slerp

        times = np.asarray(times, dtype=float)
        if times.size and (times.min() < self.t_start - 1e-9 or times.max() > self.t_end + 1e-9):
            raise ValueError(
                f"queries [{times.min():.6f}, {times.max():.6f}] outside buffered span "
                f"[{self.t_start:.6f}, {self.t_end:.6f}]"
            )
        ts, ps, qs, _ = self._stacked()
        if len(ts) == 1:
            return np.tile(ps[0], (len(times), 1)), np.tile(qs[0], (len(times), 1))
        i = np.clip(np.searchsorted(ts, times, side="right") - 1, 0, len(ts) - 2)
        t0, t1 = ts[i], ts[i + 1]
        a = np.clip((times - t0) / np.maximum(t1 - t0, 1e-300), 0.0, 1.0)
        pos = ps[i] * (1.0 - a)[:, None] + ps[i + 1] * a[:, None]
        quat = bquat_slerp(qs[i], qs[i + 1], a)
        return pos, quat

    def rates_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Bias-corrected body angular rate and world velocity at time t."""
        i = self._bracket(t)
        s0, s1 = self.samples[i], self.samples[min(i + 1, len(self.samples) - 1)]
        raw = interpolate_sample(s0, s1, min(max(t, s0.t), s1.t))
        st = self.state_at(t)
        return raw.w - st.bg, st.v.copy()

    def samples_between(self, t0: float, t1: float) -> list[ImuSample]:
        return slice_samples(self.samples, t0, t1)

    def rebase(self, state: NavState) -> None:
        """Replace the state at state.t and re-mechanize everything after it."""
        if not self.states:
            raise RuntimeError("buffer not started")
        t = state.t
        if t < self.t_start - 1e-9 or t > self.t_end + 1e-9:
            raise ValueError(f"rebase time {t} outside buffered span")
        ts = np.array([s.t for s in self.samples])
        i = int(np.searchsorted(ts, t, side="right"))  # ts[i-1] <= t < ts[i]
        s_lo = self.samples[max(i - 1, 0)]
        s_hi = self.samples[min(i, len(self.samples) - 1)]
        boundary = interpolate_sample(s_lo, s_hi, min(max(t, s_lo.t), s_hi.t))
        boundary.t = t
        head = [boundary] + self.samples[i:]
        self.samples = head
        self.states = [state.copy()] + mechanize(state, head, self.gravity)
        self._arrays = None

    def trim(self, t: float) -> None:
        """Drop history strictly before t (keeps one bracketing entry)."""
        ts = np.array([s.t for s in self.states])
        i = max(int(np.searchsorted(ts, t, side="right")) - 1, 0)
        self.states = self.states[i:]
        self.samples = self.samples[i:]
        self._arrays = None
