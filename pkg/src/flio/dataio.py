"""Plain-file dataset formats, run configuration, and output writers.

Formats:
  - IMU: one sample per line, ``t wx wy wz ax ay az`` (s, rad/s, m/s^2).
  - LiDAR: a directory of ``<stamp_ns>.txt`` files, one point per line,
    ``t_offset x y z`` (s, m) in the sensor frame at sample time.
  - Trajectory: ``t px py pz qx qy qz qw`` (world frame, qw >= 0).
  - Attitude std: ``t roll_std pitch_std yaw_std`` (degrees).
  - Calibration history: ``t ex_deg ey_deg ez_deg px py pz td_ms``.
  - Config and metrics: flat ``key = value`` text.

``#`` starts a comment everywhere. Values are written with nine decimals,
so write/read round trips are exact to 1e-9.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .imu import ImuSample
from .pointcloud import LidarFrame, MAX_RANGE, MIN_RANGE, new_frame
from .rotations import quat_canonical

logger = logging.getLogger(__name__)

_FMT = "%.9f"


def _lines(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if text:
                yield lineno, text


# --------------------------------------------------------------------------- #
# IMU
# --------------------------------------------------------------------------- #

def load_imu(path: str) -> list[ImuSample]:
    """Parse an IMU text file; timestamps must strictly increase."""
    samples: list[ImuSample] = []
    last_t = -np.inf
    for lineno, text in _lines(path):
        parts = text.split()
        if len(parts) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
        t = vals[0]
        if t <= last_t:
            raise ValueError(f"{path}:{lineno}: non-increasing timestamp {t}")
        last_t = t
        samples.append(ImuSample(t, np.array(vals[1:4]), np.array(vals[4:7])))
    return samples


def save_imu(path: str, samples: list[ImuSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# t wx wy wz ax ay az\n")
        for s in samples:
            row = [s.t, *s.w, *s.f]
            fh.write(" ".join(_FMT % v for v in row) + "\n")


# --------------------------------------------------------------------------- #
# LiDAR frames
# --------------------------------------------------------------------------- #

def load_lidar(path: str, frame_period: float = 0.1,
               min_range: float = MIN_RANGE,
               max_range: float = MAX_RANGE) -> list[LidarFrame]:
    """Load a directory of per-frame files, ordered by stamp."""
    names = [n for n in os.listdir(path) if n.endswith(".txt")]
    stamped = []
    for name in names:
        try:
            stamp_ns = int(name[:-4])
        except ValueError as exc:
            raise ValueError(f"{path}/{name}: file name is not a nanosecond stamp") from exc
        stamped.append((stamp_ns, name))
    if stamped != sorted(stamped):
        logger.warning("LiDAR frame files in %s are out of order; reordering by stamp", path)
    frames = []
    for stamp_ns, name in sorted(stamped):
        full = os.path.join(path, name)
        offsets, pts = [], []
        for lineno, text in _lines(full):
            parts = text.split()
            if len(parts) != 4:
                raise ValueError(f"{full}:{lineno}: expected 4 fields, got {len(parts)}")
            vals = [float(p) for p in parts]
            if vals[0] >= frame_period:
                raise ValueError(
                    f"{full}:{lineno}: t_offset {vals[0]} >= frame period {frame_period}"
                )
            offsets.append(vals[0])
            pts.append(vals[1:4])
        frames.append(new_frame(stamp_ns * 1e-9, np.array(offsets),
                                np.array(pts).reshape(-1, 3),
                                min_range, max_range))
    return frames


def save_lidar(path: str, frames: list[LidarFrame]) -> None:
    os.makedirs(path, exist_ok=True)
    for f in frames:
        stamp_ns = int(round(f.stamp * 1e9))
        with open(os.path.join(path, f"{stamp_ns}.txt"), "w", encoding="utf-8") as fh:
            for off, p in zip(f.t_offsets, f.xyz):
                fh.write(" ".join(_FMT % v for v in (off, p[0], p[1], p[2])) + "\n")


# --------------------------------------------------------------------------- #
# Trajectories and run outputs
# --------------------------------------------------------------------------- #

@dataclass
class TrajectoryRecord:
    t: float
    p: np.ndarray
    q: np.ndarray  # (w, x, y, z)


def load_trajectory(path: str) -> list[TrajectoryRecord]:
    records = []
    last_t = -np.inf
    for lineno, text in _lines(path):
        parts = text.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        vals = [float(p) for p in parts]
        if vals[0] <= last_t:
            raise ValueError(f"{path}:{lineno}: non-increasing timestamp {vals[0]}")
        last_t = vals[0]
        qx, qy, qz, qw = vals[4:8]
        records.append(TrajectoryRecord(vals[0], np.array(vals[1:4]),
                                        quat_canonical(np.array([qw, qx, qy, qz]))))
    return records


def save_trajectory(path: str, records: list[TrajectoryRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# t px py pz qx qy qz qw\n")
        for r in records:
            q = quat_canonical(r.q)
            row = [r.t, *r.p, q[1], q[2], q[3], q[0]]
            fh.write(" ".join(_FMT % v for v in row) + "\n")


def save_attitude_std(path: str, rows: list[tuple[float, np.ndarray]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# t roll_std pitch_std yaw_std (deg)\n")
        for t, std in rows:
            fh.write(" ".join(_FMT % v for v in (t, *std)) + "\n")


def load_attitude_std(path: str) -> list[tuple[float, np.ndarray]]:
    out = []
    for _, text in _lines(path):
        vals = [float(p) for p in text.split()]
        out.append((vals[0], np.array(vals[1:4])))
    return out


def save_calibration_history(path: str, rows: list[tuple[float, np.ndarray, np.ndarray, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# t ex_deg ey_deg ez_deg px py pz td_ms\n")
        for t, euler_deg, lever, td_ms in rows:
            fh.write(" ".join(_FMT % v for v in (t, *euler_deg, *lever, td_ms)) + "\n")


def load_calibration_history(path: str):
    out = []
    for _, text in _lines(path):
        vals = [float(p) for p in text.split()]
        out.append((vals[0], np.array(vals[1:4]), np.array(vals[4:7]), vals[7]))
    return out


# --------------------------------------------------------------------------- #
# Flat key-value files
# --------------------------------------------------------------------------- #

def load_keyvalues(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, text in _lines(path):
        if "=" not in text:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = text.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def save_keyvalues(path: str, values: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in values.items():
            if isinstance(v, (list, tuple, np.ndarray)):
                v = ", ".join(repr(float(x)) for x in v)
            fh.write(f"{k} = {v}\n")


@dataclass
class RunConfig:
    """Pipeline run configuration, loadable from flat key-value text."""

    imu_path: str = ""
    lidar_dir: str = ""
    output_dir: str = "out"
    truth_path: str = ""                # optional; enables metrics output
    frame_period: float = 0.1
    gyro_noise: float = 2.909e-5
    accel_noise: float = 1.667e-4
    gyro_bias_walk: float = 1.0e-6
    accel_bias_walk: float = 1.0e-5
    sigma_lidar: float = 0.1
    leaf_size: float = 0.5
    kf_translation: float = 0.4
    kf_rotation_deg: float = 10.0
    kf_interval: float = 0.5
    window_size: int = 10
    calibrate: bool = True
    init_ext_euler_deg: tuple = (0.0, 0.0, 0.0)
    init_ext_lever: tuple = (0.0, 0.0, 0.0)
    init_time_delay: float = 0.0
    seed: int = 0

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        raw = load_keyvalues(path)
        cfg = cls()
        known = {f.name: f for f in fields(cls)}
        base = os.path.dirname(os.path.abspath(path))
        for key, value in raw.items():
            if key not in known:
                raise ValueError(f"{path}: unknown config key '{key}'")
            current = getattr(cfg, key)
            if isinstance(current, bool):
                setattr(cfg, key, value.lower() in ("1", "true", "yes", "on"))
            elif isinstance(current, int):
                setattr(cfg, key, int(value))
            elif isinstance(current, float):
                setattr(cfg, key, float(value))
            elif isinstance(current, tuple):
                setattr(cfg, key, tuple(float(x) for x in value.split(",")))
            else:
                setattr(cfg, key, value)
        for attr in ("imu_path", "lidar_dir", "truth_path", "output_dir"):
            val = getattr(cfg, attr)
            if val and not os.path.isabs(val):
                setattr(cfg, attr, os.path.join(base, val))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not self.imu_path or not os.path.isfile(self.imu_path):
            raise FileNotFoundError(f"IMU file not found: {self.imu_path!r}")
        if not self.lidar_dir or not os.path.isdir(self.lidar_dir):
            raise FileNotFoundError(f"LiDAR directory not found: {self.lidar_dir!r}")
        if self.truth_path and not os.path.isfile(self.truth_path):
            raise FileNotFoundError(f"truth file not found: {self.truth_path!r}")

    def to_file(self, path: str) -> None:
        values = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            values[f.name] = v
        save_keyvalues(path, values)
