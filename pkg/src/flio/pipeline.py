"""End-to-end pipeline: INS initialization, stream merging, run outputs.

The pipeline owns the INS side (static initialization, mechanization into
the pose buffer) and feeds LiDAR frames to the estimator once the buffer
covers their sampling span. Frames that end before initialization finishes
are skipped; estimator-level failures on a frame skip that frame rather
than aborting the run.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .dataio import (
    RunConfig,
    TrajectoryRecord,
    load_imu,
    load_lidar,
    save_attitude_std,
    save_calibration_history,
    save_imu,
    save_keyvalues,
    save_lidar,
    save_trajectory,
)
from .estimator import (
    Estimator,
    EstimatorConfig,
    EstimatorError,
    FrameResult,
    KeyframePolicy,
)
from .evaluation import EvalMetrics, evaluate
from .factors import ExtrinsicState, TimeDelay
from .imu import (
    Gravity,
    ImuSample,
    InsPoseBuffer,
    detect_zero_velocity,
    estimate_gyro_bias_static,
    init_attitude_from_accel,
    initial_nav_state,
)
from .pointcloud import LidarFrame
from .preintegration import ImuNoise
from .rotations import euler_to_quat, quat_to_euler
from .simulator import SimData, make_scenario

logger = logging.getLogger(__name__)

INIT_WINDOW = 1.05      # s of IMU kept for static initialization
INIT_TIMEOUT = 30.0     # s without successful initialization -> hard error


def estimator_config_from_run(config: RunConfig) -> EstimatorConfig:
    cfg = EstimatorConfig()
    cfg.policy = KeyframePolicy(config.kf_translation,
                                float(np.deg2rad(config.kf_rotation_deg)),
                                config.kf_interval)
    cfg.association.sigma = config.sigma_lidar
    cfg.leaf_size = config.leaf_size
    cfg.window_size = config.window_size
    cfg.calibrate = config.calibrate
    cfg.imu_noise = ImuNoise(config.gyro_noise, config.accel_noise,
                             config.gyro_bias_walk, config.accel_bias_walk)
    return cfg


def initial_calibration(config: RunConfig) -> tuple[ExtrinsicState, TimeDelay]:
    euler = np.deg2rad(np.asarray(config.init_ext_euler_deg, dtype=float))
    ext = ExtrinsicState(np.asarray(config.init_ext_lever, dtype=float),
                         euler_to_quat(*euler))
    return ext, TimeDelay(config.init_time_delay)


class OdometryPipeline:
    """Streaming front end: push IMU samples and LiDAR frames in time order."""

    def __init__(self, est_config: EstimatorConfig | None = None,
                 extrinsics: ExtrinsicState | None = None,
                 t_d: TimeDelay | None = None,
                 gravity: Gravity | None = None):
        self.est_config = est_config or EstimatorConfig()
        self.gravity = gravity or Gravity()
        self._init_ext = extrinsics or ExtrinsicState()
        self._init_td = t_d or TimeDelay()
        self.buffer: InsPoseBuffer | None = None
        self.estimator: Estimator | None = None
        self._init_samples: list[ImuSample] = []
        self._frame_queue: list[LidarFrame] = []
        self.results: list[FrameResult] = []
        self.skipped_frames = 0

    @property
    def initialized(self) -> bool:
        return self.estimator is not None

    # -- feeding --------------------------------------------------------------

    def push_imu(self, sample: ImuSample) -> None:
        if self.initialized:
            self.buffer.push(sample)
            self._drain()
            return
        self._init_samples.append(sample)
        span = self._init_samples[-1].t - self._init_samples[0].t
        if span >= INIT_WINDOW:
            self._try_initialize()
            if not self.initialized and span > INIT_TIMEOUT:
                raise EstimatorError("no static window found for INS initialization")

    def push_frame(self, frame: LidarFrame) -> None:
        self._frame_queue.append(frame)
        if self.initialized:
            self._drain()

    def _try_initialize(self) -> None:
        window = [s for s in self._init_samples
                  if s.t >= self._init_samples[-1].t - INIT_WINDOW]
        try:
            roll, pitch = init_attitude_from_accel(window)
        except ValueError:
            self._init_samples = window
            return
        state = initial_nav_state(window[-1].t, roll, pitch)
        if detect_zero_velocity(window):
            state.bg = estimate_gyro_bias_static(window)
        self.buffer = InsPoseBuffer(self.gravity)
        self.buffer.start(state, window[-1])
        self.estimator = Estimator(self.est_config, self.buffer,
                                   self._init_ext, self._init_td)
        self._init_samples = []
        logger.info("INS initialized at t=%.3f (roll %.3f, pitch %.3f)",
                    state.t, roll, pitch)

    def _drain(self) -> None:
        while self._frame_queue:
            frame = self._frame_queue[0]
            t_d = self.estimator.t_d
            if len(frame) == 0:
                self._frame_queue.pop(0)
                self.skipped_frames += 1
                continue
            hi = frame.stamp + float(frame.t_offsets.max()) + t_d
            lo = frame.stamp + t_d
            if hi < self.buffer.t_start:          # frame predates initialization
                self._frame_queue.pop(0)
                self.skipped_frames += 1
                continue
            if lo < self.buffer.t_start or hi > self.buffer.t_end:
                if lo < self.buffer.t_start:      # partially before the buffer
                    self._frame_queue.pop(0)
                    self.skipped_frames += 1
                    continue
                return                            # wait for more IMU
            self._frame_queue.pop(0)
            try:
                result = self.estimator.process_frame(frame)
            except EstimatorError as exc:
                logger.warning("frame at %.3f skipped: %s", frame.stamp, exc)
                self.skipped_frames += 1
                continue
            if result is not None:
                self.results.append(result)

    # -- outputs ---------------------------------------------------------------

    def trajectory(self) -> list[TrajectoryRecord]:
        return [TrajectoryRecord(r.t, r.pose.translation, r.pose.rotation)
                for r in self.results]

    def keyframe_results(self) -> list[FrameResult]:
        return [r for r in self.results if r.is_keyframe]


def run_streams(pipeline: OdometryPipeline, samples: list[ImuSample],
                frames: list[LidarFrame]) -> None:
    """Feed merged streams in time order (frames after their covering IMU)."""
    fi = 0
    margin = 0.12  # frame period + max calibratable delay
    for s in samples:
        while fi < len(frames) and frames[fi].stamp + margin <= s.t:
            pipeline.push_frame(frames[fi])
            fi += 1
        pipeline.push_imu(s)
    while fi < len(frames):
        pipeline.push_frame(frames[fi])
        fi += 1


@dataclass
class RunReport:
    n_imu: int
    n_frames: int
    n_keyframes: int
    n_skipped: int
    duration_s: float
    wall_time_s: float
    outputs: dict[str, str] = field(default_factory=dict)
    metrics: EvalMetrics | None = None
    final_calibration: dict[str, float] = field(default_factory=dict)


def run_pipeline(config: RunConfig) -> RunReport:
    """Load a dataset, run odometry, and write all outputs."""
    config.validate()
    samples = load_imu(config.imu_path)
    if not samples:
        raise ValueError(f"IMU file {config.imu_path} holds no samples")
    frames = load_lidar(config.lidar_dir, config.frame_period)
    ext, td = initial_calibration(config)
    pipeline = OdometryPipeline(estimator_config_from_run(config), ext, td)

    t0 = time.perf_counter()
    run_streams(pipeline, samples, frames)
    wall = time.perf_counter() - t0

    os.makedirs(config.output_dir, exist_ok=True)
    paths = {
        "trajectory": os.path.join(config.output_dir, "trajectory.txt"),
        "attitude_std": os.path.join(config.output_dir, "attitude_std.txt"),
        "calibration": os.path.join(config.output_dir, "calibration.txt"),
    }
    save_trajectory(paths["trajectory"], pipeline.trajectory())
    kf = pipeline.keyframe_results()
    save_attitude_std(paths["attitude_std"],
                      [(r.t, r.attitude_std_deg) for r in kf])
    save_calibration_history(
        paths["calibration"],
        [(r.t, r.calibration.euler_deg, r.calibration.lever, r.calibration.t_d_ms)
         for r in kf],
    )

    metrics = None
    if config.truth_path:
        from .dataio import load_trajectory

        truth = load_trajectory(config.truth_path)
        metrics = evaluate(pipeline.trajectory(), truth)
        paths["metrics"] = os.path.join(config.output_dir, "metrics.txt")
        save_keyvalues(paths["metrics"], {
            "ate_m": metrics.ate_m,
            "are_deg": metrics.are_deg,
            "end_to_end_m": metrics.end_to_end_m,
            "n_poses": metrics.n_poses,
        })

    calib = {}
    if kf:
        last = kf[-1].calibration
        calib = {
            "ext_euler_x_deg": float(last.euler_deg[0]),
            "ext_euler_y_deg": float(last.euler_deg[1]),
            "ext_euler_z_deg": float(last.euler_deg[2]),
            "lever_x_m": float(last.lever[0]),
            "lever_y_m": float(last.lever[1]),
            "lever_z_m": float(last.lever[2]),
            "t_d_ms": float(last.t_d_ms),
        }
    duration = samples[-1].t - samples[0].t
    return RunReport(len(samples), len(frames), len(kf),
                     pipeline.skipped_frames, duration, wall, paths, metrics, calib)


@dataclass
class SimReport:
    scenario: str
    seed: int
    n_imu: int
    n_frames: int
    duration_s: float
    outputs: dict[str, str] = field(default_factory=dict)


def simulate_scenario(name: str, seed: int, out_dir: str,
                      duration: float | None = None,
                      noiseless: bool = False,
                      ext_euler_deg: tuple = (0.0, 0.0, 0.0),
                      ext_lever: tuple = (0.0, 0.0, 0.0),
                      time_delay: float = 0.0) -> SimReport:
    """Generate a scenario dataset on disk, plus truth and a ready config."""
    scenario = make_scenario(name, seed=seed, duration=duration, noiseless=noiseless)
    if any(ext_euler_deg) or any(ext_lever) or time_delay:
        scenario.rig.extrinsics = ExtrinsicState(
            np.asarray(ext_lever, dtype=float),
            euler_to_quat(*np.deg2rad(np.asarray(ext_euler_deg, dtype=float))),
        )
        scenario.rig.time_delay = TimeDelay(time_delay)
    data = scenario.synthesize()
    return write_sim_data(data, out_dir)


def write_sim_data(data: SimData, out_dir: str) -> SimReport:
    os.makedirs(out_dir, exist_ok=True)
    scenario = data.scenario
    paths = {
        "imu": os.path.join(out_dir, "imu.txt"),
        "lidar": os.path.join(out_dir, "frames"),
        "truth": os.path.join(out_dir, "truth.txt"),
        "config": os.path.join(out_dir, "config.txt"),
        "truth_calibration": os.path.join(out_dir, "truth_calibration.txt"),
    }
    save_imu(paths["imu"], data.imu)
    save_lidar(paths["lidar"], data.frames)
    save_trajectory(paths["truth"],
                    [TrajectoryRecord(s.t, s.p, s.q) for s in data.truth])

    rig = scenario.rig
    cfg = RunConfig(
        imu_path=paths["imu"],
        lidar_dir=paths["lidar"],
        output_dir=os.path.join(out_dir, "out"),
        truth_path=paths["truth"],
        frame_period=1.0 / rig.lidar_rate,
        gyro_noise=max(rig.noise.gyro_noise, 1e-6),
        accel_noise=max(rig.noise.accel_noise, 1e-5),
        gyro_bias_walk=max(rig.noise.gyro_bias_walk, 1e-8),
        accel_bias_walk=max(rig.noise.accel_bias_walk, 1e-7),
        seed=scenario.seed,
    )
    cfg.to_file(paths["config"])
    true_euler = np.rad2deg(quat_to_euler(rig.extrinsics.q_r_b))
    save_keyvalues(paths["truth_calibration"], {
        "ext_euler_deg": true_euler,
        "ext_lever_m": rig.extrinsics.p_br,
        "t_d_s": rig.time_delay.t_d,
    })
    return SimReport(scenario.name, scenario.seed, len(data.imu), len(data.frames),
                     scenario.traj.duration, paths)
