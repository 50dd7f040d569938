"""Frame-to-frame solid-state LiDAR-inertial odometry.

Tightly couples IMU preintegration and LiDAR point-to-plane measurements in
a sliding-window factor-graph optimizer, with online calibration of the
LiDAR-IMU extrinsics and time delay. Ships with a synthetic plane-world
simulator, a batch pipeline, and a FastAPI service front end.
"""

__version__ = "0.1.0"
