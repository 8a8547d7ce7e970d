"""Collaborative dense RGB-D reconstruction: sub-scene mapping, inter-agent relocalisation and pose-graph alignment."""

from .se3 import RigidTransform, compose, dqb_blend, error_vector, invert, pose_distance
from .volume import CameraIntrinsics, TsdfVolume

__all__ = [
    "CameraIntrinsics",
    "RigidTransform",
    "TsdfVolume",
    "compose",
    "dqb_blend",
    "error_vector",
    "invert",
    "pose_distance",
]
__version__ = "0.1.0"
