"""Deterministic desk-scale simulation of a human-to-robot handover pipeline."""

from handover_sim.geometry import CameraIntrinsics, DepthImage, Pose

__all__ = ["CameraIntrinsics", "DepthImage", "Pose"]

__version__ = "0.1.0"
