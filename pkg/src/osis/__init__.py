"""One-stage instance segmentation for 3D point clouds."""

__version__ = "0.1.0"
