"""Differentiable 3D Gaussian splatting for equirectangular (360 degree) images."""

from omnisplat.core import (
    CameraPose,
    DegenerateDirectionError,
    ErpImage,
    GaussianCloud,
    InvalidParameterError,
    Splat2D,
    TrainState,
    build_covariance,
    quaternion_to_rotation,
)
from omnisplat.backward import backward
from omnisplat.rasterizer import render, render_reference


__version__ = "0.1.0"

__all__ = [
    "CameraPose",
    "DegenerateDirectionError",
    "ErpImage",
    "GaussianCloud",
    "InvalidParameterError",
    "Splat2D",
    "TrainState",
    "backward",
    "build_covariance",
    "quaternion_to_rotation",
    "render",
    "render_reference",
]
