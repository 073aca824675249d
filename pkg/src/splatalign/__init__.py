"""Depth-only camera localization against 3D Gaussian scenes.

Renders metric depth from a fixed set of 3D Gaussians through a
differentiable tile rasterizer and recovers 6-DoF camera poses by
gradient descent on a masked depth + contour objective.
"""

__version__ = "0.1.0"

from .geom import CameraIntrinsics, Pose, Quaternion  # noqa: F401
from .renderer import Gaussian, GaussianScene, RenderConfig, RenderOutput, render  # noqa: F401
