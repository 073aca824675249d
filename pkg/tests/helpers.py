"""Shared fixtures-in-code for renderer and gradient tests."""

import numpy as np

from splatalign.geom import CameraIntrinsics, Pose, Quaternion, quat_normalize
from splatalign.renderer import GaussianScene


def small_intrinsics(width=64, height=64, f=60.0, near=0.05, far=50.0):
    return CameraIntrinsics(
        fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2,
        width=width, height=height, near=near, far=far,
    )


def random_unit_quat(rng):
    return quat_normalize(Quaternion(*rng.normal(size=4)))


def random_scene(rng, n_gaussians, spread=1.2, z_range=(1.5, 4.0), scale_range=(0.03, 0.25),
                 opacity_range=(0.2, 1.0), oriented=True):
    """Random Gaussians in front of the identity camera."""
    means = np.column_stack([
        rng.uniform(-spread, spread, n_gaussians),
        rng.uniform(-spread, spread, n_gaussians),
        rng.uniform(*z_range, n_gaussians),
    ])
    scales = rng.uniform(*scale_range, size=(n_gaussians, 3))
    if oriented:
        quats = rng.normal(size=(n_gaussians, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    else:
        quats = np.tile([1.0, 0.0, 0.0, 0.0], (n_gaussians, 1))
    opac = rng.uniform(*opacity_range, n_gaussians)
    return GaussianScene(means, scales, quats, opac)


def jittered_pose(rng, angle_scale_deg=8.0, t_scale=0.15):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.radians(rng.uniform(0, angle_scale_deg))
    q = Quaternion(np.cos(ang / 2), *(np.sin(ang / 2) * axis))
    return Pose(q, rng.uniform(-t_scale, t_scale, size=3))
