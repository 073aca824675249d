"""Build evaluation scenes from posed depth images.

Pipeline: back-project every frame, statistically filter outliers, optionally
voxel-downsample, PCA-normalize the frame (rotation + centering only, no
scaling), then instantiate isotropic opacity-1 Gaussians with kNN-derived
scales. The PCA rigid transform is stored on the scene so all user-facing
poses stay in the original world frame.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .dataio import DepthImage
from .errors import DegenerateCloudError
from .geom import CameraIntrinsics, Pose, Quaternion, pose_inverse, quat_from_rotmat
from .renderer import GaussianScene

logger = logging.getLogger(__name__)

SCENE_MAGIC = b"GSCN"
SCENE_VERSION = 1
MIN_SCALE = 1e-4  # meters; floor for degenerate kNN scales


@dataclass(frozen=True)
class SceneBuildConfig:
    outlier_k: int = 20
    outlier_std_ratio: float = 2.0
    knn_k: int = 4                 # includes the query point itself
    voxel_size: float = 0.01
    voxel_enabled: bool = False    # off by default: full fidelity
    pca_enabled: bool = True
    frame_stride: int = 1

    def __post_init__(self):
        if self.outlier_k < 1 or self.knn_k < 2:
            raise ValueError("neighbor counts out of range")
        if self.voxel_size <= 0 or self.outlier_std_ratio <= 0 or self.frame_stride < 1:
            raise ValueError("invalid scene build parameter")


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)


def backproject(depth: DepthImage, K: CameraIntrinsics, pose: Pose) -> PointCloud:
    """Lift valid pixels with depth in (near, far) to world-frame points."""
    vv, uu = np.nonzero(depth.valid)
    z = depth.depth[vv, uu]
    keep = (z > K.near) & (z < K.far)
    vv, uu, z = vv[keep], uu[keep], z[keep]
    x = (uu - K.cx) * z / K.fx
    y = (vv - K.cy) * z / K.fy
    cam = np.column_stack([x, y, z])
    inv = pose_inverse(pose)
    return PointCloud(cam @ inv.rotation_matrix().T + inv.translation)


def filter_outliers(cloud: PointCloud, k: int = 20, std_ratio: float = 2.0) -> PointCloud:
    """Statistical outlier removal on mean k-nearest-neighbor distance.

    Points whose mean distance to their k nearest neighbors exceeds
    (global mean + std_ratio * global std) are dropped. Clouds of size <= k
    pass through unchanged with a warning.
    """
    n = len(cloud)
    if n <= k:
        logger.warning("outlier filter skipped: cloud of %d points <= k=%d", n, k)
        return cloud
    tree = cKDTree(cloud.points)
    dists, _ = tree.query(cloud.points, k=k + 1)  # first neighbor is the point itself
    mean_d = dists[:, 1:].mean(axis=1)
    thresh = mean_d.mean() + std_ratio * mean_d.std()
    keep = mean_d <= thresh
    return PointCloud(cloud.points[keep])


def knn_scales(cloud: PointCloud, k: int = 4) -> np.ndarray:
    """Isotropic scale per point: sqrt(mean squared distance to the 3 nearest
    distinct neighbors); k counts the query point itself.

    Coincident points would give zero scale and are clamped to MIN_SCALE.
    """
    n = len(cloud)
    if n <= k:
        raise ValueError(f"need more than {k} points, got {n}")
    tree = cKDTree(cloud.points)
    dists, _ = tree.query(cloud.points, k=k)
    sigma = np.sqrt((dists[:, 1:] ** 2).mean(axis=1))
    degenerate = sigma < MIN_SCALE
    if degenerate.any():
        logger.warning("%d degenerate kNN scales clamped to %g m", int(degenerate.sum()), MIN_SCALE)
        sigma = np.maximum(sigma, MIN_SCALE)
    return sigma


def pca_normalize(cloud: PointCloud) -> tuple[PointCloud, Pose]:
    """Center the cloud and align its principal axes with the coordinate axes.

    Rows of the rotation are covariance eigenvectors by descending eigenvalue,
    sign-fixed so each row's largest-magnitude entry is positive, then the
    last row is flipped if needed for det = +1. No scaling. Returns the
    normalized cloud and the Pose mapping original -> normalized coordinates.
    """
    if len(cloud) < 3:
        raise DegenerateCloudError(f"PCA requires >= 3 points, got {len(cloud)}")
    mean = cloud.points.mean(axis=0)
    centered = cloud.points - mean
    cov = centered.T @ centered / len(cloud)
    evals, evecs = np.linalg.eigh(cov)
    # planar clouds (rank 2) are fine; below rank 2 the principal frame is
    # arbitrary in two axes and normalization is meaningless
    if evals[-1] <= 0 or evals[1] / evals[-1] < 1e-12:
        raise DegenerateCloudError("rank-deficient covariance; cloud is degenerate")
    R = evecs[:, ::-1].T  # rows = eigenvectors, descending eigenvalue
    for i in range(3):
        if R[i, np.argmax(np.abs(R[i]))] < 0:
            R[i] = -R[i]
    if np.linalg.det(R) < 0:
        R[2] = -R[2]
    transform = Pose(quat_from_rotmat(R), -(R @ mean))
    return PointCloud(centered @ R.T), transform


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Average points per voxel; output ordered by voxel key for determinism."""
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud.points)
    return PointCloud(sums / counts[:, None])


def build_scene(
    frames: list[tuple[DepthImage, Pose]],
    K: CameraIntrinsics,
    cfg: SceneBuildConfig | None = None,
) -> GaussianScene:
    """Merge back-projections into an isotropic, opacity-1 Gaussian scene."""
    cfg = cfg or SceneBuildConfig()
    if not frames:
        raise ValueError("need at least one posed frame")
    clouds = [backproject(img, K, pose).points for img, pose in frames[:: cfg.frame_stride]]
    merged = PointCloud(np.concatenate(clouds))
    if len(merged) == 0:
        raise DegenerateCloudError("no valid depth pixels to back-project")
    cloud = filter_outliers(merged, cfg.outlier_k, cfg.outlier_std_ratio)
    if cfg.voxel_enabled:
        cloud = voxel_downsample(cloud, cfg.voxel_size)
    if len(cloud) == 0:
        raise DegenerateCloudError("all points removed during filtering")
    if cfg.pca_enabled:
        cloud, world_transform = pca_normalize(cloud)
    else:
        world_transform = Pose.identity()
    sigma = knn_scales(cloud, cfg.knn_k)
    n = len(cloud)
    return GaussianScene(
        cloud.points,
        np.repeat(sigma[:, None], 3, axis=1),
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.ones(n),
        world_transform,
    )


# ---------------------------------------------------------------------------
# scene file format: magic, version u32, count u64, then per-Gaussian records
# (mean 3xf64, scale 3xf64, quat 4xf64, opacity f64), then the world transform
# as quaternion 4xf64 + translation 3xf64.


def save_scene(path, scene: GaussianScene) -> None:
    with open(path, "wb") as f:
        f.write(SCENE_MAGIC)
        f.write(struct.pack("<IQ", SCENE_VERSION, len(scene)))
        rec = np.hstack([scene.means, scene.scales, scene.quats, scene.opacities[:, None]])
        f.write(np.ascontiguousarray(rec, dtype="<f8").tobytes())
        wt = scene.world_transform
        f.write(np.asarray(list(wt.rotation.as_array()) + list(wt.translation), dtype="<f8").tobytes())


def load_scene(path) -> GaussianScene:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SCENE_MAGIC:
            raise ValueError(f"{path}: not a scene file (magic {magic!r})")
        version, count = struct.unpack("<IQ", f.read(12))
        if version != SCENE_VERSION:
            raise ValueError(f"{path}: unsupported scene version {version}")
        rec = np.frombuffer(f.read(count * 11 * 8), dtype="<f8").reshape(count, 11)
        wt = np.frombuffer(f.read(7 * 8), dtype="<f8")
    transform = Pose(Quaternion.from_array(wt[:4]), wt[4:7])
    return GaussianScene(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10], transform)


def scene_summary(scene: GaussianScene) -> dict:
    """Human-readable stats for the JSON sidecar."""
    sigma = scene.scales[:, 0]
    return {
        "n_gaussians": len(scene),
        "bounds_min": scene.means.min(axis=0).tolist(),
        "bounds_max": scene.means.max(axis=0).tolist(),
        "sigma_min": float(sigma.min()),
        "sigma_median": float(np.median(sigma)),
        "sigma_max": float(sigma.max()),
        "world_transform": {
            "quaternion_wxyz": scene.world_transform.rotation.as_array().tolist(),
            "translation": scene.world_transform.translation.tolist(),
        },
    }


def write_scene_summary(path, scene: GaussianScene) -> None:
    with open(path, "w") as f:
        json.dump(scene_summary(scene), f, indent=2)
        f.write("\n")
