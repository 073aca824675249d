"""Differentiable depth splatting: 3D->2D projection and tiled compositing.

The forward pass projects each Gaussian to a screen-space ellipse, sorts by
camera depth, bins footprints into 16x16 tiles, and composites depth and
opacity front to back. The per-tile candidate lists (and how far each tile
advanced) are retained so the backward pass can replay compositing in
reverse without re-running culling.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._kernels import composite_forward
from .errors import InternalConsistencyError
from .geom import CameraIntrinsics, Pose, Quaternion, quat_array_to_rotmats, quat_to_rotmat

_DTYPES = {"f64": np.float64, "f32": np.float32}


@dataclass(frozen=True)
class RenderConfig:
    """Rasterizer constants; every field is config-exposed."""

    dilation: float = 0.3            # px^2 added to 2D covariance diagonals (low-pass)
    alpha_clamp_max: float = 0.999   # keeps transmittance strictly positive
    transmittance_eps: float = 1e-4  # stop compositing below this much remaining light
    sigma_cutoff: float = 4.5        # quadratic-form cutoff, ~3 sigma ellipse
    alpha_floor: float = 1e-3        # accumulated alpha at or below is masked out
    near_sigma_margin: float = 3.0   # cull Gaussians within this many sigmas of the
    #                                  near plane; their affine footprints blow up
    tile_size: int = 16
    precision: str = "f64"

    @property
    def np_dtype(self):
        try:
            return _DTYPES[self.precision]
        except KeyError:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}") from None


@dataclass(frozen=True)
class Gaussian:
    """One anisotropic 3D Gaussian: mean, per-axis std, orientation, opacity."""

    mean: np.ndarray
    scale: np.ndarray
    orientation: Quaternion
    opacity: float

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64).reshape(3))


class GaussianScene:
    """Immutable, array-backed set of Gaussians plus a world normalization transform.

    `world_transform` maps the original world frame to the frame the Gaussians
    live in (identity unless the scene was built with PCA normalization).
    """

    def __init__(self, means, scales, quats, opacities, world_transform: Pose | None = None):
        self.means = np.ascontiguousarray(means, dtype=np.float64).reshape(-1, 3)
        self.scales = np.ascontiguousarray(scales, dtype=np.float64).reshape(-1, 3)
        self.quats = np.ascontiguousarray(quats, dtype=np.float64).reshape(-1, 4)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float64).reshape(-1)
        self.world_transform = world_transform if world_transform is not None else Pose.identity()
        n = len(self.means)
        if n == 0:
            raise ValueError("scene must contain at least one Gaussian")
        if not (len(self.scales) == len(self.quats) == len(self.opacities) == n):
            raise ValueError("scene arrays must share a common length")
        if np.any(self.scales <= 0):
            raise ValueError("Gaussian scales must be positive")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ValueError("opacities must lie in [0, 1]")
        norms = np.linalg.norm(self.quats, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("Gaussian orientations must be unit quaternions")
        R = quat_array_to_rotmats(self.quats)
        RS = R * self.scales[:, None, :]
        # Sigma = R S S^T R^T, symmetric PD by construction
        self.covariances = np.einsum("nij,nkj->nik", RS, RS)
        h = hashlib.blake2b(digest_size=16)
        for arr in (self.means, self.scales, self.quats, self.opacities):
            h.update(arr.tobytes())
        h.update(self.world_transform.rotation.as_array().tobytes())
        h.update(self.world_transform.translation.tobytes())
        self.digest = h.hexdigest()

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian], world_transform: Pose | None = None):
        return cls(
            np.array([g.mean for g in gaussians]),
            np.array([g.scale for g in gaussians]),
            np.array([g.orientation.as_array() for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
            world_transform,
        )

    def __len__(self) -> int:
        return len(self.means)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            self.means[i], self.scales[i], Quaternion.from_array(self.quats[i]), float(self.opacities[i])
        )


@dataclass(frozen=True)
class ProjectedGaussian:
    """Screen-space footprint of one Gaussian (pixels; depth in meters)."""

    mean2d: np.ndarray       # (2,) pixel center of the projected Gaussian
    cov2d: np.ndarray        # (2, 2) screen covariance, dilation included
    depth: float             # camera-frame z of the 3D mean
    conic: np.ndarray        # (2, 2) inverse of cov2d
    radius: float            # ~3 sigma footprint radius, pixels
    visible: bool
    opacity: float


@dataclass
class _ProjArrays:
    """Vectorized projection results; all 1-D arrays align with the scene."""

    cam: np.ndarray        # (N, 3) camera-frame means
    u: np.ndarray
    v: np.ndarray
    cov_a: np.ndarray      # packed 2D covariance [[a, b], [b, c]]
    cov_b: np.ndarray
    cov_c: np.ndarray
    con_a: np.ndarray      # packed conic (inverse covariance)
    con_b: np.ndarray
    con_c: np.ndarray
    depth: np.ndarray
    radius: np.ndarray
    opacity: np.ndarray
    visible: np.ndarray    # bool


@dataclass
class RenderContext:
    """Everything the backward pass needs to replay compositing in reverse."""

    proj: _ProjArrays
    pair_gid: np.ndarray     # Gaussian id per (tile, contributor) pair, depth-sorted per tile
    tile_bounds: np.ndarray  # (n_tiles + 1,) offsets into pair_gid, raster tile order
    processed: np.ndarray    # (n_tiles,) candidate rows actually consumed per tile
    tile_grid: tuple         # (ntx, nty)
    cfg: RenderConfig
    K: CameraIntrinsics
    D: np.ndarray
    A: np.ndarray
    pose_params: tuple | None = None   # (qw, qx, qy, qz, tx, ty, tz) of the render pose
    scene_digest: str | None = None


@dataclass
class RenderOutput:
    """Composited depth D, accumulated alpha, normalized depth, validity mask."""

    depth: np.ndarray
    alpha: np.ndarray
    norm_depth: np.ndarray
    mask: np.ndarray
    backward_ctx: RenderContext | None = None


def _project_arrays(scene: GaussianScene, K: CameraIntrinsics, pose: Pose, cfg: RenderConfig) -> _ProjArrays:
    dt = cfg.np_dtype
    W = quat_to_rotmat(pose.rotation).astype(dt)
    t = pose.translation.astype(dt)
    means = scene.means.astype(dt, copy=False)
    cam = means @ W.T + t
    n = len(scene)
    z = cam[:, 2]
    near_cut = K.near + cfg.near_sigma_margin * scene.scales.max(axis=1)
    visible = (z > near_cut) & (z < K.far)

    cols = {name: np.zeros(n, dtype=dt) for name in
            ("u", "v", "cov_a", "cov_b", "cov_c", "con_a", "con_b", "con_c", "depth", "radius")}

    idx = np.flatnonzero(visible)
    if idx.size:
        x, y, zi = cam[idx, 0], cam[idx, 1], cam[idx, 2]
        u = K.fx * x / zi + K.cx
        v = K.fy * y / zi + K.cy

        J = np.zeros((idx.size, 2, 3), dtype=dt)
        J[:, 0, 0] = K.fx / zi
        J[:, 0, 2] = -K.fx * x / (zi * zi)
        J[:, 1, 1] = K.fy / zi
        J[:, 1, 2] = -K.fy * y / (zi * zi)

        covw = scene.covariances[idx].astype(dt, copy=False)
        camcov = np.einsum("ab,nbc,dc->nad", W, covw, W)
        full = np.einsum("nij,njk,nlk->nil", J, camcov, J)
        a = full[:, 0, 0] + cfg.dilation
        b = full[:, 0, 1]
        c = full[:, 1, 1] + cfg.dilation
        det = a * c - b * b
        if np.any(det <= 1e-12):
            raise InternalConsistencyError("projected covariance not positive definite")

        mid = 0.5 * (a + c)
        lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
        r = np.ceil(3.0 * np.sqrt(lam_max))

        inside = (u + r >= 0) & (u - r <= K.width - 1) & (v + r >= 0) & (v - r <= K.height - 1)
        cols["u"][idx] = u
        cols["v"][idx] = v
        cols["cov_a"][idx], cols["cov_b"][idx], cols["cov_c"][idx] = a, b, c
        cols["con_a"][idx] = c / det
        cols["con_b"][idx] = -b / det
        cols["con_c"][idx] = a / det
        cols["depth"][idx] = zi
        cols["radius"][idx] = r
        visible[idx[~inside]] = False

    return _ProjArrays(cam=cam, opacity=scene.opacities.astype(dt, copy=False), visible=visible, **cols)


def project_gaussians(
    scene: GaussianScene, K: CameraIntrinsics, pose: Pose, cfg: RenderConfig | None = None
) -> list[ProjectedGaussian]:
    """Project every Gaussian; invisible ones carry visible=False and zeroed fields."""
    cfg = cfg or RenderConfig()
    p = _project_arrays(scene, K, pose, cfg)
    out = []
    for i in range(len(scene)):
        out.append(
            ProjectedGaussian(
                mean2d=np.array([p.u[i], p.v[i]], dtype=np.float64),
                cov2d=np.array([[p.cov_a[i], p.cov_b[i]], [p.cov_b[i], p.cov_c[i]]], dtype=np.float64),
                depth=float(p.depth[i]),
                conic=np.array([[p.con_a[i], p.con_b[i]], [p.con_b[i], p.con_c[i]]], dtype=np.float64),
                radius=float(p.radius[i]),
                visible=bool(p.visible[i]),
                opacity=float(p.opacity[i]),
            )
        )
    return out


def _depth_sorted_ids(proj: _ProjArrays) -> np.ndarray:
    """Visible Gaussian ids sorted by ascending depth; ties keep original order."""
    vis = np.flatnonzero(proj.visible)
    order = np.argsort(proj.depth[vis], kind="stable")
    return vis[order]


def _tile_pairs(proj: _ProjArrays, sorted_ids: np.ndarray, K: CameraIntrinsics, cfg: RenderConfig):
    """Depth-ordered (tile, Gaussian) candidate lists for every touched tile."""
    T = cfg.tile_size
    ntx = (K.width + T - 1) // T
    nty = (K.height + T - 1) // T
    n_tiles = ntx * nty
    if sorted_ids.size == 0:
        return ntx, nty, np.empty(0, np.int64), np.zeros(n_tiles + 1, np.int64)

    u = proj.u[sorted_ids]
    v = proj.v[sorted_ids]
    r = proj.radius[sorted_ids]
    tx0 = np.clip(np.floor((u - r) / T), 0, ntx - 1).astype(np.int64)
    tx1 = np.clip(np.floor((u + r) / T), 0, ntx - 1).astype(np.int64)
    ty0 = np.clip(np.floor((v - r) / T), 0, nty - 1).astype(np.int64)
    ty1 = np.clip(np.floor((v + r) / T), 0, nty - 1).astype(np.int64)

    nx = tx1 - tx0 + 1
    counts = nx * (ty1 - ty0 + 1)
    total = int(counts.sum())
    pos = np.repeat(np.arange(sorted_ids.size, dtype=np.int64), counts)
    offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
    k = np.arange(total, dtype=np.int64) - offsets[pos]
    nx_r = nx[pos]
    tile_x = tx0[pos] + k % nx_r
    tile_y = ty0[pos] + k // nx_r
    tile_id = tile_y * ntx + tile_x

    # stable sort keeps ascending pos (hence depth order) within each tile
    order = np.argsort(tile_id, kind="stable")
    pair_gid = sorted_ids[pos[order]]
    tile_bounds = np.searchsorted(tile_id[order], np.arange(n_tiles + 1)).astype(np.int64)
    return ntx, nty, pair_gid, tile_bounds


def _rasterize_core(proj: _ProjArrays, K: CameraIntrinsics, cfg: RenderConfig):
    dt = cfg.np_dtype
    sorted_ids = _depth_sorted_ids(proj)
    ntx, nty, pair_gid, tile_bounds = _tile_pairs(proj, sorted_ids, K, cfg)
    D = np.zeros((K.height, K.width), dtype=dt)
    A = np.zeros((K.height, K.width), dtype=dt)
    processed = np.zeros(ntx * nty, dtype=np.int64)
    if pair_gid.size:
        composite_forward(
            pair_gid, tile_bounds, ntx, cfg.tile_size, K.height, K.width,
            proj.u, proj.v, proj.con_a, proj.con_b, proj.con_c, proj.depth, proj.opacity,
            cfg.sigma_cutoff, cfg.alpha_clamp_max, cfg.transmittance_eps,
            D, A, processed,
        )
    mask = A > cfg.alpha_floor
    norm = np.zeros_like(D)
    np.divide(D, A, out=norm, where=mask)
    return D, A, norm, mask, pair_gid, tile_bounds, processed, (ntx, nty)


def _projected_list_to_arrays(projected: Sequence[ProjectedGaussian], dt) -> _ProjArrays:
    n = len(projected)
    cam = np.zeros((n, 3), dtype=dt)
    depth = np.ascontiguousarray([p.depth for p in projected], dtype=dt)
    cam[:, 2] = depth
    return _ProjArrays(
        cam=cam,
        u=np.ascontiguousarray([p.mean2d[0] for p in projected], dtype=dt),
        v=np.ascontiguousarray([p.mean2d[1] for p in projected], dtype=dt),
        cov_a=np.ascontiguousarray([p.cov2d[0, 0] for p in projected], dtype=dt),
        cov_b=np.ascontiguousarray([p.cov2d[0, 1] for p in projected], dtype=dt),
        cov_c=np.ascontiguousarray([p.cov2d[1, 1] for p in projected], dtype=dt),
        con_a=np.ascontiguousarray([p.conic[0, 0] for p in projected], dtype=dt),
        con_b=np.ascontiguousarray([p.conic[0, 1] for p in projected], dtype=dt),
        con_c=np.ascontiguousarray([p.conic[1, 1] for p in projected], dtype=dt),
        depth=depth,
        radius=np.ascontiguousarray([p.radius for p in projected], dtype=dt),
        opacity=np.ascontiguousarray([p.opacity for p in projected], dtype=dt),
        visible=np.ascontiguousarray([p.visible for p in projected], dtype=bool),
    )


def rasterize_depth(
    projected: Sequence[ProjectedGaussian], K: CameraIntrinsics, cfg: RenderConfig | None = None
) -> RenderOutput:
    """Composite already-projected Gaussians. Sorts by depth internally.

    The returned context can replay compositing but is not tied to a scene or
    pose; use render() when pose gradients are needed downstream.
    """
    cfg = cfg or RenderConfig()
    proj = _projected_list_to_arrays(projected, cfg.np_dtype)
    D, A, norm, mask, pair_gid, tile_bounds, processed, grid = _rasterize_core(proj, K, cfg)
    ctx = RenderContext(proj, pair_gid, tile_bounds, processed, grid, cfg, K, D, A)
    return RenderOutput(D, A, norm, mask, ctx)


def render(
    scene: GaussianScene, K: CameraIntrinsics, pose: Pose, cfg: RenderConfig | None = None
) -> RenderOutput:
    """Project then rasterize; the context is bound to (scene, K, pose) for backward."""
    cfg = cfg or RenderConfig()
    proj = _project_arrays(scene, K, pose, cfg)
    D, A, norm, mask, pair_gid, tile_bounds, processed, grid = _rasterize_core(proj, K, cfg)
    params = tuple(pose.rotation.as_array()) + tuple(pose.translation)
    ctx = RenderContext(proj, pair_gid, tile_bounds, processed, grid, cfg, K, D, A, params, scene.digest)
    return RenderOutput(D, A, norm, mask, ctx)
