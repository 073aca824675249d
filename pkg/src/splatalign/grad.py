"""Backward pass: exact pose gradients through the depth renderer.

Reverse traversal of the saved compositing context gives per-Gaussian
gradients w.r.t. screen mean, screen covariance, and depth; the projection
chain then maps those to the camera rotation and translation. A central
finite-difference oracle over the 7 ambient pose parameters validates the
whole chain.

Quaternion convention (shared by backward_pose and the oracle): the loss is
treated as a function of the RAW 4-vector through renormalization, i.e.
L(q_raw) = L_render(q_raw / |q_raw|). At unit norm the analytic gradient is
the tangential projection (I - q q^T) applied to the gradient of the
polynomial rotation formula; the oracle perturbs q_raw in ambient
coordinates and renormalizes before rendering. The optimizer renormalizes
after every step, matching the same extension.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._kernels import composite_backward, discrete_signature_maps
from .errors import NumericError, StaleContextError
from .geom import CameraIntrinsics, Pose, Quaternion, quat_normalize, quat_to_rotmat
from .renderer import GaussianScene, RenderConfig, RenderContext, RenderOutput, render


@dataclass
class PoseGradient:
    """Ambient-space gradient: d_q over raw quaternion components, d_t per meter."""

    d_q: np.ndarray
    d_t: np.ndarray

    def as_params7(self) -> np.ndarray:
        return np.concatenate([self.d_q, self.d_t])


def rotmat_quat_derivatives(q: Quaternion) -> np.ndarray:
    """(4, 3, 3) partials of the polynomial rotation formula w.r.t. (w, x, y, z)."""
    w, x, y, z = q.w, q.x, q.y, q.z
    return 2.0 * np.array([
        [[0, -z, y], [z, 0, -x], [-y, x, 0]],
        [[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
        [[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
        [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
    ], dtype=np.float64)


def _check_ctx(ctx: RenderContext, scene: GaussianScene, K: CameraIntrinsics, pose: Pose) -> None:
    if ctx.scene_digest is None or ctx.pose_params is None:
        raise StaleContextError("context was not produced by render(scene, K, pose)")
    if ctx.scene_digest != scene.digest:
        raise StaleContextError("context was rendered from a different scene")
    params = tuple(pose.rotation.as_array()) + tuple(pose.translation)
    if ctx.pose_params != params:
        raise StaleContextError("context was rendered at a different pose")
    if (ctx.K.fx, ctx.K.fy, ctx.K.cx, ctx.K.cy, ctx.K.width, ctx.K.height) != (
        K.fx, K.fy, K.cx, K.cy, K.width, K.height
    ):
        raise StaleContextError("context was rendered with different intrinsics")


def _first_nonfinite_pixel(arr: np.ndarray):
    bad = ~np.isfinite(arr)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        return int(i), int(j)
    return None


def backward_pose(
    ctx: RenderContext,
    scene: GaussianScene,
    K: CameraIntrinsics,
    pose: Pose,
    dL_dNormD: np.ndarray,
    dL_dAlpha: np.ndarray,
    dL_dDepth: np.ndarray | None = None,
) -> PoseGradient:
    """Pull loss cotangents back to the 7 ambient pose parameters.

    dL_dNormD acts on the normalized depth map and is split into depth/alpha
    cotangents by the quotient rule on masked pixels; dL_dDepth (optional)
    acts on the unnormalized composite directly, for the raw-depth loss mode.
    """
    _check_ctx(ctx, scene, K, pose)
    cfg = ctx.cfg
    D, A = ctx.D, ctx.A
    mask = A > cfg.alpha_floor

    for name, m in (("dL_dNormD", dL_dNormD), ("dL_dAlpha", dL_dAlpha), ("dL_dDepth", dL_dDepth)):
        if m is None:
            continue
        bad = _first_nonfinite_pixel(np.asarray(m))
        if bad is not None:
            raise NumericError(f"non-finite {name} at pixel {bad}")

    dD = np.zeros_like(D)
    dA = np.zeros_like(A)
    if dL_dAlpha is not None:
        dA += np.asarray(dL_dAlpha, dtype=D.dtype)
    if dL_dNormD is not None:
        U = np.asarray(dL_dNormD, dtype=D.dtype)
        safeA = np.where(mask, A, 1.0)
        dD += np.where(mask, U / safeA, 0.0)
        dA -= np.where(mask, U * D / (safeA * safeA), 0.0)
    if dL_dDepth is not None:
        dD += np.asarray(dL_dDepth, dtype=D.dtype)

    proj = ctx.proj
    n = proj.u.size
    g_u = np.zeros(n)
    g_v = np.zeros(n)
    g_cov_a = np.zeros(n)
    g_cov_b = np.zeros(n)
    g_cov_c = np.zeros(n)
    g_dep = np.zeros(n)
    if ctx.pair_gid.size:
        composite_backward(
            ctx.pair_gid, ctx.tile_bounds, ctx.processed, ctx.tile_grid[0],
            cfg.tile_size, K.height, K.width,
            proj.u, proj.v, proj.con_a, proj.con_b, proj.con_c, proj.depth, proj.opacity,
            cfg.sigma_cutoff, cfg.alpha_clamp_max, cfg.transmittance_eps,
            np.ascontiguousarray(dD, dtype=proj.u.dtype),
            np.ascontiguousarray(dA, dtype=proj.u.dtype),
            g_u, g_v, g_cov_a, g_cov_b, g_cov_c, g_dep,
        )

    d_q, d_t = _projection_backward(scene, K, pose, proj, g_u, g_v, g_cov_a, g_cov_b, g_cov_c, g_dep)
    if not (np.all(np.isfinite(d_q)) and np.all(np.isfinite(d_t))):
        raise NumericError("non-finite pose gradient")
    return PoseGradient(d_q, d_t)


def _projection_backward(scene, K, pose, proj, g_u, g_v, g_cov_a, g_cov_b, g_cov_c, g_dep):
    """Chain 2D gradients through projection to (d_q, d_t)."""
    idx = np.flatnonzero(proj.visible)
    if idx.size == 0:
        return np.zeros(4), np.zeros(3)

    cam = proj.cam[idx].astype(np.float64)
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    fx, fy = K.fx, K.fy

    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / (z * z)

    # dL/dSigma_I as full symmetric matrices (off-diagonal gradient split in two)
    G2 = np.zeros((idx.size, 2, 2))
    G2[:, 0, 0] = g_cov_a[idx]
    G2[:, 0, 1] = 0.5 * g_cov_b[idx]
    G2[:, 1, 0] = 0.5 * g_cov_b[idx]
    G2[:, 1, 1] = g_cov_c[idx]

    Wm = quat_to_rotmat(pose.rotation)
    covw = scene.covariances[idx]
    camcov = np.einsum("ab,nbc,dc->nad", Wm, covw, Wm)

    # Sigma_I = J M J^T: dL/dJ = (G + G^T) J M, dL/dM = J^T G J
    dJ = np.einsum("nij,njk,nkl->nil", G2 + G2.transpose(0, 2, 1), J, camcov)
    dM = np.einsum("nji,njk,nkl->nil", J, G2, J)

    # screen mean and depth back to the camera-frame mean
    g_mu2d = np.column_stack([g_u[idx], g_v[idx]])
    g_cam = np.einsum("nji,nj->ni", J, g_mu2d)
    g_cam[:, 2] += g_dep[idx]
    # J's own dependence on the camera-frame mean (incl. the -f*x/z^2 terms)
    inv_z2 = 1.0 / (z * z)
    inv_z3 = inv_z2 / z
    g_cam[:, 0] += dJ[:, 0, 2] * (-fx * inv_z2)
    g_cam[:, 1] += dJ[:, 1, 2] * (-fy * inv_z2)
    g_cam[:, 2] += (
        dJ[:, 0, 0] * (-fx * inv_z2)
        + dJ[:, 1, 1] * (-fy * inv_z2)
        + dJ[:, 0, 2] * (2 * fx * x * inv_z3)
        + dJ[:, 1, 2] * (2 * fy * y * inv_z3)
    )

    # mu_cam = W mu_world + t and Sigma_cam = W Sigma_world W^T
    means_w = scene.means[idx]
    dW = np.einsum("ni,nj->ij", g_cam, means_w)
    dW += np.einsum("nij,jk,nkl->il", dM + dM.transpose(0, 2, 1), Wm, covw)
    d_t = g_cam.sum(axis=0)

    dRk = rotmat_quat_derivatives(pose.rotation)
    dq_ambient = np.einsum("ij,kij->k", dW, dRk)
    qv = pose.rotation.as_array()
    d_q = dq_ambient - qv * float(qv @ dq_ambient)  # tangential projection at |q| = 1
    return d_q, d_t


def _params_to_pose(params: np.ndarray) -> Pose:
    q = quat_normalize(Quaternion(*params[:4]))
    return Pose(q, params[4:7])


def finite_diff_pose_grad(
    scene: GaussianScene,
    K: CameraIntrinsics,
    pose: Pose,
    loss_fn: Callable[[RenderOutput], float],
    eps: float = 1e-5,
    cfg: RenderConfig | None = None,
    return_signatures: bool = False,
):
    """Central differences over the 7 ambient pose parameters.

    Perturbs each raw parameter by +/- eps, renormalizes the quaternion, and
    re-renders; see the module docstring for why this matches backward_pose.
    With return_signatures=True also returns the discrete-structure signature
    of every perturbed render (14 entries) for smoothness screening.
    """
    if not (1e-8 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-8, 1e-3]")
    cfg = cfg or RenderConfig()
    base = np.concatenate([pose.rotation.as_array(), pose.translation])
    g = np.zeros(7)
    sigs = []
    for k in range(7):
        vals = []
        for s in (+1.0, -1.0):
            p = base.copy()
            p[k] += s * eps
            out = render(scene, K, _params_to_pose(p), cfg)
            vals.append(float(loss_fn(out)))
            if return_signatures:
                sigs.append(render_signature(out.backward_ctx))
        g[k] = (vals[0] - vals[1]) / (2 * eps)
    grad = PoseGradient(g[:4], g[4:])
    return (grad, sigs) if return_signatures else grad


def render_signature(ctx: RenderContext) -> str:
    """Hash of a render's discrete structure (branches, not values).

    Two renders with equal signatures composited the same Gaussians in the
    SAME order at every pixel, hit the same alpha clamps and cutoff/
    transmittance stops, and produced the same validity mask, so the loss is
    differentiable between them.
    """
    K, cfg, proj = ctx.K, ctx.cfg, ctx.proj
    considered = np.zeros((K.height, K.width), dtype=np.int64)
    composited = np.zeros_like(considered)
    clamped = np.zeros_like(considered)
    gid_hash = np.zeros((K.height, K.width), dtype=np.uint64)
    if ctx.pair_gid.size:
        discrete_signature_maps(
            ctx.pair_gid, ctx.tile_bounds, ctx.tile_grid[0], cfg.tile_size, K.height, K.width,
            proj.u, proj.v, proj.con_a, proj.con_b, proj.con_c, proj.opacity,
            cfg.sigma_cutoff, cfg.alpha_clamp_max, cfg.transmittance_eps,
            considered, composited, clamped, gid_hash,
        )
    h = hashlib.blake2b(digest_size=16)
    h.update(np.packbits(proj.visible).tobytes())
    h.update(np.packbits(ctx.A > cfg.alpha_floor).tobytes())
    for arr in (considered, composited, clamped, gid_hash):
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class GradCheckResult:
    seed: int
    n_gaussians: int
    resamples: int
    max_rel_err: float
    max_abs_err: float
    passed: bool


def sample_check_scene(rng: np.random.Generator, n_gaussians: int) -> GaussianScene:
    """Random oriented Gaussians in front of the camera (for gradient checks)."""
    means = np.column_stack([
        rng.uniform(-1.0, 1.0, n_gaussians),
        rng.uniform(-1.0, 1.0, n_gaussians),
        rng.uniform(1.5, 4.0, n_gaussians),
    ])
    scales = rng.uniform(0.05, 0.3, size=(n_gaussians, 3))
    quats = rng.normal(size=(n_gaussians, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opac = rng.uniform(0.2, 0.95, n_gaussians)
    return GaussianScene(means, scales, quats, opac)


def _sample_check_pose(rng: np.random.Generator) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.radians(rng.uniform(0.0, 8.0))
    q = Quaternion(float(np.cos(ang / 2)), *(np.sin(ang / 2) * axis))
    return Pose(q, rng.uniform(-0.15, 0.15, size=3))


def run_gradcheck(
    trials: int = 50,
    seed: int = 0,
    precision: str = "f64",
    eps: float = 1e-5,
    image_size: int = 32,
    rel_tol: float | None = None,
    abs_tol: float | None = None,
    max_resamples: int = 30,
) -> list[GradCheckResult]:
    """Compare backward_pose against central differences on random configs.

    Configurations whose finite-difference stencil straddles a discrete
    boundary (footprint cutoff, clamp, transmittance stop, visibility, mask)
    are rejected by signature comparison and resampled, per the documented
    discontinuity caveat.
    """
    if rel_tol is None:
        rel_tol = 1e-4 if precision == "f64" else 1e-2
    if abs_tol is None:
        abs_tol = 1e-8 if precision == "f64" else 1e-5
    cfg = RenderConfig(precision=precision)
    # The oracle always differences the 64-bit forward: f32 forward noise would
    # swamp any usable step size, and the f32 analytic gradient is supposed to
    # approximate the true (64-bit) derivative anyway.
    cfg_oracle = RenderConfig(precision="f64")
    K = CameraIntrinsics(
        fx=float(image_size), fy=float(image_size),
        cx=(image_size - 1) / 2, cy=(image_size - 1) / 2,
        width=image_size, height=image_size, near=0.1, far=50.0,
    )
    results = []
    for trial in range(trials):
        resamples = 0
        while True:
            rng = np.random.default_rng(seed * 1_000_003 + trial * 977 + resamples)
            n_g = int(rng.integers(2, 41))
            scene = sample_check_scene(rng, n_g)
            pose = _sample_check_pose(rng)
            U = rng.normal(size=(image_size, image_size))
            V = rng.normal(size=(image_size, image_size))

            out = render(scene, K, pose, cfg)
            if out.mask.sum() < 4:  # degenerate view, nothing to differentiate
                resamples += 1
                if resamples > max_resamples:
                    raise RuntimeError(f"trial {trial}: could not sample a usable config")
                continue
            base_sig = render_signature(out.backward_ctx)
            if cfg is not cfg_oracle:
                oracle_sig = render_signature(render(scene, K, pose, cfg_oracle).backward_ctx)
                if oracle_sig != base_sig:  # precisions disagree on a boundary
                    resamples += 1
                    if resamples > max_resamples:
                        raise RuntimeError(f"trial {trial}: could not sample a smooth config")
                    continue
                base_sig = oracle_sig

            def loss_fn(o, U=U, V=V):
                return float((U * o.norm_depth).sum() + (V * o.alpha).sum())

            fd, sigs = finite_diff_pose_grad(scene, K, pose, loss_fn, eps, cfg_oracle, return_signatures=True)
            if any(s != base_sig for s in sigs):
                resamples += 1
                if resamples > max_resamples:
                    raise RuntimeError(f"trial {trial}: could not sample a smooth config")
                continue

            an = backward_pose(out.backward_ctx, scene, K, pose, U, V)
            a7 = an.as_params7()
            f7 = fd.as_params7()
            diff = np.abs(a7 - f7)
            scale = np.maximum(np.abs(a7), np.abs(f7))
            rel = np.where(scale > 0, diff / np.maximum(scale, 1e-300), 0.0)
            ok = bool(np.all((rel <= rel_tol) | (diff <= abs_tol)))
            bad = ~((rel <= rel_tol) | (diff <= abs_tol))
            results.append(GradCheckResult(
                seed=seed * 1_000_003 + trial * 977 + resamples,
                n_gaussians=n_g,
                resamples=resamples,
                max_rel_err=float(rel[bad].max() if bad.any() else rel.max()),
                max_abs_err=float(diff.max()),
                passed=ok,
            ))
            break
    return results
