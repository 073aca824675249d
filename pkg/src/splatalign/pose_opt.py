"""Pose localization: Adam over (quaternion, translation) with early stopping.

The optimization runs in the scene's internal frame (the PCA-normalized one
when the scene carries a world transform); callers pass and receive poses in
the original world frame. The returned pose is the iterate with the minimum
total loss over the whole run, not the last one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataio import DepthImage
from .errors import EmptyOverlapError, InitializationOutOfMapError, NumericError
from .geom import (
    CameraIntrinsics,
    Pose,
    Quaternion,
    pose_compose,
    pose_inverse,
    quat_multiply,
    quat_normalize,
)
from .grad import PoseGradient, backward_pose
from .loss import LossBreakdown, LossWeights, reg_gradient, total_loss
from .renderer import GaussianScene, RenderConfig, render

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    lr_q: float = 5e-4
    lr_t: float = 1e-3
    weight_decay: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    min_iters: int = 100
    patience: int = 20
    max_iters: int = 500

    def __post_init__(self):
        if min(self.lr_q, self.lr_t, self.adam_beta1, self.adam_beta2, self.adam_eps) <= 0:
            raise ValueError("Adam hyperparameters must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if min(self.min_iters, self.patience, self.max_iters) <= 0:
            raise ValueError("iteration counts must be positive")
        if self.min_iters > self.max_iters:
            raise ValueError("min_iters must not exceed max_iters")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls) -> "AdamState":
        return cls(np.zeros(7), np.zeros(7), 0)


@dataclass
class PoseEstimate:
    pose: Pose                  # at minimum total loss, original world frame
    final_loss: LossBreakdown
    iterations_run: int
    loss_history: list
    converged: bool


def pose_to_params(pose: Pose) -> np.ndarray:
    return np.concatenate([pose.rotation.as_array(), pose.translation])


def params_to_pose(params: np.ndarray) -> Pose:
    return Pose(quat_normalize(Quaternion(*params[:4])), np.asarray(params[4:7]))


def adam_step(params: np.ndarray, grads: PoseGradient, state: AdamState, cfg: OptimConfig) -> np.ndarray:
    """One Adam update with per-group learning rates; renormalizes the quaternion.

    Weight decay is folded into the gradient (classic L2 style, both groups).
    """
    g = grads.as_params7()
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient passed to the optimizer")
    g = g + cfg.weight_decay * params
    state.step += 1
    state.m = cfg.adam_beta1 * state.m + (1 - cfg.adam_beta1) * g
    state.v = cfg.adam_beta2 * state.v + (1 - cfg.adam_beta2) * g * g
    m_hat = state.m / (1 - cfg.adam_beta1 ** state.step)
    v_hat = state.v / (1 - cfg.adam_beta2 ** state.step)
    lr = np.concatenate([np.full(4, cfg.lr_q), np.full(3, cfg.lr_t)])
    out = params - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    q = quat_normalize(Quaternion(*out[:4]))
    out[:4] = q.as_array()
    return out


def localize(
    scene: GaussianScene,
    K: CameraIntrinsics,
    observed: DepthImage,
    init: Pose,
    cfg: OptimConfig | None = None,
    weights: LossWeights | None = None,
    render_cfg: RenderConfig | None = None,
    iteration_callback=None,
) -> PoseEstimate:
    """Recover the camera pose of one depth image by gradient descent.

    `init` and the returned pose are in the original world frame; the scene's
    world transform is applied and removed internally. iteration_callback, if
    given, receives (iteration, LossBreakdown) after every loss evaluation.
    """
    cfg = cfg or OptimConfig()
    weights = weights or LossWeights()
    render_cfg = render_cfg or RenderConfig()
    if observed.height != K.height or observed.width != K.width:
        raise ValueError("observed image dimensions do not match intrinsics")

    to_scene = pose_inverse(scene.world_transform)
    params = pose_to_params(pose_compose(init, to_scene))
    state = AdamState.zeros()

    best_loss: LossBreakdown | None = None
    best_params = params.copy()
    history: list[float] = []
    since_improve = 0
    converged = False

    for it in range(cfg.max_iters):
        pose = params_to_pose(params)
        out = render(scene, K, pose, render_cfg)
        try:
            lb = total_loss(out, observed, pose, weights)
        except EmptyOverlapError as e:
            if it == 0:
                raise InitializationOutOfMapError(
                    "initial pose shares no valid pixels with the map"
                ) from e
            raise
        history.append(lb.total)
        if iteration_callback is not None:
            iteration_callback(it, lb)
        if best_loss is None or lb.total < best_loss.total:
            best_loss = lb
            best_params = params.copy()
            since_improve = 0
        else:
            since_improve += 1
        if it + 1 >= cfg.min_iters and since_improve >= cfg.patience:
            converged = True
            break

        try:
            g = backward_pose(out.backward_ctx, scene, K, pose, lb.dL_dNormD, lb.dL_dAlpha, lb.dL_dDepth)
            if weights.lambda_q > 0 or weights.lambda_t > 0:
                rq, rt = reg_gradient(pose, weights)
                g = PoseGradient(g.d_q + rq, g.d_t + rt)
            params = adam_step(params, g, state, cfg)
        except NumericError as e:
            raise NumericError(f"iteration {it}: {e}") from e

    return PoseEstimate(
        pose=pose_compose(params_to_pose(best_params), scene.world_transform),
        final_loss=best_loss,
        iterations_run=len(history),
        loss_history=history,
        converged=converged,
    )


def localize_sequence(
    scene: GaussianScene,
    K: CameraIntrinsics,
    frames: list[DepthImage],
    init_mode: str,
    gt: list[Pose] | None = None,
    cfg: OptimConfig | None = None,
    weights: LossWeights | None = None,
    render_cfg: RenderConfig | None = None,
    frame_callback=None,
) -> list[PoseEstimate | None]:
    """Localize every frame; failures record None and the sequence continues.

    init_mode "gt": frame k starts from the previous frame's ground-truth pose
    (frame 0 from its own), so frames are independent. init_mode "prev":
    frame k starts from the previous estimate; frame 0 from gt[0] when
    available, else the identity.
    """
    if init_mode not in ("gt", "prev"):
        raise ValueError("init_mode must be 'gt' or 'prev'")
    if init_mode == "gt" and gt is None:
        raise ValueError("ground-truth trajectory required for init_mode 'gt'")
    if gt is not None and len(gt) != len(frames):
        raise ValueError("ground-truth length must match the frame count")

    results: list[PoseEstimate | None] = []
    prev_pose = gt[0] if gt else Pose.identity()
    for k, frame in enumerate(frames):
        init = gt[max(k - 1, 0)] if init_mode == "gt" else prev_pose
        try:
            est = localize(scene, K, frame, init, cfg, weights, render_cfg)
        except (EmptyOverlapError, NumericError) as e:
            logger.warning("frame %d failed: %s", k, e)
            results.append(None)
            continue
        results.append(est)
        if init_mode == "prev":
            prev_pose = est.pose
        if frame_callback is not None:
            frame_callback(k, est)
    return results


def perturb_pose(pose: Pose, rng: np.random.Generator, max_rot_deg: float, max_trans_m: float) -> Pose:
    """Compose a uniform random rotation (axis uniform on the sphere, angle
    uniform in [0, max]) and a uniform random translation offset onto a pose."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.radians(rng.uniform(0.0, max_rot_deg))
    dq = Quaternion(float(np.cos(ang / 2)), *(np.sin(ang / 2) * axis))
    q = quat_normalize(quat_multiply(pose.rotation, dq))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = pose.translation + rng.uniform(0.0, max_trans_m) * direction
    return Pose(q, t)
