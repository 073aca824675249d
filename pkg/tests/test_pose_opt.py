import numpy as np
import pytest

from splatalign.dataio import DepthImage, SynthSpec, synth_scene
from splatalign.errors import InitializationOutOfMapError, NumericError
from splatalign.geom import Pose, Quaternion, pose_difference_magnitudes
from splatalign.grad import PoseGradient
from splatalign.loss import LossWeights
from splatalign.pose_opt import (
    AdamState,
    OptimConfig,
    adam_step,
    localize,
    localize_sequence,
    params_to_pose,
    perturb_pose,
    pose_to_params,
)
from splatalign.renderer import RenderConfig


def small_spec(**kw):
    defaults = dict(
        room_size=(2.4, 2.4, 2.0),
        spacing=0.08,
        n_frames=2,
        image_width=128,
        image_height=96,
        focal=96.0,
        inner_boxes=((0.25, 0.0, 0.6), (-0.4, -0.45, 0.4)),
        orbit_radius=0.8,
        camera_height=1.1,
        look_at=(0.0, 0.0, 0.4),
    )
    defaults.update(kw)
    return SynthSpec(**defaults)


def quick_cfg(**kw):
    defaults = dict(min_iters=40, patience=10, max_iters=200)
    defaults.update(kw)
    return OptimConfig(**defaults)


def test_adam_zero_gradient_is_noop():
    cfg = OptimConfig(weight_decay=1e-12)  # decay ~0 without violating positivity checks
    cfg = OptimConfig(weight_decay=0.0)
    params = pose_to_params(Pose.identity())
    state = AdamState.zeros()
    out = adam_step(params, PoseGradient(np.zeros(4), np.zeros(3)), state, cfg)
    assert np.allclose(out, params, atol=1e-15)


def test_adam_single_step_is_signed_lr():
    # from zero state: update = -lr * g / (|g| + eps) ~ -lr * sign(g)
    cfg = OptimConfig(weight_decay=0.0)
    params = np.array([1.0, 0, 0, 0, 0, 0, 0])
    g = PoseGradient(np.zeros(4), np.array([3.0, -0.5, 0.0]))
    out = adam_step(params, g, AdamState.zeros(), cfg)
    assert out[4] == pytest.approx(-cfg.lr_t, rel=1e-6)
    assert out[5] == pytest.approx(+cfg.lr_t, rel=1e-6)
    assert out[6] == 0.0


def test_adam_distinct_group_learning_rates():
    cfg = OptimConfig(weight_decay=0.0)
    params = np.array([1.0, 0, 0, 0, 0, 0, 0])
    g = PoseGradient(np.array([0.0, 1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]))
    out = adam_step(params, g, AdamState.zeros(), cfg)
    # quaternion renormalized after its step; translation moves by ~lr_t
    assert out[4] == pytest.approx(-cfg.lr_t, rel=1e-6)
    assert abs(out[1]) == pytest.approx(cfg.lr_q, rel=1e-3)  # small-angle: renorm ~ identity
    assert np.linalg.norm(out[:4]) == pytest.approx(1.0, abs=1e-12)


def test_adam_rejects_nonfinite():
    with pytest.raises(NumericError):
        adam_step(
            pose_to_params(Pose.identity()),
            PoseGradient(np.array([np.nan, 0, 0, 0]), np.zeros(3)),
            AdamState.zeros(),
            OptimConfig(),
        )


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(min_iters=200, max_iters=100)
    with pytest.raises(ValueError):
        OptimConfig(lr_q=0.0)


def test_localize_fixed_point_returns_init():
    scene, frames = synth_scene(small_spec(n_frames=1), seed=3)
    K = small_spec().intrinsics()
    img, gt = frames[0]
    est = localize(scene, K, img, gt, quick_cfg())
    # iteration 0 evaluates the exact-alignment loss (0); the best pose is the init itself
    ang, dist = pose_difference_magnitudes(est.pose, gt)
    assert dist * 100 <= 1e-4  # cm
    assert ang <= 1e-4
    assert est.final_loss.total == min(est.loss_history)


def test_localize_recovers_small_perturbation():
    spec = small_spec(n_frames=1)
    scene, frames = synth_scene(spec, seed=4)
    K = spec.intrinsics()
    img, gt = frames[0]
    rng = np.random.default_rng(0)
    init = perturb_pose(gt, rng, max_rot_deg=1.0, max_trans_m=0.02)
    est = localize(scene, K, img, init, quick_cfg(min_iters=60, max_iters=250, patience=15))
    ang, dist = pose_difference_magnitudes(est.pose, gt)
    assert dist * 100 <= 0.05, f"translation error {dist*100:.4f} cm"
    assert ang <= 0.05, f"rotation error {ang:.4f} deg"


def test_localize_min_selection_and_monotone_best():
    spec = small_spec(n_frames=1)
    scene, frames = synth_scene(spec, seed=5)
    K = spec.intrinsics()
    img, gt = frames[0]
    init = perturb_pose(gt, np.random.default_rng(1), 0.5, 0.01)
    est = localize(scene, K, img, init, quick_cfg())
    assert est.final_loss.total <= min(est.loss_history) + 1e-15
    running = np.minimum.accumulate(est.loss_history)
    assert np.all(np.diff(running) <= 0 + 1e-15)
    assert est.iterations_run == len(est.loss_history) <= 200


def test_early_stop_never_before_min_iters():
    spec = small_spec(n_frames=1)
    scene, frames = synth_scene(spec, seed=6)
    K = spec.intrinsics()
    img, gt = frames[0]
    est = localize(scene, K, img, gt, quick_cfg(min_iters=25, patience=1, max_iters=60))
    assert est.iterations_run >= 25


def test_localize_deterministic():
    spec = small_spec(n_frames=1)
    scene, frames = synth_scene(spec, seed=7)
    K = spec.intrinsics()
    img, gt = frames[0]
    init = perturb_pose(gt, np.random.default_rng(2), 1.0, 0.02)
    cfg = quick_cfg(min_iters=20, max_iters=40, patience=5)
    a = localize(scene, K, img, init, cfg)
    b = localize(scene, K, img, init, cfg)
    assert a.loss_history == b.loss_history
    assert np.array_equal(pose_to_params(a.pose), pose_to_params(b.pose))


def test_localize_quaternion_stays_unit():
    spec = small_spec(n_frames=1)
    scene, frames = synth_scene(spec, seed=8)
    K = spec.intrinsics()
    img, gt = frames[0]
    init = perturb_pose(gt, np.random.default_rng(3), 1.5, 0.03)
    est = localize(scene, K, img, init, quick_cfg(min_iters=20, max_iters=30, patience=5))
    assert abs(est.pose.rotation.norm() - 1.0) < 1e-6


def test_initialization_out_of_map():
    spec = small_spec(n_frames=1)
    scene, frames = synth_scene(spec, seed=9)
    K = spec.intrinsics()
    img, _ = frames[0]
    far_away = Pose(Quaternion.identity(), [50.0, 50.0, 50.0])
    with pytest.raises(InitializationOutOfMapError):
        localize(scene, K, img, far_away, quick_cfg())


def test_localize_sequence_single_frame_equals_localize():
    spec = small_spec(n_frames=1)
    scene, frames = synth_scene(spec, seed=10)
    K = spec.intrinsics()
    img, gt = frames[0]
    cfg = quick_cfg(min_iters=15, max_iters=25, patience=5)
    seq = localize_sequence(scene, K, [img], "gt", gt=[gt], cfg=cfg)
    solo = localize(scene, K, img, gt, cfg)
    assert np.array_equal(pose_to_params(seq[0].pose), pose_to_params(solo.pose))


def test_localize_sequence_gt_mode_order_independent():
    spec = small_spec(n_frames=3)
    scene, frames = synth_scene(spec, seed=11)
    K = spec.intrinsics()
    imgs = [f for f, _ in frames]
    gts = [p for _, p in frames]
    cfg = quick_cfg(min_iters=10, max_iters=15, patience=5)
    seq = localize_sequence(scene, K, imgs, "gt", gt=gts, cfg=cfg)
    # frame k is initialized from gt[k-1]; rerunning frame 2 alone must agree
    solo = localize(scene, K, imgs[2], gts[1], cfg)
    assert np.array_equal(pose_to_params(seq[2].pose), pose_to_params(solo.pose))


def test_localize_sequence_prev_mode_error_bound():
    # slow trajectory: prev-estimate initialization accumulates at most ~2x
    # the per-frame error of gt initialization (plus a small numerical floor)
    spec = small_spec(n_frames=3, trajectory="linear")
    scene, frames = synth_scene(spec, seed=12)
    K = spec.intrinsics()
    imgs = [f for f, _ in frames]
    gts = [p for _, p in frames]
    cfg = quick_cfg(min_iters=60, max_iters=200, patience=15)
    est_gt = localize_sequence(scene, K, imgs, "gt", gt=gts, cfg=cfg)
    est_prev = localize_sequence(scene, K, imgs, "prev", gt=gts, cfg=cfg)

    def mean_err(ests):
        return np.mean([
            pose_difference_magnitudes(e.pose, g)[1] for e, g in zip(ests, gts)
        ])

    gt_err, prev_err = mean_err(est_gt), mean_err(est_prev)
    assert prev_err <= 2.0 * gt_err + 2e-5, (gt_err, prev_err)


def test_localize_sequence_requires_gt_for_gt_mode():
    spec = small_spec(n_frames=1)
    scene, frames = synth_scene(spec, seed=13)
    with pytest.raises(ValueError):
        localize_sequence(scene, spec.intrinsics(), [frames[0][0]], "gt")


def test_perturb_pose_bounds():
    rng = np.random.default_rng(14)
    base = Pose.identity()
    for _ in range(50):
        p = perturb_pose(base, rng, 2.0, 0.05)
        ang, dist = pose_difference_magnitudes(p, base)
        assert ang <= 2.0 + 1e-9
        assert np.linalg.norm(p.translation - base.translation) <= 0.05 + 1e-12
