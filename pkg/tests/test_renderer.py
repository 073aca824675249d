import numpy as np
import pytest

from helpers import random_scene, small_intrinsics
from splatalign.geom import CameraIntrinsics, Pose, Quaternion
from splatalign.reference import reference_render
from splatalign.renderer import (
    Gaussian,
    GaussianScene,
    RenderConfig,
    project_gaussians,
    rasterize_depth,
    render,
)


def single_gaussian_scene(mean, scale=0.1, opacity=1.0):
    return GaussianScene.from_gaussians(
        [Gaussian(np.asarray(mean), np.full(3, scale), Quaternion.identity(), opacity)]
    )


K100 = CameraIntrinsics(fx=100, fy=100, cx=50, cy=50, width=101, height=101, near=0.1, far=100)


def test_isotropic_on_axis_projection():
    scene = single_gaussian_scene([0.0, 0.0, 2.0], scale=0.1)
    cfg = RenderConfig()
    (p,) = project_gaussians(scene, K100, Pose.identity(), cfg)
    assert p.visible
    # J maps an isotropic sigma=0.1 at z=2 to (100 * 0.1 / 2)^2 = 25 px^2 per axis
    expected = np.diag([25.0, 25.0]) + cfg.dilation * np.eye(2)
    assert np.abs(p.cov2d - expected).max() < 1e-9
    assert np.allclose(p.mean2d, [50.0, 50.0])
    assert p.depth == pytest.approx(2.0)


def test_behind_camera_invisible():
    scene = single_gaussian_scene([0.0, 0.0, -1.0])
    (p,) = project_gaussians(scene, K100, Pose.identity())
    assert not p.visible


def test_fx_scaling_quadruples_cov00():
    scene = single_gaussian_scene([0.0, 0.0, 2.0], scale=0.1)
    cfg = RenderConfig(dilation=0.0)
    K2 = CameraIntrinsics(fx=200, fy=100, cx=50, cy=50, width=101, height=101, near=0.1, far=100)
    (a,) = project_gaussians(scene, K100, Pose.identity(), cfg)
    (b,) = project_gaussians(scene, K2, Pose.identity(), cfg)
    assert b.cov2d[0, 0] == pytest.approx(4.0 * a.cov2d[0, 0], rel=1e-12)
    assert b.cov2d[1, 1] == pytest.approx(a.cov2d[1, 1], rel=1e-12)


def test_single_opaque_contributor_at_center():
    # alpha clamp lifted so the spec's exact alpha = 1 case holds
    cfg = RenderConfig(alpha_clamp_max=1.0)
    scene = single_gaussian_scene([0.0, 0.0, 2.0], scale=0.2, opacity=1.0)
    out = render(scene, K100, Pose.identity(), cfg)
    assert out.alpha[50, 50] == pytest.approx(1.0, abs=1e-12)
    assert out.depth[50, 50] == pytest.approx(2.0, abs=1e-12)
    assert out.norm_depth[50, 50] == pytest.approx(2.0, abs=1e-9)
    # with the default clamp the ratio is still exact
    out2 = render(scene, K100, Pose.identity(), RenderConfig())
    assert out2.alpha[50, 50] == pytest.approx(0.999, abs=1e-12)
    assert out2.norm_depth[50, 50] == pytest.approx(2.0, abs=1e-9)


def test_two_coincident_contributors():
    # alpha_1 = alpha_2 = 0.5 at depths 1 then 2:
    # D = 0.5*1 + 0.5*0.5*2 = 1.0, alpha = 0.75, Norm_D = 4/3
    scene = GaussianScene.from_gaussians([
        Gaussian([0.0, 0.0, 1.0], [0.1, 0.1, 0.1], Quaternion.identity(), 0.5),
        Gaussian([0.0, 0.0, 2.0], [0.2, 0.2, 0.2], Quaternion.identity(), 0.5),
    ])
    out = render(scene, K100, Pose.identity())
    assert out.depth[50, 50] == pytest.approx(1.0, abs=1e-12)
    assert out.alpha[50, 50] == pytest.approx(0.75, abs=1e-12)
    assert out.norm_depth[50, 50] == pytest.approx(1.0 / 0.75, abs=1e-9)


def test_empty_pixel_masked():
    scene = single_gaussian_scene([0.0, 0.0, 2.0], scale=0.01)
    out = render(scene, K100, Pose.identity())
    assert out.alpha[0, 0] == 0.0
    assert not out.mask[0, 0]
    assert out.norm_depth[0, 0] == 0.0


def test_render_deterministic():
    rng = np.random.default_rng(0)
    scene = random_scene(rng, 40)
    K = small_intrinsics()
    a = render(scene, K, Pose.identity())
    b = render(scene, K, Pose.identity())
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.alpha, b.alpha)
    assert np.array_equal(a.norm_depth, b.norm_depth)


def test_all_behind_camera_zero_alpha():
    rng = np.random.default_rng(1)
    scene = random_scene(rng, 10, z_range=(-5.0, -1.0))
    out = render(scene, small_intrinsics(), Pose.identity())
    assert np.all(out.alpha == 0)
    assert not out.mask.any()


def test_wall_scene_norm_depth_bound():
    rng = np.random.default_rng(2)
    spacing, sigma = 0.04, 0.04
    xs = np.arange(-1.5, 1.5, spacing)
    xx, yy = np.meshgrid(xs, xs)
    z = 2.0 + rng.uniform(-sigma, sigma, xx.size)
    means = np.column_stack([xx.ravel(), yy.ravel(), z])
    scene = GaussianScene(
        means,
        np.full((len(means), 3), sigma),
        np.tile([1.0, 0, 0, 0], (len(means), 1)),
        np.ones(len(means)),
    )
    out = render(scene, small_intrinsics(), Pose.identity())
    assert out.mask.sum() > 0.9 * out.mask.size
    nd = out.norm_depth[out.mask]
    assert nd.min() >= 2.0 - 3 * sigma and nd.max() <= 2.0 + 3 * sigma


@pytest.mark.parametrize("seed", range(6))
def test_tiled_matches_naive_reference(seed):
    rng = np.random.default_rng(100 + seed)
    scene = random_scene(rng, int(rng.integers(5, 50)))
    K = small_intrinsics()
    tiled = render(scene, K, Pose.identity())
    naive, _ = reference_render(scene, K, Pose.identity())
    assert np.abs(tiled.depth - naive.depth).max() < 1e-6
    assert np.abs(tiled.alpha - naive.alpha).max() < 1e-6
    assert np.abs(tiled.norm_depth - naive.norm_depth).max() < 1e-6


def test_permutation_safety():
    rng = np.random.default_rng(5)
    scene = random_scene(rng, 30)
    perm = rng.permutation(30)
    shuffled = GaussianScene(
        scene.means[perm], scene.scales[perm], scene.quats[perm], scene.opacities[perm]
    )
    K = small_intrinsics()
    a = render(scene, K, Pose.identity())
    b = render(shuffled, K, Pose.identity())
    # depths are continuous draws, no exact ties
    assert np.abs(a.depth - b.depth).max() < 1e-12
    assert np.abs(a.alpha - b.alpha).max() < 1e-12


def test_transmittance_monotone_and_alpha_range():
    rng = np.random.default_rng(8)
    scene = random_scene(rng, 35)
    K = small_intrinsics(width=32, height=32, f=30)
    out, traces = reference_render(scene, K, Pose.identity(), collect_traces=True)
    assert out.alpha.min() >= 0 and out.alpha.max() <= 1 + 1e-6
    for row in traces:
        for rec in row:
            T = rec.transmittance
            assert all(T[i] >= T[i + 1] - 1e-12 for i in range(len(T) - 1))
            assert all(0.0 <= t <= 1.0 for t in T)


def test_opaque_front_gaussian_occludes():
    cfg = RenderConfig()
    scene = GaussianScene.from_gaussians([
        Gaussian([0.0, 0.0, 1.0], [0.3, 0.3, 0.3], Quaternion.identity(), 1.0),
        Gaussian([0.0, 0.0, 2.0], [0.3, 0.3, 0.3], Quaternion.identity(), 1.0),
    ])
    out, traces = reference_render(scene, K100, Pose.identity(), cfg, collect_traces=True)
    rec = traces[50][50]
    assert rec.alpha[0] == pytest.approx(cfg.alpha_clamp_max)
    assert all(t <= 1 - cfg.alpha_clamp_max + 1e-12 for t in rec.transmittance[1:])


def test_norm_depth_convex_combination():
    rng = np.random.default_rng(9)
    scene = random_scene(rng, 30)
    K = small_intrinsics(width=32, height=32, f=30)
    out, traces = reference_render(scene, K, Pose.identity(), collect_traces=True)
    tiled = render(scene, K, Pose.identity())
    for i in range(K.height):
        for j in range(K.width):
            if not out.mask[i, j]:
                continue
            d = [scene_depth for scene_depth in
                 (tiled.backward_ctx.proj.depth[g] for g in traces[i][j].ids)]
            assert min(d) - 1e-9 <= tiled.norm_depth[i, j] <= max(d) + 1e-9
            assert abs(tiled.norm_depth[i, j] * tiled.alpha[i, j] - tiled.depth[i, j]) < 1e-6


def test_rasterize_depth_accepts_projected_list():
    scene = single_gaussian_scene([0.0, 0.0, 2.0], scale=0.2)
    projected = project_gaussians(scene, K100, Pose.identity())
    out = rasterize_depth(projected, K100)
    direct = render(scene, K100, Pose.identity())
    assert np.abs(out.depth - direct.depth).max() < 1e-12
    assert np.abs(out.alpha - direct.alpha).max() < 1e-12


def test_scene_validation():
    with pytest.raises(ValueError):
        GaussianScene(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0))
    with pytest.raises(ValueError):
        GaussianScene([[0, 0, 1]], [[0.0, 0.1, 0.1]], [[1, 0, 0, 0]], [1.0])
    with pytest.raises(ValueError):
        GaussianScene([[0, 0, 1]], [[0.1, 0.1, 0.1]], [[1, 0, 0, 0]], [1.5])
    with pytest.raises(ValueError):
        GaussianScene([[0, 0, 1]], [[0.1, 0.1, 0.1]], [[0.9, 0, 0, 0]], [1.0])
