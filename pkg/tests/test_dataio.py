import numpy as np
import pytest

from splatalign.dataio import (
    DataConfig,
    DepthImage,
    SynthSpec,
    TrajectoryEntry,
    associate_timestamps,
    load_depth_png,
    load_replica_sequence,
    load_tum_sequence,
    read_trajectory_tum,
    save_depth_csv,
    save_depth_png,
    synth_scene,
    write_trajectory_tum,
)
from splatalign.errors import InvalidSpecError, ParseError
from splatalign.geom import Pose, Quaternion, pose_difference_magnitudes, quat_normalize
from splatalign.renderer import render


def tiny_spec(**kw):
    defaults = dict(
        room_size=(2.4, 2.4, 2.0), spacing=0.1, n_frames=2,
        image_width=64, image_height=48, focal=48.0,
        inner_boxes=((0.25, 0.0, 0.6),), orbit_radius=0.8,
        camera_height=1.1, look_at=(0.0, 0.0, 0.4),
    )
    defaults.update(kw)
    return SynthSpec(**defaults)


def write_tum_dataset(root, n=4, dt=1.0 / 30):
    (root / "depth").mkdir()
    depth_lines = ["# depth data"]
    gt_lines = ["# ground truth"]
    rng = np.random.default_rng(0)
    for i in range(n):
        t = i * dt
        depth = rng.uniform(0.5, 3.0, (24, 32))
        name = f"depth/{t:.6f}.png"
        save_depth_png(root / name, depth, 5000.0)
        depth_lines.append(f"{t:.6f} {name}")
        gt_lines.append(f"{t:.6f} 0 0 0 0 0 0 1")
    (root / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    (root / "groundtruth.txt").write_text("\n".join(gt_lines) + "\n")


def test_depth_image_rejects_nonfinite():
    d = np.array([[1.0, np.nan], [np.inf, 2.0]])
    img = DepthImage.from_depth(d)
    assert img.valid.tolist() == [[True, False], [False, True]]
    assert np.isfinite(img.depth).all()


def test_depth_png_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    counts = rng.integers(0, 65536, (16, 16)).astype(np.uint16)
    depth = counts.astype(np.float64) / 5000.0
    save_depth_png(tmp_path / "d.png", depth, 5000.0)
    img = load_depth_png(tmp_path / "d.png", 5000.0)
    assert np.array_equal(img.depth[img.valid], counts[counts > 0].astype(np.float64) / 5000.0)
    assert np.array_equal(img.valid, counts > 0)


def test_depth_count_5000_is_one_meter(tmp_path):
    arr = np.zeros((4, 4))
    arr[1, 1] = 1.0  # 5000 counts
    save_depth_png(tmp_path / "d.png", arr, 5000.0)
    img = load_depth_png(tmp_path / "d.png", 5000.0)
    assert img.depth[1, 1] == pytest.approx(1.0, abs=1e-12)
    assert not img.valid[0, 0]  # zero counts invalid


def test_depth_csv_export(tmp_path):
    arr = np.arange(12.0).reshape(3, 4)
    save_depth_csv(tmp_path / "d.csv", arr)
    back = np.loadtxt(tmp_path / "d.csv", delimiter=",")
    assert np.allclose(back, arr)


def test_load_tum_sequence(tmp_path):
    write_tum_dataset(tmp_path, n=4)
    seq = load_tum_sequence(tmp_path)
    assert len(seq) == 4
    ts, img, pose = seq[0]
    assert ts == 0.0
    assert img.width == 32 and img.height == 24
    ang, dist = pose_difference_magnitudes(pose, Pose.identity())
    assert ang < 1e-9 and dist < 1e-12


def test_tum_identity_gt_line(tmp_path):
    write_tum_dataset(tmp_path, n=1)
    seq = load_tum_sequence(tmp_path)
    # "0.0 0 0 0 0 0 0 1" is the identity pose at t=0 (file order is xyzw)
    assert np.allclose(seq[0][2].matrix(), np.eye(4), atol=1e-12)


def test_tum_association_drops_unmatched(tmp_path, caplog):
    write_tum_dataset(tmp_path, n=4)
    # remove the later gt lines: only the first two depth frames can match
    lines = (tmp_path / "groundtruth.txt").read_text().splitlines()
    (tmp_path / "groundtruth.txt").write_text("\n".join(lines[:3]) + "\n")
    seq = load_tum_sequence(tmp_path)
    assert len(seq) == 2


def test_tum_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_tum_sequence(tmp_path)


def test_tum_malformed_line_reports_lineno(tmp_path):
    write_tum_dataset(tmp_path, n=2)
    (tmp_path / "groundtruth.txt").write_text("# hdr\n0.0 0 0 0 0 0 0 1\nbogus line here\n")
    with pytest.raises(ParseError) as exc:
        load_tum_sequence(tmp_path)
    assert exc.value.line == 3


def test_association_symmetric():
    rng = np.random.default_rng(2)
    a = np.sort(rng.uniform(0, 10, 40)).tolist()
    b = np.sort(rng.uniform(0, 10, 35)).tolist()
    ab = associate_timestamps(a, b, 0.05)
    ba = associate_timestamps(b, a, 0.05)
    assert sorted((i, j) for i, j in ab) == sorted((j, i) for i, j in ba)
    for i, j in ab:
        assert abs(a[i] - b[j]) <= 0.05


def test_replica_loader(tmp_path):
    (tmp_path / "results").mkdir()
    rng = np.random.default_rng(3)
    n = 3
    rows = []
    for i in range(n):
        depth = rng.uniform(0.5, 3.0, (12, 16))
        save_depth_png(tmp_path / "results" / f"depth{i:06d}.png", depth, 6553.5)
        rows.append(" ".join(str(v) for v in np.eye(4).ravel()))
    (tmp_path / "traj.txt").write_text("\n".join(rows) + "\n")
    seq = load_replica_sequence(tmp_path)
    assert len(seq) == n
    assert np.allclose(seq[0][2].matrix(), np.eye(4), atol=1e-12)


def test_replica_pose_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    q = quat_normalize(Quaternion(*rng.normal(size=4)))
    pose = Pose(q, rng.uniform(-1, 1, 3))  # internal w2c
    c2w = np.linalg.inv(pose.matrix())
    (tmp_path / "results").mkdir()
    save_depth_png(tmp_path / "results" / "depth000000.png", np.ones((8, 8)), 6553.5)
    (tmp_path / "traj.txt").write_text(" ".join(f"{v:.17g}" for v in c2w.ravel()) + "\n")
    seq = load_replica_sequence(tmp_path)
    ang, dist = pose_difference_magnitudes(seq[0][2], pose)
    assert ang < 1e-9 and dist < 1e-9


def test_replica_rejects_non_orthonormal(tmp_path):
    (tmp_path / "results").mkdir()
    save_depth_png(tmp_path / "results" / "depth000000.png", np.ones((8, 8)), 6553.5)
    M = np.eye(4)
    M[0, 0] = 1.5
    (tmp_path / "traj.txt").write_text(" ".join(str(v) for v in M.ravel()) + "\n")
    with pytest.raises(ParseError):
        load_replica_sequence(tmp_path)


def test_trajectory_write_read_empty(tmp_path):
    p = tmp_path / "t.txt"
    write_trajectory_tum(p, [])
    assert p.read_text() == ""
    assert read_trajectory_tum(p) == []


def test_trajectory_identity_line(tmp_path):
    p = tmp_path / "t.txt"
    write_trajectory_tum(p, [TrajectoryEntry(0.0, Pose.identity())])
    assert p.read_text() == "0.000000 0.000000 0.000000 0.000000 0.000000 0.000000 0.000000 1.000000\n"


def test_trajectory_random_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    entries = []
    for i in range(100):
        q = quat_normalize(Quaternion(*rng.normal(size=4)))
        entries.append(TrajectoryEntry(float(i) * 0.1, Pose(q, rng.uniform(-2, 2, 3))))
    p = tmp_path / "t.txt"
    write_trajectory_tum(p, entries)
    back = read_trajectory_tum(p)
    assert len(back) == 100
    for a, b in zip(entries, back):
        assert abs(a.timestamp - b.timestamp) < 1e-6
        ang, dist = pose_difference_magnitudes(a.pose, b.pose)
        assert dist < 1e-6
        assert np.radians(ang) < 1e-5


def test_trajectory_rejects_decreasing_timestamps(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("1.0 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n")
    with pytest.raises(ParseError):
        read_trajectory_tum(p)


def test_synth_deterministic():
    spec = tiny_spec()
    s1, f1 = synth_scene(spec, seed=9)
    s2, f2 = synth_scene(spec, seed=9)
    assert np.array_equal(s1.means, s2.means)
    assert s1.digest == s2.digest
    for (a, _), (b, _) in zip(f1, f2):
        assert np.array_equal(a.depth, b.depth)


def test_synth_frames_are_self_renders():
    spec = tiny_spec(n_frames=1)
    scene, frames = synth_scene(spec, seed=10)
    img, gt = frames[0]
    out = render(scene, spec.intrinsics(), gt)
    assert np.array_equal(img.depth[img.valid], out.norm_depth[out.mask])
    assert np.array_equal(img.valid, out.mask)


def test_synth_noise_is_seeded_and_masked():
    spec = tiny_spec(n_frames=1, noise_sigma=0.01)
    _, f1 = synth_scene(spec, seed=11)
    _, f2 = synth_scene(spec, seed=11)
    assert np.array_equal(f1[0][0].depth, f2[0][0].depth)
    img = f1[0][0]
    assert np.all(img.depth[~img.valid] == 0.0)


def test_synth_empty_coverage_rejected():
    # camera far outside the room looking away from everything
    spec = tiny_spec(orbit_radius=100.0, look_at=(200.0, 0.0, 1.0), far=5.0)
    with pytest.raises(InvalidSpecError):
        synth_scene(spec, seed=12)


def test_synth_unknown_trajectory():
    with pytest.raises(InvalidSpecError):
        synth_scene(tiny_spec(trajectory="spiral"), seed=13)
