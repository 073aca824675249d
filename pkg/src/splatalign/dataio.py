"""Dataset ingestion, trajectory file I/O, and the synthetic scene generator.

Supported layouts:
  * TUM RGB-D: depth.txt / groundtruth.txt index files, 16-bit depth PNGs at
    5000 counts per meter, pose lines "t tx ty tz qx qy qz qw" camera-to-world.
  * Replica-style captures: traj.txt with one row-major 4x4 camera-to-world
    matrix per line plus per-frame depth PNGs (6553.5 counts per meter in the
    common distribution).

Poses are converted to the internal world-to-camera convention at load and
back at write. Non-finite or zero depth readings are marked invalid, never
propagated.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidSpecError, ParseError
from .geom import CameraIntrinsics, Pose, Quaternion, quat_from_rotmat, quat_normalize, quat_to_rotmat
from .renderer import GaussianScene, RenderConfig, render

logger = logging.getLogger(__name__)

TUM_DEPTH_FACTOR = 5000.0
REPLICA_DEPTH_FACTOR = 6553.5


@dataclass(frozen=True)
class DataConfig:
    tum_depth_factor: float = TUM_DEPTH_FACTOR
    replica_depth_factor: float = REPLICA_DEPTH_FACTOR
    assoc_max_dt: float = 0.02
    depth_png_scale: float = 5000.0   # counts per meter for debug exports


@dataclass
class DepthImage:
    """H x W metric depth with a validity mask."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.shape != self.valid.shape or self.depth.ndim != 2:
            raise ValueError("depth and valid must be matching 2-D arrays")

    @classmethod
    def from_depth(cls, depth: np.ndarray) -> "DepthImage":
        """Mark non-finite and non-positive readings invalid and zero them out."""
        d = np.asarray(depth, dtype=np.float64).copy()
        valid = np.isfinite(d) & (d > 0)
        d[~valid] = 0.0
        return cls(d, valid)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass(frozen=True)
class TrajectoryEntry:
    timestamp: float
    pose: Pose   # world-to-camera (internal convention)


# ---------------------------------------------------------------------------
# depth image files


def load_depth_png(path, factor: float) -> DepthImage:
    """16-bit grayscale PNG -> meters; zero counts are invalid."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise ParseError(f"unsupported depth PNG dtype {arr.dtype}", path=path)
    return DepthImage.from_depth(arr.astype(np.float64) / factor)


def save_depth_png(path, depth: np.ndarray, scale: float = 5000.0) -> None:
    counts = np.clip(np.round(np.asarray(depth, dtype=np.float64) * scale), 0, 65535)
    Image.fromarray(counts.astype(np.uint16)).save(path)


def save_depth_csv(path, depth: np.ndarray) -> None:
    np.savetxt(path, np.asarray(depth), delimiter=",", fmt="%.9g")


# ---------------------------------------------------------------------------
# TUM layout


def _read_index_file(path: Path) -> list[tuple[float, list[str], int]]:
    entries = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            try:
                ts = float(parts[0])
            except ValueError:
                raise ParseError(f"bad timestamp {parts[0]!r}", path=path, line=lineno) from None
            entries.append((ts, parts[1:], lineno))
    return entries


def _parse_tum_pose(fields: list[str], path, lineno: int) -> Pose:
    if len(fields) != 7:
        raise ParseError(f"expected 7 pose fields, got {len(fields)}", path=path, line=lineno)
    try:
        tx, ty, tz, qx, qy, qz, qw = (float(v) for v in fields)
    except ValueError:
        raise ParseError("non-numeric pose field", path=path, line=lineno) from None
    q = quat_normalize(Quaternion(qw, qx, qy, qz))
    c2w = Pose(q, [tx, ty, tz])
    # file stores camera-to-world; invert to the internal convention
    R = quat_to_rotmat(c2w.rotation)
    return Pose(c2w.rotation.conjugate(), -(R.T @ c2w.translation))


def associate_timestamps(a: list[float], b: list[float], max_dt: float) -> list[tuple[int, int]]:
    """Mutual-nearest-neighbor pairs within max_dt (symmetric by construction)."""
    if not a or not b:
        return []
    a_arr = np.asarray(a)
    b_arr = np.asarray(b)

    def nearest(src, dst):
        pos = np.searchsorted(dst, src)
        pos = np.clip(pos, 1, len(dst) - 1) if len(dst) > 1 else np.zeros(len(src), int)
        left = dst[np.maximum(pos - 1, 0)]
        right = dst[np.minimum(pos, len(dst) - 1)]
        pick = np.where(np.abs(src - left) <= np.abs(right - src), np.maximum(pos - 1, 0), pos)
        return pick

    na = nearest(a_arr, b_arr)
    nb = nearest(b_arr, a_arr)
    pairs = []
    for i, j in enumerate(na):
        if nb[j] == i and abs(a_arr[i] - b_arr[j]) <= max_dt:
            pairs.append((i, int(j)))
    return pairs


def load_tum_sequence(directory, cfg: DataConfig | None = None):
    """Load (timestamp, DepthImage, gt Pose) triples from a TUM-layout directory."""
    cfg = cfg or DataConfig()
    d = Path(directory)
    depth_index = d / "depth.txt"
    gt_index = d / "groundtruth.txt"
    if not depth_index.is_file():
        raise FileNotFoundError(f"missing {depth_index}")
    if not gt_index.is_file():
        raise FileNotFoundError(f"missing {gt_index}")

    depth_entries = _read_index_file(depth_index)
    gt_poses = [
        (ts, _parse_tum_pose(fields, gt_index, lineno))
        for ts, fields, lineno in _read_index_file(gt_index)
    ]

    pairs = associate_timestamps(
        [e[0] for e in depth_entries], [t for t, _ in gt_poses], cfg.assoc_max_dt
    )
    dropped = len(depth_entries) - len(pairs)
    if dropped:
        logger.info("dropped %d depth frames without a ground-truth match", dropped)

    out = []
    for i, j in pairs:
        ts, fields, lineno = depth_entries[i]
        if not fields:
            raise ParseError("depth entry missing a file path", path=depth_index, line=lineno)
        img = load_depth_png(d / fields[0], cfg.tum_depth_factor)
        out.append((ts, img, gt_poses[j][1]))
    return out


# ---------------------------------------------------------------------------
# Replica-style capture layout


def _find_replica_depth_files(d: Path) -> list[Path]:
    for pattern in ("results/depth*.png", "depth/*.png", "depth*.png"):
        files = sorted(d.glob(pattern))
        if files:
            return files
    return []


def load_replica_sequence(directory, cfg: DataConfig | None = None):
    """Load (frame index, DepthImage, gt Pose) from a Replica-style capture."""
    cfg = cfg or DataConfig()
    d = Path(directory)
    traj = d / "traj.txt"
    if not traj.is_file():
        raise FileNotFoundError(f"missing {traj}")
    files = _find_replica_depth_files(d)
    if not files:
        raise FileNotFoundError(f"no depth PNGs found under {d}")

    poses = []
    with open(traj) as f:
        for lineno, line in enumerate(f, start=1):
            s = line.strip()
            if not s:
                continue
            vals = s.split()
            if len(vals) != 16:
                raise ParseError(f"expected 16 matrix entries, got {len(vals)}", path=traj, line=lineno)
            try:
                M = np.array([float(v) for v in vals]).reshape(4, 4)
            except ValueError:
                raise ParseError("non-numeric matrix entry", path=traj, line=lineno) from None
            R = M[:3, :3]
            if np.linalg.norm(R @ R.T - np.eye(3)) > 1e-3:
                raise ParseError("rotation block is not orthonormal", path=traj, line=lineno)
            # camera-to-world matrix -> internal world-to-camera pose
            q = quat_from_rotmat(R.T)
            poses.append(Pose(q, -(R.T @ M[:3, 3])))

    n = min(len(poses), len(files))
    if len(poses) != len(files):
        logger.warning("trajectory has %d poses but %d depth files; using first %d",
                       len(poses), len(files), n)
    out = []
    for i in range(n):
        img = load_depth_png(files[i], cfg.replica_depth_factor)
        out.append((float(i), img, poses[i]))
    return out


# ---------------------------------------------------------------------------
# TUM trajectory files


def write_trajectory_tum(path, entries: list[TrajectoryEntry]) -> None:
    """Write "timestamp tx ty tz qx qy qz qw" lines, camera-to-world, 6 decimals."""
    with open(path, "w") as f:
        for e in entries:
            R = quat_to_rotmat(e.pose.rotation)
            c = -(R.T @ e.pose.translation)
            q = e.pose.rotation.conjugate()
            vals = [e.timestamp, c[0], c[1], c[2], q.x, q.y, q.z, q.w]
            f.write(" ".join(f"{v + 0.0:.6f}" for v in vals) + "\n")  # +0.0 drops -0.0


def read_trajectory_tum(path) -> list[TrajectoryEntry]:
    entries = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 8:
                raise ParseError(f"expected 8 fields, got {len(parts)}", path=path, line=lineno)
            try:
                ts = float(parts[0])
            except ValueError:
                raise ParseError(f"bad timestamp {parts[0]!r}", path=path, line=lineno) from None
            entries.append(TrajectoryEntry(ts, _parse_tum_pose(parts[1:], path, lineno)))
    for prev, cur in zip(entries, entries[1:]):
        if cur.timestamp <= prev.timestamp:
            raise ParseError("timestamps must be strictly increasing", path=path)
    return entries


# ---------------------------------------------------------------------------
# synthetic box-room generator


@dataclass(frozen=True)
class SynthSpec:
    """Seeded box-room scene plus a camera trajectory rendered with our renderer.

    The camera always looks toward `look_at`, where the inner boxes sit, so
    every frame sees depth edges and corners; a view of bare planar walls
    would leave the pose unconstrained along the wall directions.
    """

    room_size: tuple = (3.0, 3.0, 2.4)      # x, y extent and height, meters
    spacing: float = 0.05                   # Gaussian grid spacing on each face
    jitter: float = 0.3                     # position jitter, fraction of spacing
    scale_factor: float = 1.0               # sigma_i = scale_factor * spacing
    inner_boxes: tuple = (                  # (center_x, center_y, edge length)
        (0.3, 0.0, 0.7),
        (-0.5, -0.55, 0.45),
    )
    n_frames: int = 20
    trajectory: str = "orbit"               # "orbit" | "linear"
    orbit_radius: float = 1.0
    camera_height: float = 1.4
    look_at: tuple = (0.0, 0.0, 0.45)
    image_width: int = 320
    image_height: int = 240
    focal: float = 240.0
    near: float = 0.1
    far: float = 20.0
    noise_sigma: float = 0.0                # additive depth noise, meters

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.focal, fy=self.focal,
            cx=(self.image_width - 1) / 2, cy=(self.image_height - 1) / 2,
            width=self.image_width, height=self.image_height,
            near=self.near, far=self.far,
        )


def _face_grid(axes, fixed_axis, fixed_value, extents, spacing):
    """Regular grid of points on one axis-aligned rectangle."""
    g0 = np.arange(extents[0][0], extents[0][1], spacing)
    g1 = np.arange(extents[1][0], extents[1][1], spacing)
    a, b = np.meshgrid(g0, g1)
    pts = np.zeros((a.size, 3))
    pts[:, axes[0]] = a.ravel()
    pts[:, axes[1]] = b.ravel()
    pts[:, fixed_axis] = fixed_value
    return pts


def _box_faces(center, size, spacing):
    cx, cy, cz = center
    lx, ly, lz = size
    x = (cx - lx / 2, cx + lx / 2)
    y = (cy - ly / 2, cy + ly / 2)
    z = (cz - lz / 2, cz + lz / 2)
    faces = []
    for zv in z:
        faces.append(_face_grid((0, 1), 2, zv, (x, y), spacing))
    for xv in x:
        faces.append(_face_grid((1, 2), 0, xv, (y, z), spacing))
    for yv in y:
        faces.append(_face_grid((0, 2), 1, yv, (x, z), spacing))
    return np.concatenate(faces)


def _look_at_pose(position, forward, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose for a camera at `position` looking along `forward`."""
    zc = np.asarray(forward, dtype=np.float64)
    zc /= np.linalg.norm(zc)
    xc = np.cross(zc, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(xc)
    if n < 1e-8:  # looking along `up`; any horizontal right vector works
        xc = np.cross(zc, np.array([0.0, 1.0, 0.0]))
        n = np.linalg.norm(xc)
    xc /= n
    yc = np.cross(zc, xc)
    R_c2w = np.column_stack([xc, yc, zc])
    R = R_c2w.T
    return Pose(quat_from_rotmat(R), -(R @ np.asarray(position, dtype=np.float64)))


def synth_scene(spec: SynthSpec, seed: int, render_cfg: RenderConfig | None = None):
    """Deterministic (seeded) scene + rendered depth frames with ground truth.

    Returns (GaussianScene, [(DepthImage, gt Pose), ...]). Observed frames are
    produced by this package's own renderer, which makes downstream recovery
    tests self-consistency checks rather than sensor-accuracy claims.
    """
    render_cfg = render_cfg or RenderConfig()
    rng = np.random.default_rng(seed)
    lx, ly, lz = spec.room_size
    pts = [_box_faces((0.0, 0.0, lz / 2), (lx, ly, lz), spec.spacing)]
    for bx, by, edge in spec.inner_boxes:
        if edge > 0:
            pts.append(_box_faces((bx, by, edge / 2), [edge] * 3, spec.spacing))
    means = np.concatenate(pts)
    means = means + rng.uniform(-spec.jitter * spec.spacing / 2,
                                spec.jitter * spec.spacing / 2, means.shape)
    n = len(means)
    sigma = spec.scale_factor * spec.spacing
    scene = GaussianScene(
        means,
        np.full((n, 3), sigma),
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.ones(n),
    )

    K = spec.intrinsics()
    target = np.asarray(spec.look_at, dtype=np.float64)
    poses = []
    if spec.trajectory == "orbit":
        for i in range(spec.n_frames):
            theta = 2 * math.pi * i / max(spec.n_frames, 1)
            pos = np.array([spec.orbit_radius * math.cos(theta),
                            spec.orbit_radius * math.sin(theta),
                            spec.camera_height])
            poses.append(_look_at_pose(pos, target - pos))
    elif spec.trajectory == "linear":
        for i in range(spec.n_frames):
            s = i / max(spec.n_frames - 1, 1)
            pos = np.array([-lx / 4 + s * lx / 2, -ly / 8 + s * ly / 4, spec.camera_height])
            poses.append(_look_at_pose(pos, target - pos))
    else:
        raise InvalidSpecError(f"unknown trajectory kind {spec.trajectory!r}")

    frames = []
    for pose in poses:
        out = render(scene, K, pose, render_cfg)
        if not out.mask.any():
            raise InvalidSpecError("spec produced a frame with empty frustum coverage")
        depth = out.norm_depth.copy()
        if spec.noise_sigma > 0:
            depth = depth + rng.normal(0.0, spec.noise_sigma, depth.shape) * out.mask
        img = DepthImage(np.where(out.mask, depth, 0.0), out.mask.copy())
        frames.append((img, pose))
    return scene, frames
