"""Trajectory metrics: ATE RMSE (cm) and AAE RMSE (degrees), plus reporting.

No alignment transform is applied before ATE by default: the localization
protocol initializes from ground truth, so estimates already live in the
ground-truth frame and aligning would mask per-frame error. An optional
rigid alignment exists for externally produced trajectories.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import Pose, pose_compose, pose_inverse, quat_from_rotmat, quat_multiply, quat_normalize

# Reference results on the full-scale datasets (averages and per-sequence
# values), embedded for report comparison only; desk-scale synthetic runs are
# not expected to reproduce them.
REFERENCE_RESULTS = {
    "replica": {
        "ate_rmse_cm": {
            "avg": 0.016, "room0": 0.015, "room1": 0.013, "room2": 0.021,
            "office0": 0.011, "office1": 0.009, "office2": 0.018,
            "office3": 0.020, "office4": 0.019,
        },
        "aae_rmse_deg": {
            "avg": 0.009, "room0": 0.007, "room1": 0.008, "room2": 0.010,
            "office0": 0.009, "office1": 0.009, "office2": 0.011,
            "office3": 0.009, "office4": 0.011,
        },
    },
    "tum": {
        "ate_rmse_cm": {
            "avg": 0.810, "fr1/desk": 0.931, "fr1/desk2": 1.006,
            "fr1/room": 0.666, "fr2/xyz": 0.248, "fr3/office": 1.197,
        },
        "aae_rmse_deg": {
            "avg": 0.979, "fr1/desk": 1.126, "fr1/desk2": 1.265,
            "fr1/room": 0.907, "fr2/xyz": 0.789, "fr3/office": 0.808,
        },
    },
}


@dataclass
class MetricReport:
    name: str
    ate_rmse_cm: float
    aae_rmse_deg: float
    per_frame: list   # (timestamp, trans_err_cm, rot_err_deg)
    n_frames: int


def _check_lengths(est, gt):
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) == 0:
        raise ValueError("empty trajectories")


def translation_errors_cm(est: list[Pose], gt: list[Pose]) -> np.ndarray:
    """Per-frame camera-center distances in cm (world frame)."""
    _check_lengths(est, gt)
    return np.array([
        np.linalg.norm(e.camera_center() - g.camera_center()) * 100.0
        for e, g in zip(est, gt)
    ])


def rotation_errors_deg(est: list[Pose], gt: list[Pose]) -> np.ndarray:
    """Per-frame relative-rotation angles in degrees, quaternion sign robust."""
    _check_lengths(est, gt)
    out = []
    for e, g in zip(est, gt):
        rel = quat_normalize(quat_multiply(e.rotation.conjugate(), g.rotation))
        vec = math.sqrt(rel.x * rel.x + rel.y * rel.y + rel.z * rel.z)
        out.append(math.degrees(2.0 * math.atan2(vec, abs(rel.w))))
    return np.array(out)


def ate_rmse(est: list[Pose], gt: list[Pose]) -> float:
    """Root-mean-square camera-center error, cm. No alignment applied."""
    return float(np.sqrt((translation_errors_cm(est, gt) ** 2).mean()))


def aae_rmse(est: list[Pose], gt: list[Pose]) -> float:
    """Root-mean-square absolute angular error, degrees."""
    return float(np.sqrt((rotation_errors_deg(est, gt) ** 2).mean()))


def align_trajectories(est: list[Pose], gt: list[Pose]) -> list[Pose]:
    """Optional rigid (SE3) alignment of est onto gt via camera centers.

    For comparing externally produced trajectories; the default metrics do
    not use it.
    """
    _check_lengths(est, gt)
    P = np.array([e.camera_center() for e in est])
    Q = np.array([g.camera_center() for g in gt])
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    H = (P - mp).T @ (Q - mq)
    U, _, Vt = np.linalg.svd(H)
    R = Vt.T @ U.T
    if np.linalg.det(R) < 0:
        Vt[2] *= -1
        R = Vt.T @ U.T
    t = mq - R @ mp
    # x_aligned = R x + t applied to the camera-to-world side of each pose
    correction = Pose(quat_from_rotmat(R.T), -(R.T @ t))  # world map as w2c-style pose
    return [pose_compose(e, correction) for e in est]


def report_sequence(
    name: str,
    est: list[Pose],
    gt: list[Pose],
    out_base=None,
    timestamps: list[float] | None = None,
) -> MetricReport:
    """Compute both metrics and optionally write <out_base>.csv / .json."""
    t_err = translation_errors_cm(est, gt)
    r_err = rotation_errors_deg(est, gt)
    if timestamps is None:
        timestamps = [float(i) for i in range(len(est))]
    per_frame = list(zip(timestamps, t_err.tolist(), r_err.tolist()))
    report = MetricReport(
        name=name,
        ate_rmse_cm=float(np.sqrt((t_err ** 2).mean())),
        aae_rmse_deg=float(np.sqrt((r_err ** 2).mean())),
        per_frame=per_frame,
        n_frames=len(est),
    )
    if out_base is not None:
        base = Path(out_base)
        with open(base.with_suffix(".csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["timestamp", "trans_err_cm", "rot_err_deg"])
            for ts, te, re in per_frame:
                w.writerow([f"{ts:.6f}", f"{te:.9g}", f"{re:.9g}"])
        with open(base.with_suffix(".json"), "w") as f:
            json.dump(
                {
                    "sequence": name,
                    "n_frames": report.n_frames,
                    "ate_rmse_cm": report.ate_rmse_cm,
                    "aae_rmse_deg": report.aae_rmse_deg,
                    "reference_results": REFERENCE_RESULTS,
                },
                f,
                indent=2,
            )
            f.write("\n")
    return report


def average_reports(reports: list[MetricReport]) -> dict:
    """Unweighted per-sequence average, like a results table's Avg column."""
    if not reports:
        raise ValueError("no reports to average")
    return {
        "ate_rmse_cm": float(np.mean([r.ate_rmse_cm for r in reports])),
        "aae_rmse_deg": float(np.mean([r.aae_rmse_deg for r in reports])),
        "sequences": [r.name for r in reports],
    }
