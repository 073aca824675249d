"""Command-line entry point.

Subcommands: build-scene, localize, evaluate, render, gradcheck, synth.
Exit codes: 0 success, 2 input error, 3 assertion/threshold failure,
4 numeric failure. Every run prints the fully resolved configuration
(including seed and precision) as a reproducibility header.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, apply_overrides, load_config, resolved_config_json
from .dataio import (
    TrajectoryEntry,
    load_replica_sequence,
    load_tum_sequence,
    read_trajectory_tum,
    save_depth_csv,
    save_depth_png,
    synth_scene,
    write_trajectory_tum,
)
from .errors import (
    DegenerateCloudError,
    DegenerateQuaternionError,
    EmptyOverlapError,
    InvalidSpecError,
    NumericError,
    ParseError,
)
from .evaluate import ate_rmse, aae_rmse, report_sequence
from .geom import Pose, Quaternion, quat_normalize, quat_to_rotmat
from .grad import run_gradcheck
from .pose_opt import localize
from .renderer import render
from .scene_init import build_scene, load_scene, save_scene, scene_summary, write_scene_summary

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_ASSERTION = 3
EXIT_NUMERIC = 4

DATA_ROOT_ENV = "SPLATALIGN_DATA_ROOT"


def _dataset_dir(arg: str | None) -> Path:
    """Resolve a dataset path, prefixing $SPLATALIGN_DATA_ROOT for relative paths."""
    if arg is None:
        raise ValueError("--dataset is required for this format")
    p = Path(arg)
    root = os.environ.get(DATA_ROOT_ENV)
    if not p.is_absolute() and root and not p.exists():
        candidate = Path(root) / p
        if candidate.exists():
            return candidate
    return p


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "precision", None):
        overrides.append(f'renderer.precision="{args.precision}"')
    if getattr(args, "threads", None) is not None:
        overrides.append(f"threads={args.threads}")
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def _print_header(cfg: RunConfig) -> None:
    print(f"# splatalign {__version__}")
    print(f"# config {resolved_config_json(cfg)}")


def _load_frames(args, cfg):
    """(timestamps, depth images, gt poses, intrinsics) for the chosen format."""
    if args.format == "synth":
        scene, frames = synth_scene(cfg.synth, cfg.seed, cfg.renderer)
        ts = [i / 30.0 for i in range(len(frames))]
        return ts, [f for f, _ in frames], [p for _, p in frames], cfg.synth.intrinsics(), scene
    d = _dataset_dir(args.dataset)
    seq = load_tum_sequence(d, cfg.data) if args.format == "tum" else load_replica_sequence(d, cfg.data)
    ts = [t for t, _, _ in seq]
    return ts, [img for _, img, _ in seq], [p for _, _, p in seq], cfg.intrinsics, None


def cmd_build_scene(args) -> int:
    cfg = _load_run_config(args)
    _print_header(cfg)
    if args.frame_stride is not None:
        cfg = apply_overrides(cfg, [f"scene.frame_stride={args.frame_stride}"])
    if args.format == "synth":
        scene, _ = synth_scene(cfg.synth, cfg.seed, cfg.renderer)
    else:
        ts, imgs, poses, K, _ = _load_frames(args, cfg)
        used = imgs[:: cfg.scene.frame_stride]
        print(f"# frames ingested: {len(used)} of {len(imgs)} (stride {cfg.scene.frame_stride})")
        scene = build_scene(list(zip(imgs, poses)), K, cfg.scene)
    save_scene(args.out, scene)
    write_scene_summary(Path(args.out).with_suffix(".json"), scene)
    s = scene_summary(scene)
    print(f"scene written to {args.out}")
    print(f"  gaussians: {s['n_gaussians']}")
    print(f"  bounds: {s['bounds_min']} .. {s['bounds_max']}")
    print(f"  sigma m: min {s['sigma_min']:.4g} median {s['sigma_median']:.4g} max {s['sigma_max']:.4g}")
    return EXIT_OK


def cmd_localize(args) -> int:
    cfg = _load_run_config(args)
    _print_header(cfg)
    scene = load_scene(args.scene)
    ts, imgs, gts, K, _ = _load_frames(args, cfg)

    loss_log = open(args.log, "w") if args.log else None
    frame_log = open(args.frame_log, "w") if args.frame_log else None
    if loss_log:
        loss_log.write("frame,iteration,total,depth,contour,reg\n")

    current = {"frame": 0}

    def frame_cb(k, est):
        if frame_log:
            R = quat_to_rotmat(est.pose.rotation)
            c = (-(R.T @ est.pose.translation)).tolist()
            q = est.pose.rotation.conjugate()
            frame_log.write(json.dumps({
                "frame": k,
                "timestamp": ts[k],
                "iterations": est.iterations_run,
                "converged": est.converged,
                "total": est.final_loss.total,
                "depth_term": est.final_loss.depth_term,
                "contour_term": est.final_loss.contour_term,
                "reg_term": est.final_loss.reg_term,
                "pose_c2w_txyz_qxyzw": c + [q.x, q.y, q.z, q.w],
            }) + "\n")

    results = []
    for k, img in enumerate(imgs):
        current["frame"] = k

        def iter_cb(it, lb, k=k):
            if loss_log:
                loss_log.write(
                    f"{k},{it},{lb.total:.12g},{lb.depth_term:.12g},"
                    f"{lb.contour_term:.12g},{lb.reg_term:.12g}\n"
                )

        init = gts[max(k - 1, 0)] if args.init == "gt" else (
            results[-1].pose if results and results[-1] is not None else gts[0]
        )
        from .pose_opt import localize as _localize

        try:
            est = _localize(scene, K, img, init, cfg.optimizer, cfg.loss, cfg.renderer, iter_cb)
        except (EmptyOverlapError, NumericError) as e:
            print(f"frame {k}: FAILED ({e})", file=sys.stderr)
            results.append(None)
            continue
        results.append(est)
        frame_cb(k, est)
        print(f"frame {k}: iters {est.iterations_run} total {est.final_loss.total:.6g} "
              f"converged {est.converged}")

    if loss_log:
        loss_log.close()
    if frame_log:
        frame_log.close()

    ok = [(t, r) for t, r in zip(ts, results) if r is not None]
    if not ok:
        print("all frames failed", file=sys.stderr)
        return EXIT_NUMERIC
    write_trajectory_tum(args.out, [TrajectoryEntry(t, r.pose) for t, r in ok])
    print(f"trajectory written to {args.out} ({len(ok)}/{len(results)} frames)")

    if args.report:
        est_poses = [r.pose for _, r in ok]
        gt_poses = [g for g, r in zip(gts, results) if r is not None]
        rep = report_sequence(args.format, est_poses, gt_poses, args.report,
                              [t for t, _ in ok])
        print(f"ATE RMSE {rep.ate_rmse_cm:.4f} cm  AAE RMSE {rep.aae_rmse_deg:.4f} deg")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    _print_header(cfg)
    est = read_trajectory_tum(args.est)
    gt = read_trajectory_tum(args.gt)
    from .dataio import associate_timestamps

    pairs = associate_timestamps([e.timestamp for e in est], [g.timestamp for g in gt],
                                 cfg.data.assoc_max_dt)
    if not pairs:
        print("no matching timestamps between trajectories", file=sys.stderr)
        return EXIT_INPUT
    est_p = [est[i].pose for i, _ in pairs]
    gt_p = [gt[j].pose for _, j in pairs]
    rep = report_sequence(args.name, est_p, gt_p, args.out,
                          [est[i].timestamp for i, _ in pairs])
    print(f"{'sequence':<16}{'frames':>8}{'ATE cm':>12}{'AAE deg':>12}")
    print(f"{rep.name:<16}{rep.n_frames:>8}{rep.ate_rmse_cm:>12.4f}{rep.aae_rmse_deg:>12.4f}")
    if args.assert_max_ate is not None and rep.ate_rmse_cm > args.assert_max_ate:
        print(f"ATE {rep.ate_rmse_cm:.4f} cm exceeds threshold {args.assert_max_ate}", file=sys.stderr)
        return EXIT_ASSERTION
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_run_config(args)
    _print_header(cfg)
    results = run_gradcheck(trials=args.trials, seed=cfg.seed, precision=cfg.renderer.precision)
    print(f"{'trial':>6}{'gaussians':>10}{'resamples':>10}{'max rel':>12}{'max abs':>12}{'status':>8}")
    for i, r in enumerate(results):
        print(f"{i:>6}{r.n_gaussians:>10}{r.resamples:>10}{r.max_rel_err:>12.3e}"
              f"{r.max_abs_err:>12.3e}{'PASS' if r.passed else 'FAIL':>8}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} trials passed")
    return EXIT_OK if failed == 0 else EXIT_ASSERTION


def _parse_pose_arg(text: str) -> Pose:
    vals = [float(v) for v in text.split()]
    if len(vals) != 7:
        raise ValueError("--pose expects 7 values: tx ty tz qx qy qz qw (camera-to-world)")
    tx, ty, tz, qx, qy, qz, qw = vals
    q = quat_normalize(Quaternion(qw, qx, qy, qz))
    R = quat_to_rotmat(q)
    return Pose(q.conjugate(), -(R.T @ np.array([tx, ty, tz])))


def cmd_render(args) -> int:
    cfg = _load_run_config(args)
    _print_header(cfg)
    scene = load_scene(args.scene)
    if args.pose is not None:
        pose = _parse_pose_arg(args.pose)
    else:
        traj = read_trajectory_tum(args.traj)
        pose = traj[args.index].pose
    K = cfg.synth.intrinsics() if args.synth_intrinsics else cfg.intrinsics
    out = render(scene, K, pose, cfg.renderer)
    save_depth_png(args.out, np.where(out.mask, out.norm_depth, 0.0), cfg.data.depth_png_scale)
    print(f"depth written to {args.out} (scale {cfg.data.depth_png_scale} counts/m, "
          f"{int(out.mask.sum())} valid px)")
    if args.alpha_out:
        save_depth_png(args.alpha_out, out.alpha, 65535.0)
    if args.csv:
        save_depth_csv(args.csv, out.norm_depth)
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load_run_config(args)
    _print_header(cfg)
    out_dir = Path(args.out)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)
    scene, frames = synth_scene(cfg.synth, cfg.seed, cfg.renderer)
    save_scene(out_dir / "scene.bin", scene)
    write_scene_summary(out_dir / "scene.json", scene)
    K = cfg.synth.intrinsics()
    depth_lines = []
    entries = []
    for i, (img, pose) in enumerate(frames):
        t = i / 30.0
        name = f"depth/{t:.6f}.png"
        save_depth_png(out_dir / name, img.depth, cfg.data.tum_depth_factor)
        depth_lines.append(f"{t:.6f} {name}")
        entries.append(TrajectoryEntry(t, pose))
    (out_dir / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    write_trajectory_tum(out_dir / "groundtruth.txt", entries)
    with open(out_dir / "intrinsics.json", "w") as f:
        json.dump({"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
                   "width": K.width, "height": K.height,
                   "near": K.near, "far": K.far}, f, indent=2)
    print(f"synthetic dataset written to {out_dir} ({len(frames)} frames, {len(scene)} gaussians)")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. renderer.tile_size=32 (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (shortcut for --set seed=N)")
    p.add_argument("--precision", choices=["f64", "f32"], help="arithmetic precision")
    p.add_argument("--threads", type=int,
                   help="worker count hint, 0 = auto; outputs are deterministic regardless")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="splatalign",
        description="Depth-only camera localization against 3D Gaussian scenes.",
        epilog="exit codes: 0 ok, 2 input error, 3 assertion failure, 4 numeric failure",
    )
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-scene", help="build a Gaussian scene from posed depth frames")
    p.add_argument("--dataset", help=f"dataset directory (or relative to ${DATA_ROOT_ENV})")
    p.add_argument("--format", required=True, choices=["tum", "replica", "synth"])
    p.add_argument("--out", required=True, help="output scene file (.bin)")
    p.add_argument("--frame-stride", type=int, help="use every Nth reference frame")
    _add_common(p)
    p.set_defaults(func=cmd_build_scene)

    p = sub.add_parser("localize", help="recover per-frame camera poses")
    p.add_argument("--scene", required=True)
    p.add_argument("--dataset", help="dataset directory (unused for --format synth)")
    p.add_argument("--format", required=True, choices=["tum", "replica", "synth"])
    p.add_argument("--init", default="gt", choices=["gt", "prev"],
                   help="per-frame initialization policy")
    p.add_argument("--out", required=True, help="output trajectory (TUM format)")
    p.add_argument("--log", help="per-iteration loss CSV")
    p.add_argument("--frame-log", help="per-frame JSON-lines log")
    p.add_argument("--report", help="write metric report CSV/JSON at this base path")
    _add_common(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="compare trajectories (ATE RMSE, AAE RMSE)")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--name", default="sequence")
    p.add_argument("--out", help="report base path (writes .csv and .json)")
    p.add_argument("--assert-max-ate", type=float, metavar="CM",
                   help="exit 3 if ATE RMSE exceeds this many cm")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="validate pose gradients against finite differences")
    p.add_argument("--trials", type=int, default=50)
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render", help="render a depth map from a scene")
    p.add_argument("--scene", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--pose", help='"tx ty tz qx qy qz qw" camera-to-world')
    g.add_argument("--traj", help="take the pose from this trajectory file")
    p.add_argument("--index", type=int, default=0, help="frame index within --traj")
    p.add_argument("--out", required=True, help="16-bit depth PNG")
    p.add_argument("--alpha-out", help="optional 16-bit alpha PNG")
    p.add_argument("--csv", help="optional raw CSV export")
    p.add_argument("--synth-intrinsics", action="store_true",
                   help="use the synth section's intrinsics instead of [intrinsics]")
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("synth", help="generate a synthetic dataset (TUM layout)")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, OSError, ParseError, InvalidSpecError, DegenerateCloudError,
            DegenerateQuaternionError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
