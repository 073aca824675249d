"""Naive per-pixel reference renderer.

Deliberately avoids the tile machinery: every pixel walks the full
depth-sorted Gaussian list and composites with scalar front-to-back updates.
Used to cross-check the tiled rasterizer and to inspect per-pixel
transmittance chains; far too slow for real use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import CameraIntrinsics, Pose
from .renderer import GaussianScene, RenderConfig, RenderOutput, _project_arrays


@dataclass
class PixelTrace:
    """Per-pixel compositing record: parallel lists over composited contributors."""

    ids: list
    sigma: list
    alpha: list
    transmittance: list   # T going INTO each contributor


def reference_render(
    scene: GaussianScene,
    K: CameraIntrinsics,
    pose: Pose,
    cfg: RenderConfig | None = None,
    collect_traces: bool = False,
):
    """Render like render() but per pixel; returns (RenderOutput, traces | None)."""
    cfg = cfg or RenderConfig()
    dt = cfg.np_dtype
    proj = _project_arrays(scene, K, pose, cfg)

    vis = np.flatnonzero(proj.visible)
    order = np.argsort(proj.depth[vis], kind="stable")
    ids = vis[order]
    u = proj.u[ids]
    v = proj.v[ids]
    ca = proj.con_a[ids]
    cb = proj.con_b[ids]
    cc = proj.con_c[ids]
    d = proj.depth[ids]
    o = proj.opacity[ids]

    H, W = K.height, K.width
    D = np.zeros((H, W), dtype=dt)
    A = np.zeros((H, W), dtype=dt)
    traces = [[None] * W for _ in range(H)] if collect_traces else None

    for i in range(H):
        for j in range(W):
            if ids.size:
                dx = j - u
                dy = i - v
                sigma = 0.5 * (ca * dx * dx + cc * dy * dy) + cb * dx * dy
                cand = np.flatnonzero(sigma <= cfg.sigma_cutoff)
            else:
                cand = np.empty(0, np.int64)
            T = 1.0
            Dp = 0.0
            Ap = 0.0
            rec = PixelTrace([], [], [], []) if collect_traces else None
            for k in cand:
                if T < cfg.transmittance_eps:
                    break
                alpha = min(o[k] * np.exp(-sigma[k]), cfg.alpha_clamp_max)
                Dp += d[k] * alpha * T
                Ap += alpha * T
                if rec is not None:
                    rec.ids.append(int(ids[k]))
                    rec.sigma.append(float(sigma[k]))
                    rec.alpha.append(float(alpha))
                    rec.transmittance.append(float(T))
                T *= 1.0 - alpha
            D[i, j] = Dp
            A[i, j] = Ap
            if traces is not None:
                traces[i][j] = rec

    mask = A > cfg.alpha_floor
    norm = np.zeros_like(D)
    np.divide(D, A, out=norm, where=mask)
    return RenderOutput(D, A, norm, mask, None), traces
