"""Alignment objective: masked L1 depth loss, Sobel contour loss, regularizers.

Both image terms are means over their valid pixel sets by default, which
keeps the loss scale independent of how much of the image the map covers;
`reduction="sum"` restores plain sums. The valid set intersects the rendered
alpha mask with the observed sensor validity, and is treated as a hard,
non-differentiable gate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataio import DepthImage
from .errors import EmptyOverlapError
from .geom import Pose
from .renderer import RenderOutput

logger = logging.getLogger(__name__)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


@dataclass(frozen=True)
class LossWeights:
    """Objective weights and switches.

    lambda_q / lambda_t are the explicit L2 penalty coefficients on the raw
    quaternion and translation. They default to 0 because the optimizer's
    weight decay already applies the equivalent pull; enabling both would
    regularize twice.
    """

    lambda1: float = 0.8
    lambda2: float = 0.2
    lambda_q: float = 0.0
    lambda_t: float = 0.0
    depth_source: str = "normalized"   # "normalized" | "raw"
    reduction: str = "mean"            # "mean" | "sum"

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda_q, self.lambda_t) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.depth_source not in ("normalized", "raw"):
            raise ValueError("depth_source must be 'normalized' or 'raw'")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")


@dataclass
class LossBreakdown:
    total: float
    depth_term: float
    contour_term: float
    reg_term: float
    valid_pixel_count: int
    contour_pixel_count: int
    dL_dNormD: np.ndarray
    dL_dAlpha: np.ndarray
    dL_dDepth: np.ndarray | None = None


def sobel_gradients(img: np.ndarray, mask: np.ndarray):
    """Raw 3x3 Sobel responses (gx, gy, valid).

    Valid only where the full 3x3 neighborhood is inside `mask`; borders and
    mask fringes are flagged invalid and carry zeros.
    """
    img = np.asarray(img)
    mask = np.asarray(mask, dtype=bool)
    H, W = img.shape
    if H < 3 or W < 3:
        raise ValueError("image must be at least 3x3 for Sobel gradients")
    gx = np.zeros_like(img, dtype=np.float64)
    gy = np.zeros_like(gx)
    valid = np.zeros_like(mask)
    valid[1:-1, 1:-1] = True
    for a in range(3):
        for b in range(3):
            sl = img[a : H - 2 + a, b : W - 2 + b]
            gx[1:-1, 1:-1] += SOBEL_X[a, b] * sl
            gy[1:-1, 1:-1] += SOBEL_Y[a, b] * sl
            valid[1:-1, 1:-1] &= mask[a : H - 2 + a, b : W - 2 + b]
    gx[~valid] = 0.0
    gy[~valid] = 0.0
    return gx, gy, valid


def _sobel_adjoint(u: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Transpose of the interior Sobel correlation; u must be zero on borders."""
    H, W = u.shape
    out = np.zeros_like(u)
    ui = u[1:-1, 1:-1]
    for a in range(3):
        for b in range(3):
            out[a : H - 2 + a, b : W - 2 + b] += kernel[a, b] * ui
    return out


def depth_loss(rendered: np.ndarray, observed: DepthImage, mask: np.ndarray, reduction: str = "mean"):
    """Masked L1 depth difference and its gradient w.r.t. the rendered map."""
    m = np.asarray(mask, dtype=bool) & observed.valid
    n = int(m.sum())
    if n == 0:
        raise EmptyOverlapError("no valid pixels shared between rendered and observed depth")
    diff = np.asarray(rendered, dtype=np.float64) - observed.depth
    scale = 1.0 / n if reduction == "mean" else 1.0
    loss = float(np.abs(diff[m]).sum() * scale)
    grad = np.where(m, np.sign(diff) * scale, 0.0)
    return loss, grad


def contour_loss(rendered: np.ndarray, observed: DepthImage, mask: np.ndarray, reduction: str = "mean"):
    """L1 difference of Sobel depth gradients; returns (loss, grad, n_valid).

    An empty contour-valid set contributes zero with a warning rather than
    failing; thin overlaps legitimately have no interior pixels.
    """
    m = np.asarray(mask, dtype=bool) & observed.valid
    gx_r, gy_r, valid = sobel_gradients(np.asarray(rendered, dtype=np.float64), m)
    gx_o, gy_o, _ = sobel_gradients(observed.depth, m)
    n = int(valid.sum())
    if n == 0:
        logger.warning("contour loss: no interior pixels in the valid mask; term is 0")
        return 0.0, np.zeros_like(gx_r), 0
    ex = np.where(valid, gx_r - gx_o, 0.0)
    ey = np.where(valid, gy_r - gy_o, 0.0)
    scale = 1.0 / n if reduction == "mean" else 1.0
    loss = float((np.abs(ex) + np.abs(ey)).sum() * scale)
    grad = _sobel_adjoint(np.sign(ex) * scale, SOBEL_X) + _sobel_adjoint(np.sign(ey) * scale, SOBEL_Y)
    return loss, grad, n


def total_loss(render_out: RenderOutput, observed: DepthImage, pose: Pose, w: LossWeights) -> LossBreakdown:
    """lambda1 * depth + lambda2 * contour + L2 regularizers, with backward maps."""
    source = render_out.norm_depth if w.depth_source == "normalized" else render_out.depth
    mask = render_out.mask
    d_term, d_grad = depth_loss(source, observed, mask, w.reduction)
    c_term, c_grad, c_n = contour_loss(source, observed, mask, w.reduction)
    q = pose.rotation.as_array()
    t = pose.translation
    reg = float(w.lambda_q * (q @ q) + w.lambda_t * (t @ t))
    total = w.lambda1 * d_term + w.lambda2 * c_term + reg
    cot = w.lambda1 * d_grad + w.lambda2 * c_grad
    zeros = np.zeros_like(cot)
    m_all = np.asarray(mask, dtype=bool) & observed.valid
    return LossBreakdown(
        total=total,
        depth_term=d_term,
        contour_term=c_term,
        reg_term=reg,
        valid_pixel_count=int(m_all.sum()),
        contour_pixel_count=c_n,
        dL_dNormD=cot if w.depth_source == "normalized" else zeros,
        dL_dAlpha=zeros.copy(),
        dL_dDepth=cot if w.depth_source == "raw" else None,
    )


def reg_gradient(pose: Pose, w: LossWeights):
    """Ambient-space gradient of the L2 regularizers (unprojected by design)."""
    return 2.0 * w.lambda_q * pose.rotation.as_array(), 2.0 * w.lambda_t * pose.translation
