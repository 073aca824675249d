"""Compiled compositing kernels.

All kernels are sequential (tile-major, then pixel, then contributor order)
so repeated runs are bit-identical. Contributor candidate lists arrive
depth-sorted per tile; `tile_bounds` gives [start, end) into `pair_gid`
for each tile in raster order.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def composite_forward(
    pair_gid, tile_bounds, ntx, tile_size, height, width,
    u, v, con_a, con_b, con_c, dep, opac,
    sigma_cutoff, alpha_clamp, trans_eps,
    D, A, processed,
):
    """Front-to-back depth/alpha compositing.

    Per pixel: sigma_n = 0.5 * Delta^T Sigma_I^{-1} Delta with Delta = pixel - mean;
    alpha_n = o_n * exp(-sigma_n) clamped; D += d_n alpha_n T_n; A += alpha_n T_n;
    T_{n+1} = T_n (1 - alpha_n). Contributors with sigma above the cutoff are
    skipped entirely; iteration stops once T drops below trans_eps.
    `processed[tile]` records how many candidate rows any pixel looked at.
    """
    n_tiles = tile_bounds.size - 1
    for tid in range(n_tiles):
        lo = tile_bounds[tid]
        hi = tile_bounds[tid + 1]
        if lo == hi:
            continue
        ty = tid // ntx
        tx = tid - ty * ntx
        x0 = tx * tile_size
        x1 = min(x0 + tile_size, width)
        y0 = ty * tile_size
        y1 = min(y0 + tile_size, height)
        maxk = 0
        for py in range(y0, y1):
            for px in range(x0, x1):
                T = 1.0
                Dp = 0.0
                Ap = 0.0
                k = lo
                while k < hi:
                    if T < trans_eps:
                        break
                    g = pair_gid[k]
                    dx = px - u[g]
                    dy = py - v[g]
                    s = 0.5 * (con_a[g] * dx * dx + con_c[g] * dy * dy) + con_b[g] * dx * dy
                    if s <= sigma_cutoff:
                        a = opac[g] * np.exp(-s)
                        if a > alpha_clamp:
                            a = alpha_clamp
                        Dp += dep[g] * a * T
                        Ap += a * T
                        T *= 1.0 - a
                    k += 1
                if k - lo > maxk:
                    maxk = k - lo
                D[py, px] = Dp
                A[py, px] = Ap
        processed[tid] = maxk


@njit(cache=True)
def composite_backward(
    pair_gid, tile_bounds, processed, ntx, tile_size, height, width,
    u, v, con_a, con_b, con_c, dep, opac,
    sigma_cutoff, alpha_clamp, trans_eps,
    dD, dA,
    g_u, g_v, g_cov_a, g_cov_b, g_cov_c, g_dep,
):
    """Reverse of composite_forward.

    Replays each pixel's chain, then walks it back accumulating the suffix
    sums S_D(n) = sum_{m>n} d_m w_m and S_A(n) = sum_{m>n} w_m, giving
      dL/dalpha_n = dD (d_n T_n - S_D/(1-alpha_n)) + dA (T_n - S_A/(1-alpha_n))
      dL/dsigma_n = -alpha_n dL/dalpha_n   (zero where the clamp was active)
      dL/dmean    = -dL/dsigma * conic Delta
      dL/dSigma_I = -0.5 dL/dsigma (conic Delta)(conic Delta)^T  (packed a, b, c)
      dL/dd_n     = dD alpha_n T_n
    Cutoff skips, clamping, and the transmittance stop are treated as
    non-differentiable constants of the forward pass.
    """
    n_tiles = tile_bounds.size - 1
    maxc = 0
    for tid in range(n_tiles):
        c = tile_bounds[tid + 1] - tile_bounds[tid]
        if c > maxc:
            maxc = c
    kbuf = np.empty(maxc, np.int64)
    abuf = np.empty(maxc, np.float64)
    tbuf = np.empty(maxc, np.float64)
    cbuf = np.empty(maxc, np.bool_)

    for tid in range(n_tiles):
        lo = tile_bounds[tid]
        hi = lo + processed[tid]
        if lo == hi:
            continue
        ty = tid // ntx
        tx = tid - ty * ntx
        x0 = tx * tile_size
        x1 = min(x0 + tile_size, width)
        y0 = ty * tile_size
        y1 = min(y0 + tile_size, height)
        for py in range(y0, y1):
            for px in range(x0, x1):
                dDp = dD[py, px]
                dAp = dA[py, px]
                if dDp == 0.0 and dAp == 0.0:
                    continue
                T = 1.0
                m = 0
                k = lo
                while k < hi:
                    if T < trans_eps:
                        break
                    g = pair_gid[k]
                    dx = px - u[g]
                    dy = py - v[g]
                    s = 0.5 * (con_a[g] * dx * dx + con_c[g] * dy * dy) + con_b[g] * dx * dy
                    if s <= sigma_cutoff:
                        a = opac[g] * np.exp(-s)
                        clamped = a > alpha_clamp
                        if clamped:
                            a = alpha_clamp
                        kbuf[m] = g
                        abuf[m] = a
                        tbuf[m] = T
                        cbuf[m] = clamped
                        m += 1
                        T *= 1.0 - a
                    k += 1
                SD = 0.0
                SA = 0.0
                for n in range(m - 1, -1, -1):
                    g = kbuf[n]
                    a = abuf[n]
                    Tn = tbuf[n]
                    w = a * Tn
                    om = 1.0 - a
                    inv = 1.0 / om if om > 0.0 else 0.0
                    dal = dDp * (dep[g] * Tn - SD * inv) + dAp * (Tn - SA * inv)
                    if not cbuf[n]:
                        dsig = -a * dal
                        dx = px - u[g]
                        dy = py - v[g]
                        y1v = con_a[g] * dx + con_b[g] * dy
                        y2v = con_b[g] * dx + con_c[g] * dy
                        g_u[g] -= dsig * y1v
                        g_v[g] -= dsig * y2v
                        g_cov_a[g] -= dsig * 0.5 * y1v * y1v
                        g_cov_b[g] -= dsig * y1v * y2v
                        g_cov_c[g] -= dsig * 0.5 * y2v * y2v
                    g_dep[g] += dDp * w
                    SD += dep[g] * w
                    SA += w


@njit(cache=True)
def discrete_signature_maps(
    pair_gid, tile_bounds, ntx, tile_size, height, width,
    u, v, con_a, con_b, con_c, opac,
    sigma_cutoff, alpha_clamp, trans_eps,
    considered, composited, clamped_ct, gid_hash,
):
    """Per-pixel discrete structure of a render.

    Captures everything non-differentiable: how many candidates each pixel
    looked at, which ones passed the sigma cutoff (order-sensitive FNV hash),
    and how many hit the alpha clamp. Two renders with equal maps (plus equal
    validity masks) followed the same compositing branches.
    """
    n_tiles = tile_bounds.size - 1
    for tid in range(n_tiles):
        lo = tile_bounds[tid]
        hi = tile_bounds[tid + 1]
        if lo == hi:
            continue
        ty = tid // ntx
        tx = tid - ty * ntx
        x0 = tx * tile_size
        x1 = min(x0 + tile_size, width)
        y0 = ty * tile_size
        y1 = min(y0 + tile_size, height)
        for py in range(y0, y1):
            for px in range(x0, x1):
                T = 1.0
                n_cons = 0
                n_comp = 0
                n_clmp = 0
                h = np.uint64(1469598103934665603)
                k = lo
                while k < hi:
                    if T < trans_eps:
                        break
                    g = pair_gid[k]
                    dx = px - u[g]
                    dy = py - v[g]
                    s = 0.5 * (con_a[g] * dx * dx + con_c[g] * dy * dy) + con_b[g] * dx * dy
                    n_cons += 1
                    if s <= sigma_cutoff:
                        a = opac[g] * np.exp(-s)
                        if a > alpha_clamp:
                            a = alpha_clamp
                            n_clmp += 1
                        n_comp += 1
                        h = (h ^ np.uint64(g + 1)) * np.uint64(1099511628211)
                        T *= 1.0 - a
                    k += 1
                considered[py, px] = n_cons
                composited[py, px] = n_comp
                clamped_ct[py, px] = n_clmp
                gid_hash[py, px] = h
