"""Pure numpy kernels; the reference the compiled module must match.

Grids are indexed ``[x, y, z]`` with vertices spanning ``lo..hi`` inclusive.
Ray segments ``[t0, t1]`` are precomputed by the caller; ``t1 <= t0`` marks a
miss.  Sample ``i`` of a ray sits at ``t0 + (i + jitter[i]) * delta`` with
``delta = (t1 - t0) / S``.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def _samples(lo, hi, n, origins, dirs, t0, t1, jitter):
    s = jitter.shape[1]
    delta = np.maximum(t1 - t0, 0.0) / s
    ts = t0[:, None] + (np.arange(s)[None, :] + jitter) * delta[:, None]
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    u = (pts - lo) / (hi - lo) * (n - 1)
    u = np.clip(u, 0.0, n - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), n - 2)
    f = u - i0
    return delta, ts, i0, f


def _corners(i0, f, n):
    """Flat vertex indices and trilinear weights, each ``(..., 8)``."""
    idx, wts = [], []
    for dx in (0, 1):
        wx = f[..., 0] if dx else 1.0 - f[..., 0]
        for dy in (0, 1):
            wy = f[..., 1] if dy else 1.0 - f[..., 1]
            for dz in (0, 1):
                wz = f[..., 2] if dz else 1.0 - f[..., 2]
                idx.append(((i0[..., 0] + dx) * n + (i0[..., 1] + dy)) * n + (i0[..., 2] + dz))
                wts.append(wx * wy * wz)
    return np.stack(idx, -1), np.stack(wts, -1)


def _composite(dens, col, lo, hi, origins, dirs, t0, t1, jitter):
    n = dens.shape[0]
    delta, ts, i0, f = _samples(lo, hi, n, origins, dirs, t0, t1, jitter)
    idx, wts = _corners(i0, f, n)
    sigma = np.einsum("rsk,rsk->rs", dens.reshape(-1)[idx], wts)
    c = np.einsum("rskc,rsk->rsc", col.reshape(-1, 3)[idx], wts)
    alpha = 1.0 - np.exp(-sigma * delta[:, None])
    trans = np.cumprod(1.0 - alpha, axis=1)
    t_before = np.concatenate([np.ones((len(t0), 1)), trans[:, :-1]], axis=1)
    w = t_before * alpha
    hit = t1 > t0
    w[~hit] = 0.0
    return delta, ts, idx, wts, c, alpha, trans, t_before, w, hit


def render_forward(dens, col, lo, hi, origins, dirs, t0, t1, jitter, bg, far):
    _, ts, _, _, c, _, trans, _, w, hit = _composite(dens, col, lo, hi, origins, dirs, t0, t1, jitter)
    residual = np.where(hit, trans[:, -1], 1.0)
    rgb = np.einsum("rs,rsc->rc", w, c) + residual[:, None] * bg[None]
    depth = (w * ts).sum(axis=1) + residual * far
    return rgb, depth, 1.0 - residual


def render_backward(dens, col, lo, hi, origins, dirs, t0, t1, jitter, bg, far, g_rgb):
    """Gradients of ``sum(g_rgb * rgb)`` w.r.t. the activated density and color grids."""
    n = dens.shape[0]
    delta, ts, idx, wts, c, alpha, trans, t_before, w, hit = _composite(
        dens, col, lo, hi, origins, dirs, t0, t1, jitter)
    residual = np.where(hit, trans[:, -1], 1.0)
    acc = np.cumsum(w[..., None] * c, axis=1)
    rgb = acc[:, -1] + residual[:, None] * bg[None]
    after = rgb[:, None, :] - acc
    g_sigma = delta[:, None] * np.einsum("rc,rsc->rs", g_rgb, trans[..., None] * c - after)
    g_sigma[~hit] = 0.0
    g_c = w[..., None] * g_rgb[:, None, :]
    flat = idx.reshape(-1)
    gd = np.bincount(flat, weights=(g_sigma[..., None] * wts).reshape(-1), minlength=n ** 3)
    gc = np.stack([
        np.bincount(flat, weights=(g_c[..., ch, None] * wts).reshape(-1), minlength=n ** 3)
        for ch in range(3)
    ], axis=-1)
    return gd.reshape(dens.shape), gc.reshape(col.shape)


def splat_zbuffer(px, py, z, colors, height, width):
    """Nearest-depth 1-pixel splats.  Ties go to the earlier point.

    Returns ``(image (C, H, W), zbuf (H, W), mask (H, W))``; points outside
    the image or with ``z <= 0`` are dropped.
    """
    nch = colors.shape[1]
    keep = (px >= 0) & (px < width) & (py >= 0) & (py < height) & (z > 0)
    order = np.flatnonzero(keep)
    lin = py[order] * width + px[order]
    srt = np.lexsort((order, z[order], lin))
    lin_s = lin[srt]
    first = np.ones(len(lin_s), dtype=bool)
    first[1:] = lin_s[1:] != lin_s[:-1]
    win = order[srt[first]]
    pix = lin_s[first]
    img = np.zeros((nch, height * width))
    zbuf = np.full(height * width, np.inf)
    mask = np.zeros(height * width, dtype=bool)
    img[:, pix] = colors[win].T
    zbuf[pix] = z[win]
    mask[pix] = True
    return img.reshape(nch, height, width), zbuf.reshape(height, width), mask.reshape(height, width)
