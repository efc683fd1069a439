"""Image-quality and cross-view consistency metrics.

``sharpness`` (variance of the Laplacian) stands in for a no-reference
naturalness score and ``warped_consistency`` uses a masked mean absolute
difference where a learned perceptual distance would normally go.  Outputs
label them as proxies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import ParameterError, ShapeError
from .imageops import box_down4
from .kernels import splat_zbuffer

PSNR_CAP = 99.0
MIN_COVERAGE = 0.05
LUMA = np.array([0.299, 0.587, 0.114])

UPSCALE_HEADER = ("method", "seed", "sharpness", "lr_consistency")
EVAL_HEADER = ("scene", "method", "cycle", "psnr", "ssim", "sharpness",
               "warped_consistency", "lr_consistency", "coverage")


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window: int = 11, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows, averaged over channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ParameterError(f"image {a.shape[-2:]} smaller than the {window}px window")
    k = _gaussian_window(window)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    scores = []
    for x, y in zip(a.reshape(-1, *a.shape[-2:]), b.reshape(-1, *b.shape[-2:])):
        mx = convolve2d(x, k, mode="valid")
        my = convolve2d(y, k, mode="valid")
        sxx = convolve2d(x * x, k, mode="valid") - mx * mx
        syy = convolve2d(y * y, k, mode="valid") - my * my
        sxy = convolve2d(x * y, k, mode="valid") - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[0] == 1:
        return img[0]
    return np.tensordot(LUMA, img[:3], axes=1)


_LAPLACE = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def sharpness(img) -> float:
    """Variance of the 3x3 Laplacian of the luma channel."""
    return float(np.var(convolve2d(luma(img), _LAPLACE, mode="valid")))


def lr_consistency(sr_img, lr_img) -> float:
    sr = np.asarray(sr_img, dtype=np.float64)
    lr = np.asarray(lr_img, dtype=np.float64)
    if sr.shape[:-2] != lr.shape[:-2] or sr.shape[-2] != 4 * lr.shape[-2] or sr.shape[-1] != 4 * lr.shape[-1]:
        raise ShapeError(f"SR {sr.shape} is not 4x LR {lr.shape}")
    return float(np.mean(np.abs(box_down4(sr) - lr)))


# -- warping -----------------------------------------------------------------


@dataclass
class WarpResult:
    image: np.ndarray
    mask: np.ndarray
    coverage: float


def warp_view(img_src, depth_src, cam_src, cam_tgt) -> WarpResult:
    """Forward-warp ``img_src`` into ``cam_tgt`` using per-pixel ray depths.

    Each source pixel is backprojected along its unit ray by its depth,
    projected into the target, and splatted into one pixel; the nearest
    point along the target's optical axis wins.
    """
    img = np.asarray(img_src, dtype=np.float64)
    depth = np.asarray(depth_src, dtype=np.float64)
    origins, dirs = cam_src.pixel_rays()
    pts = origins + dirs * depth.reshape(-1, 1)
    px, py, z = cam_tgt.project(pts)
    colors = np.ascontiguousarray(img.reshape(img.shape[0], -1).T)
    out, _, mask = splat_zbuffer(
        np.ascontiguousarray(np.floor(px).astype(np.int64)),
        np.ascontiguousarray(np.floor(py).astype(np.int64)),
        np.ascontiguousarray(z), colors, cam_tgt.height, cam_tgt.width)
    return WarpResult(image=out, mask=mask, coverage=float(mask.mean()))


def warped_consistency(render_v, render_vp, depth_vp, cam_v, cam_vp) -> tuple[float | None, float]:
    """Masked mean |I_v - W(I_v')|; returns ``(score, coverage)``.

    The score is ``None`` when less than 5% of the target is covered.
    """
    warp = warp_view(render_vp, depth_vp, cam_vp, cam_v)
    if warp.coverage < MIN_COVERAGE:
        return None, warp.coverage
    diff = np.abs(np.asarray(render_v, dtype=np.float64) - warp.image)
    return float(diff[:, warp.mask].mean()), warp.coverage


def nth_nearest(cameras, i: int, n: int = 3) -> int:
    """Index of the ``n``-th nearest camera centre to camera ``i``."""
    centers = np.stack([c.center for c in cameras])
    d = np.linalg.norm(centers - centers[i], axis=1)
    d[i] = np.inf
    return int(np.argsort(d, kind="stable")[n - 1])
