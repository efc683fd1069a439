"""Resampling helpers and PNG I/O.

Images are float arrays with channels first, ``(C, H, W)``, or batched
``(B, C, H, W)``, values nominally in ``[0, 1]``.  The 4x box average in
:func:`box_down4` is the single LR operator used everywhere.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ParameterError, ShapeError

FACTOR = 4


def box_down4(img: np.ndarray) -> np.ndarray:
    *lead, h, w = img.shape
    if h % FACTOR or w % FACTOR:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by {FACTOR}")
    return img.reshape(*lead, h // FACTOR, FACTOR, w // FACTOR, FACTOR).mean(axis=(-3, -1))


def upsample_nearest4(img: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(img, FACTOR, axis=-2), FACTOR, axis=-1)


def _resize_plane(plane: np.ndarray, size: tuple[int, int], resample) -> np.ndarray:
    # PIL works in float32 for mode "F"
    im = Image.fromarray(np.ascontiguousarray(plane, dtype=np.float32), mode="F")
    return np.asarray(im.resize(size, resample=resample), dtype=np.float64)


def upsample4(img: np.ndarray, mode: str = "bicubic") -> np.ndarray:
    """Upsample the last two axes by 4 with ``nearest``, ``bilinear`` or ``bicubic``."""
    if mode == "nearest":
        return upsample_nearest4(np.asarray(img, dtype=np.float64))
    filters = {"bilinear": Image.BILINEAR, "bicubic": Image.BICUBIC}
    if mode not in filters:
        raise ParameterError(f"unknown interpolation {mode!r}")
    *lead, h, w = img.shape
    flat = np.asarray(img).reshape(-1, h, w)
    out = np.stack([_resize_plane(p, (w * FACTOR, h * FACTOR), filters[mode]) for p in flat])
    return out.reshape(*lead, h * FACTOR, w * FACTOR)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: str | Path, img: np.ndarray) -> None:
    """Write a ``(C, H, W)`` float image (C = 1 or 3) as 8-bit PNG."""
    arr = to_uint8(img)
    arr = arr[0] if arr.shape[0] == 1 else np.transpose(arr, (1, 2, 0))
    Image.fromarray(arr).save(path, optimize=False)


def load_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return arr[None]
    return np.transpose(arr[..., :3], (2, 0, 1))


def save_depth_png(path: str | Path, depth: np.ndarray, scale: float = 1000.0) -> None:
    """16-bit grayscale depth: stored value = round(depth * scale), clipped to uint16."""
    arr = np.clip(np.round(np.asarray(depth) * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def load_depth_png(path: str | Path, scale: float = 1000.0) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / scale
