"""Dense voxel radiance field with emission-absorption rendering.

Density is ``density_scale * softplus(density_raw)`` and color is
``sigmoid(color_raw)``; both activated grids are trilinearly interpolated at
stratified samples inside the bounding box.  Gradients are analytic and
computed by the kernels in :mod:`srfield.kernels`.

Cameras follow the OpenCV convention (x right, y down, z forward) and store
world-from-camera matrices.  Depth is the distance along the unit ray.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ParameterError, ShapeError, StateError

log = logging.getLogger(__name__)


# -- cameras -----------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    focal: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self):
        c2w = np.asarray(self.c2w, dtype=np.float64)
        if c2w.shape == (3, 4):
            c2w = np.vstack([c2w, [0, 0, 0, 1]])
        if c2w.shape != (4, 4):
            raise ShapeError("c2w must be 3x4 or 4x4")
        object.__setattr__(self, "c2w", c2w)
        if self.focal <= 0:
            raise ParameterError("focal length must be positive")
        if not self.near < self.far:
            raise ParameterError("near must be smaller than far")
        r = c2w[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ParameterError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, width: int, height: int, focal: float, up=(0.0, 0.0, 1.0),
                near: float = 0.1, far: float = 10.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        c2w = np.eye(4)
        c2w[:3, :3] = np.stack([right, down, fwd], axis=1)
        c2w[:3, 3] = eye
        return cls(focal, width / 2.0, height / 2.0, width, height, c2w, near, far)

    @property
    def center(self) -> np.ndarray:
        return self.c2w[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:3, :3]

    def scaled(self, k: int) -> "Camera":
        return replace(self, focal=self.focal * k, cx=self.cx * k, cy=self.cy * k,
                       width=self.width * k, height=self.height * k)

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit rays through pixel centres, row-major ``(H * W, 3)``."""
        v, u = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        d = np.stack([(u - self.cx) / self.focal, (v - self.cy) / self.focal, np.ones_like(u)], -1)
        d = d.reshape(-1, 3) @ self.rotation.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.broadcast_to(self.center, d.shape).copy(), d

    def project(self, pts: np.ndarray):
        """World points to continuous pixel coordinates and camera-axis depth."""
        pc = (np.asarray(pts) - self.center) @ self.rotation
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = self.focal * pc[:, 0] / z + self.cx
            py = self.focal * pc[:, 1] / z + self.cy
        bad = ~(z > 0)
        px[bad] = -1
        py[bad] = -1
        return px, py, z

    def to_dict(self) -> dict:
        return {"focal": self.focal, "cx": self.cx, "cy": self.cy, "width": self.width,
                "height": self.height, "near": self.near, "far": self.far,
                "c2w": self.c2w.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["focal"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.asarray(d["c2w"]), d["near"], d["far"])


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    colors: np.ndarray | None = None
    view_ids: np.ndarray | None = None

    def __post_init__(self):
        norms = np.linalg.norm(self.dirs, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ParameterError("ray directions must be unit length")

    @classmethod
    def from_camera(cls, cam: Camera, image: np.ndarray | None = None, view_id: int = 0) -> "RayBatch":
        o, d = cam.pixel_rays()
        n = len(o)
        colors = None if image is None else np.asarray(image, dtype=np.float64).reshape(3, -1).T.copy()
        return cls(o, d, np.full(n, cam.near), np.full(n, cam.far), colors, np.full(n, view_id))

    def subset(self, idx) -> "RayBatch":
        pick = lambda a: None if a is None else a[idx]
        return RayBatch(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx],
                        pick(self.colors), pick(self.view_ids))

    def __len__(self):
        return len(self.origins)


def concat_rays(batches: Sequence[RayBatch]) -> RayBatch:
    def cat(name):
        parts = [getattr(b, name) for b in batches]
        return None if any(p is None for p in parts) else np.concatenate(parts)

    return RayBatch(cat("origins"), cat("dirs"), cat("near"), cat("far"), cat("colors"), cat("view_ids"))


def ray_box(origins, dirs, lo, hi, near, far):
    """Entry/exit distances of rays against an axis-aligned box, clipped to ``[near, far]``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    ta = np.where(np.isnan(ta), -np.inf, ta)
    tb = np.where(np.isnan(tb), np.inf, tb)
    t0 = np.maximum(np.minimum(ta, tb).max(axis=1), near)
    t1 = np.minimum(np.maximum(ta, tb).min(axis=1), far)
    miss = ~(t1 > t0)
    t0 = np.where(miss, far, t0)
    t1 = np.where(miss, far, t1)
    return t0, t1


# -- the field ----------------------------------------------------------------

ACTIVATIONS = {"density": "scaled_softplus", "color": "sigmoid"}
_MAGIC = b"SRFFLD01"


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class VoxelField:
    density_raw: np.ndarray
    color_raw: np.ndarray
    lo: np.ndarray = field(default_factory=lambda: np.full(3, -1.0))
    hi: np.ndarray = field(default_factory=lambda: np.full(3, 1.0))
    density_scale: float = 10.0

    def __post_init__(self):
        self.density_raw = np.ascontiguousarray(self.density_raw, dtype=np.float64)
        self.color_raw = np.ascontiguousarray(self.color_raw, dtype=np.float64)
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        n = self.density_raw.shape[0]
        if self.density_raw.shape != (n, n, n) or self.color_raw.shape != (n, n, n, 3):
            raise ShapeError("density (N, N, N) and color (N, N, N, 3) grids required")
        if n < 2:
            raise ParameterError("grid resolution must be at least 2")

    @classmethod
    def create(cls, resolution: int = 96, half_extent: float = 1.0, density_init: float = -4.0,
               color_init: float = 0.0, density_scale: float = 10.0) -> "VoxelField":
        n = resolution
        return cls(np.full((n, n, n), density_init), np.full((n, n, n, 3), color_init),
                   np.full(3, -half_extent), np.full(3, half_extent), density_scale)

    @property
    def resolution(self) -> int:
        return self.density_raw.shape[0]

    def density(self) -> np.ndarray:
        return self.density_scale * _softplus(self.density_raw)

    def color(self) -> np.ndarray:
        return _sigmoid(self.color_raw)

    def copy(self) -> "VoxelField":
        return replace(self, density_raw=self.density_raw.copy(), color_raw=self.color_raw.copy(),
                       lo=self.lo.copy(), hi=self.hi.copy())

    def quantized(self) -> "VoxelField":
        """Round-trip the grids through float32, the checkpoint precision."""
        return replace(self, density_raw=self.density_raw.astype(np.float32).astype(np.float64),
                       color_raw=self.color_raw.astype(np.float32).astype(np.float64))

    def equals(self, other: "VoxelField") -> bool:
        return (np.array_equal(self.density_raw, other.density_raw)
                and np.array_equal(self.color_raw, other.color_raw)
                and np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)
                and self.density_scale == other.density_scale)

    def save(self, path: str | Path) -> None:
        header = json.dumps({
            "version": 1, "resolution": self.resolution, "bbox": [self.lo.tolist(), self.hi.tolist()],
            "activations": ACTIVATIONS, "density_scale": self.density_scale,
        }, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            f.write(self.density_raw.astype("<f4").tobytes())
            f.write(self.color_raw.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "VoxelField":
        with open(path, "rb") as f:
            if f.read(len(_MAGIC)) != _MAGIC:
                raise StateError(f"{path} is not a field checkpoint")
            (n,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(n))
            body = np.frombuffer(f.read(), dtype="<f4")
        if header["activations"] != ACTIVATIONS:
            raise StateError(f"unsupported activations {header['activations']}")
        r = header["resolution"]
        if body.size != 4 * r ** 3:
            raise StateError("truncated field checkpoint")
        return cls(body[: r ** 3].reshape(r, r, r).astype(np.float64),
                   body[r ** 3:].reshape(r, r, r, 3).astype(np.float64),
                   np.asarray(header["bbox"][0]), np.asarray(header["bbox"][1]),
                   float(header["density_scale"]))


# -- rendering ------------------------------------------------------------------


def _jitter(n_rays: int, n_samples: int, jitter) -> np.ndarray:
    if jitter is None:
        return np.full((n_rays, n_samples), 0.5)
    if isinstance(jitter, np.random.Generator):
        return jitter.random((n_rays, n_samples))
    return np.ascontiguousarray(np.broadcast_to(np.asarray(jitter, dtype=np.float64), (n_rays, n_samples)))


def _kernel_args(fld: VoxelField, rays: RayBatch, n_samples: int, bg, jitter):
    if n_samples < 2:
        raise ParameterError("n_samples must be at least 2")
    t0, t1 = ray_box(rays.origins, rays.dirs, fld.lo, fld.hi, rays.near, rays.far)
    c = np.ascontiguousarray
    return (c(fld.density()), c(fld.color()), c(fld.lo), c(fld.hi), c(rays.origins), c(rays.dirs),
            c(t0), c(t1), _jitter(len(rays), n_samples, jitter), c(np.asarray(bg, dtype=np.float64)),
            c(rays.far.astype(np.float64)))


def render_rays(fld: VoxelField, rays: RayBatch, n_samples: int = 128, bg=(1.0, 1.0, 1.0), jitter=None):
    """Composite ``rays``; returns ``(colors (R, 3), depths (R,), opacity (R,))``.

    ``jitter`` is ``None`` (bin midpoints), a generator, or an ``(R, S)``
    array of offsets in ``[0, 1)``.
    """
    return kernels.render_forward(*_kernel_args(fld, rays, n_samples, bg, jitter))


def render_image(fld: VoxelField, cam: Camera, n_samples: int = 128, bg=(1.0, 1.0, 1.0), seed: int | None = 0,
                 chunk: int = 1 << 14):
    """Render ``(rgb (3, H, W), depth (H, W), opacity (H, W))``; ``seed=None`` uses bin midpoints."""
    rays = RayBatch.from_camera(cam)
    rng = None if seed is None else np.random.default_rng(seed)
    parts = []
    for s in range(0, len(rays), chunk):
        sub = rays.subset(slice(s, s + chunk))
        jit = None if rng is None else rng.random((len(sub), n_samples))
        parts.append(render_rays(fld, sub, n_samples, bg, jit))
    rgb = np.concatenate([p[0] for p in parts]).T.reshape(3, cam.height, cam.width)
    depth = np.concatenate([p[1] for p in parts]).reshape(cam.height, cam.width)
    opac = np.concatenate([p[2] for p in parts]).reshape(cam.height, cam.width)
    return rgb, depth, opac


def photometric_grad(fld: VoxelField, rays: RayBatch, n_samples: int = 128, bg=(1.0, 1.0, 1.0),
                     jitter=None, norm: str = "L1"):
    """Loss ``mean |c_hat - c|`` (or squared) and its gradient w.r.t. both raw grids.

    Returns ``(loss, grad_density_raw, grad_color_raw)``.  At exact ties the L1
    subgradient is taken as zero.
    """
    if rays.colors is None:
        raise ParameterError("rays carry no target colors")
    args = _kernel_args(fld, rays, n_samples, bg, jitter)
    rgb, _, _ = kernels.render_forward(*args)
    diff = rgb - rays.colors
    if norm == "L1":
        loss = float(np.abs(diff).mean())
        g = np.sign(diff) / diff.size
    elif norm == "L2":
        loss = float((diff ** 2).mean())
        g = 2.0 * diff / diff.size
    else:
        raise ParameterError(f"unknown loss norm {norm!r}")
    gd, gc = kernels.render_backward(*args, np.ascontiguousarray(g))
    gd = gd * fld.density_scale * _sigmoid(fld.density_raw)
    s = _sigmoid(fld.color_raw)
    gc = gc * s * (1.0 - s)
    return loss, gd, gc


# -- training ---------------------------------------------------------------------


@dataclass
class SyncConfig:
    steps: int = 4000
    rays_per_step: int = 4096
    learning_rate: float = 0.05
    n_samples: int = 128
    loss_norm: str = "L1"
    adam_betas: tuple[float, float] = (0.9, 0.99)
    bg: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        self.bg = tuple(self.bg)
        if self.steps < 0 or self.rays_per_step < 1:
            raise ParameterError("steps must be >= 0 and rays_per_step >= 1")


class _Adam:
    def __init__(self, shapes, lr, betas, eps=1e-8):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.k = 0

    def step(self, params, grads):
        self.k += 1
        c1 = 1 - self.b1 ** self.k
        c2 = 1 - self.b2 ** self.k
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def sync_train(fld: VoxelField, images: Sequence[np.ndarray], cameras: Sequence[Camera],
               cfg: SyncConfig | None = None, seed=0, history: list | None = None) -> VoxelField:
    """Fit a copy of ``fld`` to ``images`` with random cross-view ray batches."""
    cfg = cfg or SyncConfig()
    if len(images) == 0:
        raise ParameterError("no training images")
    if len(images) != len(cameras):
        raise ShapeError("images and cameras must align")
    out = fld.copy()
    if cfg.steps == 0:
        return out
    pool = concat_rays([RayBatch.from_camera(c, im, i) for i, (c, im) in enumerate(zip(cameras, images))])
    rng = np.random.default_rng(seed)
    opt = _Adam([out.density_raw.shape, out.color_raw.shape], cfg.learning_rate, cfg.adam_betas)
    for step in range(cfg.steps):
        idx = rng.integers(0, len(pool), size=cfg.rays_per_step)
        jit = rng.random((cfg.rays_per_step, cfg.n_samples))
        loss, gd, gc = photometric_grad(out, pool.subset(idx), cfg.n_samples, cfg.bg, jit, cfg.loss_norm)
        opt.step([out.density_raw, out.color_raw], [gd, gc])
        if history is not None:
            history.append(loss)
        if step % 500 == 0:
            log.debug("sync step %d loss %.5f", step, loss)
    return out


@dataclass
class PretrainConfig:
    resolution: int = 96
    half_extent: float = 1.0
    density_init: float = -4.0
    density_scale: float = 10.0
    sync: SyncConfig = field(default_factory=SyncConfig)


def pretrain_lr(dataset, cfg: PretrainConfig | None = None, seed=0, history: list | None = None) -> VoxelField:
    """Fit a fresh field to the dataset's LR training images."""
    cfg = cfg or PretrainConfig()
    init = VoxelField.create(cfg.resolution, cfg.half_extent, cfg.density_init, 0.0, cfg.density_scale)
    return sync_train(init, dataset.lr_train, dataset.train_cameras, cfg.sync, seed=seed, history=history)
