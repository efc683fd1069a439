"""Procedural scenes of solid primitives and multi-view datasets rendered from them.

Reference images integrate the emission-absorption model exactly: densities
are piecewise constant along each ray, so every segment between primitive
boundaries has a closed-form transmittance.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError, StateError
from .imageops import FACTOR, load_png, save_png
from .radiance import Camera, RayBatch

BBOX_HALF = 1.0


@dataclass(frozen=True)
class Primitive:
    kind: str  # "sphere" | "box"
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # radius repeated for spheres, half-extents for boxes
    color: tuple[float, float, float]
    density: float = 50.0

    def extent(self) -> np.ndarray:
        return np.asarray(self.size)

    def intersect(self, o: np.ndarray, d: np.ndarray):
        """Entry/exit distances ``(a, b)``; rays that miss get ``a = b = inf``."""
        c = np.asarray(self.center)
        if self.kind == "sphere":
            r = self.size[0]
            oc = o - c
            b = np.einsum("ij,ij->i", d, oc)
            disc = b * b - (np.einsum("ij,ij->i", oc, oc) - r * r)
            hit = disc > 0
            sq = np.sqrt(np.where(hit, disc, 0.0))
            a, e = -b - sq, -b + sq
        elif self.kind == "box":
            lo, hi = c - np.asarray(self.size), c + np.asarray(self.size)
            with np.errstate(divide="ignore", invalid="ignore"):
                ta = (lo - o) / d
                tb = (hi - o) / d
            ta = np.where(np.isnan(ta), -np.inf, ta)
            tb = np.where(np.isnan(tb), np.inf, tb)
            a = np.minimum(ta, tb).max(axis=1)
            e = np.maximum(ta, tb).min(axis=1)
            hit = e > a
        else:
            raise ParameterError(f"unknown primitive kind {self.kind!r}")
        a = np.where(hit, a, np.inf)
        e = np.where(hit, e, np.inf)
        return a, e


@dataclass(frozen=True)
class Scene:
    primitives: tuple[Primitive, ...]
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"seed": self.seed, "background": list(self.background),
                "primitives": [asdict(p) for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        prims = tuple(Primitive(p["kind"], tuple(p["center"]), tuple(p["size"]), tuple(p["color"]),
                                p["density"]) for p in d["primitives"])
        return cls(prims, tuple(d["background"]), d["seed"])


def gen_scene(seed: int, n_primitives: int = 6, density: float = 50.0) -> Scene:
    """Random spheres and boxes with saturated solid colors, inside ``[-1, 1]^3``."""
    if n_primitives < 0:
        raise ParameterError("n_primitives must be >= 0")
    rng = np.random.default_rng(seed)
    prims = []
    for _ in range(n_primitives):
        kind = "sphere" if rng.random() < 0.5 else "box"
        if kind == "sphere":
            size = (float(rng.uniform(0.12, 0.4)),) * 3
        else:
            size = tuple(float(x) for x in rng.uniform(0.08, 0.35, size=3))
        lim = BBOX_HALF * 0.6
        center = tuple(float(np.clip(x, -(BBOX_HALF - s), BBOX_HALF - s))
                       for x, s in zip(rng.uniform(-lim, lim, size=3), size))
        h, sat, val = rng.random(), rng.uniform(0.5, 1.0), rng.uniform(0.35, 0.95)
        prims.append(Primitive(kind, center, size, colorsys.hsv_to_rgb(h, sat, val), density))
    return Scene(tuple(prims), (1.0, 1.0, 1.0), seed)


def trace_rays(scene: Scene, origins: np.ndarray, dirs: np.ndarray, near: float, far: float):
    """Exact volume rendering of ``scene``; returns ``(rgb (R, 3), depth (R,))``."""
    n = len(origins)
    bg = np.asarray(scene.background, dtype=np.float64)
    if not scene.primitives:
        return np.tile(bg, (n, 1)), np.full(n, far)
    hits = [p.intersect(origins, dirs) for p in scene.primitives]
    a = np.clip(np.stack([h[0] for h in hits], 1), near, far)  # (R, K)
    b = np.clip(np.stack([h[1] for h in hits], 1), near, far)
    bounds = np.sort(np.concatenate([a, b], axis=1), axis=1)  # (R, 2K)
    seg_lo, seg_hi = bounds[:, :-1], bounds[:, 1:]
    mid = 0.5 * (seg_lo + seg_hi)
    inside = (a[:, None, :] <= mid[..., None]) & (mid[..., None] < b[:, None, :])  # (R, S, K)
    dens = np.array([p.density for p in scene.primitives])
    cols = np.array([p.color for p in scene.primitives])
    sig_k = inside * dens
    sigma = sig_k.sum(-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        col = np.where(sigma[..., None] > 0, (sig_k @ cols) / sigma[..., None], 0.0)
    length = np.maximum(seg_hi - seg_lo, 0.0)
    tau = sigma * length
    t_in = np.exp(-np.concatenate([np.zeros((n, 1)), np.cumsum(tau, axis=1)[:, :-1]], axis=1))
    absorb = -np.expm1(-tau)
    rgb = np.einsum("rs,rsc->rc", t_in * absorb, col)
    residual = np.exp(-tau.sum(axis=1))
    rgb += residual[:, None] * bg
    with np.errstate(invalid="ignore", divide="ignore"):
        inv = np.where(sigma > 0, 1.0 / np.where(sigma > 0, sigma, 1.0), 0.0)
        seg_depth = np.where(sigma > 0, (seg_lo + inv) - np.exp(-tau) * (seg_hi + inv), 0.0)
    depth = (t_in * seg_depth).sum(axis=1) + residual * far
    return rgb, depth


def gt_render(scene: Scene, cam: Camera, supersample: int = 2):
    """Reference ``(rgb (3, H, W), depth (H, W))`` for ``cam``, box-filtered from ``supersample^2`` rays per pixel."""
    if supersample < 1:
        raise ParameterError("supersample must be >= 1")
    fine = cam.scaled(supersample)
    o, d = fine.pixel_rays()
    rgb, depth = trace_rays(scene, o, d, cam.near, cam.far)
    s, h, w = supersample, cam.height, cam.width
    rgb = rgb.T.reshape(3, h, s, w, s).mean(axis=(2, 4))
    depth = depth.reshape(h, s, w, s).mean(axis=(1, 3))
    return rgb, depth


# -- datasets -------------------------------------------------------------------


@dataclass
class DatasetConfig:
    n_train_views: int = 24
    n_eval_views: int = 100
    lr_res: int = 64
    supersample: int = 2
    radius: float = 4.0
    fov_deg: float = 45.0
    eval_elevation_deg: float = 25.0
    near: float = 0.5
    far: float = 8.0
    n_primitives: int = 6


def _camera(az, el, cfg: DatasetConfig, res: int) -> Camera:
    eye = cfg.radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    focal = 0.5 * res / math.tan(math.radians(cfg.fov_deg) / 2)
    return Camera.look_at(eye, (0.0, 0.0, 0.0), res, res, focal, near=cfg.near, far=cfg.far)


def train_poses(n: int, cfg: DatasetConfig) -> list[Camera]:
    """Upper-hemisphere spiral, elevation 10-70 degrees over three turns."""
    out = []
    for i in range(n):
        f = i / max(n - 1, 1)
        out.append(_camera(2 * math.pi * 3 * f, math.radians(10 + 60 * f), cfg, cfg.lr_res))
    return out


def eval_poses(n: int, cfg: DatasetConfig) -> list[Camera]:
    el = math.radians(cfg.eval_elevation_deg)
    return [_camera(2 * math.pi * i / n, el, cfg, cfg.lr_res) for i in range(n)]


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


@dataclass
class MultiViewDataset:
    scene: Scene
    config: DatasetConfig
    train_cameras: list[Camera]
    eval_cameras: list[Camera]
    lr_train: list[np.ndarray]
    lr_eval: list[np.ndarray]
    # evaluation only; never read by training code
    hr_eval: list[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def lr_res(self) -> int:
        return self.config.lr_res

    @property
    def hr_res(self) -> int:
        return FACTOR * self.config.lr_res

    def meta(self) -> dict:
        nt, ne = len(self.train_cameras), len(self.eval_cameras)
        return {
            "version": 1,
            "seed": self.scene.seed,
            "lr_res": self.lr_res,
            "hr_res": self.hr_res,
            "splits": {"train": list(range(nt)), "eval": list(range(nt, nt + ne))},
            "hr_ref_split": "eval",
            "hr_ref_evaluation_only": True,
            "config": asdict(self.config),
            "scene": self.scene.to_dict(),
        }

    def save(self, root: str | Path) -> None:
        root = Path(root)
        (root / "lr").mkdir(parents=True, exist_ok=True)
        (root / "hr_ref").mkdir(exist_ok=True)
        nt = len(self.train_cameras)
        poses = {
            "convention": "opencv: x right, y down, z forward; c2w is world-from-camera, row-major",
            "cameras": [dict(c.to_dict(), index=i) for i, c in enumerate(self.train_cameras + self.eval_cameras)],
        }
        (root / "poses.json").write_text(json.dumps(poses, indent=1))
        (root / "meta.json").write_text(json.dumps(self.meta(), indent=1, sort_keys=True))
        for i, im in enumerate(self.lr_train + self.lr_eval):
            save_png(root / "lr" / f"{i:04d}.png", im)
        for j, im in enumerate(self.hr_eval):
            save_png(root / "hr_ref" / f"{nt + j:04d}.png", im)

    @classmethod
    def load(cls, root: str | Path) -> "MultiViewDataset":
        root = Path(root)
        if not (root / "meta.json").exists():
            raise StateError(f"{root} has no meta.json")
        meta = json.loads((root / "meta.json").read_text())
        cams = [Camera.from_dict(c) for c in json.loads((root / "poses.json").read_text())["cameras"]]
        tr, ev = meta["splits"]["train"], meta["splits"]["eval"]
        lr = {i: load_png(root / "lr" / f"{i:04d}.png") for i in tr + ev}
        hr = [load_png(root / "hr_ref" / f"{i:04d}.png") for i in ev if (root / "hr_ref" / f"{i:04d}.png").exists()]
        return cls(Scene.from_dict(meta["scene"]), DatasetConfig(**meta["config"]),
                   [cams[i] for i in tr], [cams[i] for i in ev],
                   [lr[i] for i in tr], [lr[i] for i in ev], hr)


def make_dataset(scene: Scene, cfg: DatasetConfig | None = None, with_hr: bool = True) -> MultiViewDataset:
    """Render LR training/evaluation views and 4x HR references of the evaluation views.

    The LR images use ``4 * supersample`` rays per axis so that they equal the
    box-downsampled HR references before 8-bit quantization.
    """
    cfg = cfg or DatasetConfig()
    if cfg.n_train_views < 1 or cfg.n_eval_views < 1:
        raise ParameterError("view counts must be >= 1")
    tr, ev = train_poses(cfg.n_train_views, cfg), eval_poses(cfg.n_eval_views, cfg)
    lr_ss = FACTOR * cfg.supersample
    lr_train = [quantize(gt_render(scene, c, lr_ss)[0]) for c in tr]
    lr_eval = [quantize(gt_render(scene, c, lr_ss)[0]) for c in ev]
    hr = [quantize(gt_render(scene, c.scaled(FACTOR), cfg.supersample)[0]) for c in ev] if with_hr else []
    return MultiViewDataset(scene, cfg, tr, ev, lr_train, lr_eval, hr)


def patch_corpus(seeds, views_per_scene: int, lr_res: int, patch_lr: int, patches_per_view: int,
                 cfg: DatasetConfig | None = None, rng_seed: int = 0):
    """``(HR, LR)`` training patches cut from reference renders of the given scene seeds.

    HR patches are ``4 * patch_lr`` square; LR patches are their box averages.
    """
    from .imageops import box_down4

    cfg = cfg or DatasetConfig()
    cfg = DatasetConfig(**{**asdict(cfg), "lr_res": lr_res})
    rng = np.random.default_rng(rng_seed)
    hr_p, lr_p = [], []
    ph = FACTOR * patch_lr
    for seed in seeds:
        scene = gen_scene(int(seed), cfg.n_primitives)
        for _ in range(views_per_scene):
            az, el = rng.uniform(0, 2 * math.pi), math.radians(rng.uniform(5, 75))
            cam = _camera(az, el, cfg, lr_res).scaled(FACTOR)
            hr = quantize(gt_render(scene, cam, cfg.supersample)[0])
            for _ in range(patches_per_view):
                y, x = rng.integers(0, hr.shape[1] - ph + 1), rng.integers(0, hr.shape[2] - ph + 1)
                y, x = y - y % FACTOR, x - x % FACTOR
                patch = hr[:, y:y + ph, x:x + ph]
                hr_p.append(patch)
                lr_p.append(box_down4(patch))
    return np.stack(hr_p).astype(np.float32), np.stack(lr_p).astype(np.float32)
