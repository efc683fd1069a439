"""Score-distillation objectives and the 2D upscaling harness.

Two optimizers act directly on a latent image:

* SDS: gradient ``gamma(t) (eps_phi(z_t) - eps)`` at a random ``t``, applied to
  the latent itself (identity parametrization).
* RSD: a zero-initialized residual ``h`` is added to the source latent and
  trained so that its renoised latent at ``t - 1`` matches the DDPM step
  predicted from its renoised latent at ``t``.  ``t`` decreases linearly over
  the iterations, following the ancestral trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffusion import (
    Conditioning,
    NoiseSchedule,
    ancestral_sample,
    forward_noise,
    reconstruct_z0,
    reverse_step,
)
from .errors import ParameterError, ShapeError, StateError, UnsupportedOperation
from .imageops import upsample4
from . import metrics

METHODS = ("ancestral", "sds", "rsd")


# -- codecs ------------------------------------------------------------------


class IdentityCodec:
    """Pixel space is latent space."""

    def encode(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)

    def decode(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64)


# -- configuration -------------------------------------------------------------


@dataclass
class DistillConfig:
    learning_rate: float = 1e-2
    loss_norm: str = "L1"
    detach_prediction: bool = True
    shared_eps: bool = True
    steps: int = 512
    t_min_frac: float = 0.02
    t_max_frac: float = 0.98
    optimizer: str = "gd"
    adam_betas: tuple[float, float] = (0.9, 0.99)
    init: str = "bicubic"
    patch_size: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.loss_norm not in ("L1", "L2"):
            raise ParameterError(f"loss_norm must be L1 or L2, got {self.loss_norm!r}")
        if self.optimizer not in ("gd", "adam"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0:
            raise ParameterError("steps must be >= 0")
        if self.patch_size < 0 or self.patch_size % 4:
            raise ParameterError("patch_size must be a non-negative multiple of 4")
        self.adam_betas = tuple(self.adam_betas)

    def t_bounds(self, s: NoiseSchedule) -> tuple[int, int]:
        t_min = max(1, int(round(self.t_min_frac * s.T)))
        t_max = min(s.T - 1, int(round(self.t_max_frac * s.T)))
        if not t_min < t_max:
            raise ParameterError(f"t bounds ({t_min}, {t_max}) collapse for T={s.T}")
        return t_min, t_max


# -- SDS -----------------------------------------------------------------------


def linear_time_schedule(it: int, max_iter: int, t_min: int, t_max: int) -> int:
    """``round(t_max - (t_max - t_min) * it / max_iter)``; half-way values round up."""
    if max_iter <= 0:
        return int(t_max)
    return int(math.floor(t_max - (t_max - t_min) * it / max_iter + 0.5))


def sds_grad(z0, denoiser, cond, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    """SDS gradient with respect to the latent; the denoiser Jacobian is omitted."""
    if np.shape(z0) != np.shape(eps):
        raise ShapeError(f"shape mismatch: {np.shape(z0)} vs {np.shape(eps)}")
    z_t = forward_noise(z0, t, eps, s)
    return s.gamma[t] * (denoiser.predict_eps(z_t, cond, t) - eps)


def sds_residual_form(z0, z0_hat, t: int, s: NoiseSchedule) -> np.ndarray:
    """The same gradient written as a scaled residual between ``z0`` and its one-step estimate."""
    ab = s.alpha_bar[s.check_t(t)]
    return s.gamma[t] * math.sqrt(ab) / math.sqrt(1.0 - ab) * (np.asarray(z0) - np.asarray(z0_hat))


def sds_optimize(z_init, denoiser, cond, s: NoiseSchedule, cfg: DistillConfig, seed,
                 callback: Callable | None = None) -> np.ndarray:
    """Plain SDS descent on a latent, ``t ~ U[t_min, t_max]`` per step.

    A leading batch axis gets one generator per item, derived from ``seed``.
    """
    z = np.array(z_init, dtype=np.float64)
    t_min, t_max = cfg.t_bounds(s)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    t_rng = np.random.default_rng(ss.spawn(1)[0])
    rngs = _batch_rngs(ss, z.shape[0])
    opt = _Optimizer(cfg, z.shape)
    for step in range(cfg.steps):
        # one t per step keeps the batched denoiser call single-timestep
        t = int(t_rng.integers(t_min, t_max + 1))
        eps = np.stack([r.standard_normal(z.shape[1:]) for r in rngs])
        g = sds_grad(z, denoiser, cond, t, eps, s)
        z = opt.step(z, g)
        if callback is not None:
            callback(step, z)
    return z


# -- RSD -----------------------------------------------------------------------


@dataclass
class ResidualState:
    h: np.ndarray
    t_min: int
    t_max: int
    max_steps: int
    step: int = 0
    opt_state: dict = field(default_factory=dict)
    # last iterate before the update; kept for checkpoint hooks
    h_old: np.ndarray | None = None

    @classmethod
    def zeros(cls, shape, t_min: int, t_max: int, max_steps: int) -> "ResidualState":
        return cls(h=np.zeros(shape), t_min=t_min, t_max=t_max, max_steps=max_steps)


def rsd_loss_and_grad(h, z0, denoiser, cond, t: int, eps, s: NoiseSchedule, cfg: DistillConfig,
                      eps_prev=None, eps_new=None):
    """Evaluate the RSD objective at residual ``h``.

    Returns ``(loss, grad_h, z_prev, z_hat_prev)``.  With ``shared_eps`` the
    same ``eps`` noises both timesteps and drives the reverse step; otherwise
    ``eps_prev`` and ``eps_new`` are used for those two slots.
    """
    if t < 1:
        raise ParameterError("RSD needs t >= 1")
    if cfg.shared_eps or eps_prev is None:
        eps_prev = eps
    if cfg.shared_eps or eps_new is None:
        eps_new = eps
    z_ref = np.asarray(z0) + h
    z_t = forward_noise(z_ref, t, eps, s)
    z_prev = forward_noise(z_ref, t - 1, eps_prev, s)
    eps_pred = denoiser.predict_eps(z_t, cond, t)
    z_hat = reverse_step(z_t, eps_pred, t, eps_new, s)
    diff = z_prev - z_hat
    if cfg.loss_norm == "L1":
        loss = float(np.abs(diff).sum())
        g_diff = np.sign(diff)
    else:
        loss = float((diff ** 2).sum())
        g_diff = 2.0 * diff
    grad = math.sqrt(s.alpha_bar[t - 1]) * g_diff
    if not cfg.detach_prediction:
        # d z_hat / d h = (sqrt(ab_t) / sqrt(a_t)) (I - c J), J = d eps_phi / d z_t
        if not hasattr(denoiser, "vjp"):
            raise UnsupportedOperation(f"{type(denoiser).__name__} has no vector-Jacobian product")
        a = s.alpha[t]
        c = (1.0 - a) / math.sqrt(1.0 - s.alpha_bar[t])
        jt = denoiser.vjp(z_t, cond, t, g_diff)
        grad = grad - math.sqrt(s.alpha_bar[t]) / math.sqrt(a) * (g_diff - c * jt)
    return loss, grad, z_prev, z_hat


class _Optimizer:
    def __init__(self, cfg: DistillConfig, shape, state: dict | None = None):
        self.cfg = cfg
        self.state = state if state is not None else {}
        if cfg.optimizer == "adam" and not self.state:
            self.state.update(m=np.zeros(shape), v=np.zeros(shape), k=0)

    def step(self, x, g):
        lr = self.cfg.learning_rate
        if self.cfg.optimizer == "gd":
            return x - lr * g
        b1, b2 = self.cfg.adam_betas
        st = self.state
        st["k"] += 1
        st["m"] = b1 * st["m"] + (1 - b1) * g
        st["v"] = b2 * st["v"] + (1 - b2) * g * g
        mhat = st["m"] / (1 - b1 ** st["k"])
        vhat = st["v"] / (1 - b2 ** st["k"])
        return x - lr * mhat / (np.sqrt(vhat) + 1e-8)


def rsd_step(state: ResidualState, z0, denoiser, cond, s: NoiseSchedule, rng, cfg: DistillConfig):
    """One RSD iteration; mutates and returns ``state``.

    ``rng`` is a generator, or a list of generators (one per batch item) when
    ``z0`` carries a leading batch axis.
    """
    if state.step >= state.max_steps:
        raise StateError(f"RSD step budget of {state.max_steps} exhausted")
    if state.h.shape != np.shape(z0):
        raise ShapeError(f"residual {state.h.shape} does not match latent {np.shape(z0)}")
    draw = _drawer(rng, np.shape(z0))
    eps = draw()
    eps_prev = eps_new = None
    if not cfg.shared_eps:
        eps_prev, eps_new = draw(), draw()
    t = linear_time_schedule(state.step, state.max_steps, state.t_min, state.t_max)
    loss, grad, _, _ = rsd_loss_and_grad(state.h, z0, denoiser, cond, t, eps, s, cfg, eps_prev, eps_new)
    state.h_old = state.h
    state.h = _Optimizer(cfg, state.h.shape, state.opt_state).step(state.h, grad)
    state.step += 1
    return loss, state


def _drawer(rng, shape):
    if isinstance(rng, (list, tuple)):
        return lambda: np.stack([r.standard_normal(shape[1:]) for r in rng])
    return lambda: rng.standard_normal(shape)


def _batch_rngs(seed, n: int) -> list[np.random.Generator]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(c) for c in ss.spawn(n)]


def item_seeds(seed: int, n: int, offset: int = 0) -> list[np.random.SeedSequence]:
    """Per-item seed sequences keyed by item index, independent of batch grouping."""
    return [np.random.SeedSequence([int(seed), offset + i]) for i in range(n)]


def rsd_upscale(x0, lr_cond, denoiser, codec, s: NoiseSchedule, cfg: DistillConfig, seed=0,
                cond_kwargs: dict | None = None, seeds: Sequence | None = None, callback=None) -> np.ndarray:
    """Refine an already 4x-sized image batch ``(B, C, H, W)`` with RSD.

    ``lr_cond`` holds the LR images the denoiser is conditioned on.  Each
    batch item uses its own generator (``seeds[i]``, or spawned from
    ``seed``), so results do not depend on how images are batched.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 3
    if single:
        x0, lr_cond = x0[None], np.asarray(lr_cond)[None]
    z0 = codec.encode(x0)
    if z0.shape != x0.shape:
        raise ShapeError("codec changed the latent shape; only shape-preserving codecs are supported")
    cond = Conditioning(lr_image=np.asarray(lr_cond, dtype=np.float64), **(cond_kwargs or {}))
    t_min, t_max = cfg.t_bounds(s)
    state = ResidualState.zeros(z0.shape, t_min, t_max, cfg.steps)
    rngs = [np.random.default_rng(q) for q in seeds] if seeds is not None else _batch_rngs(seed, len(z0))
    crop = cfg.patch_size and cfg.patch_size < min(z0.shape[-2:])
    while state.step < state.max_steps:
        if crop:
            loss, state = _rsd_patch_step(state, z0, denoiser, cond, s, rngs, cfg)
        else:
            loss, state = rsd_step(state, z0, denoiser, cond, s, rngs, cfg)
        if callback is not None:
            callback(state, loss)
    out = codec.decode(z0 + state.h)
    return out[0] if single else out


def _rsd_patch_step(state: ResidualState, z0, denoiser, cond: Conditioning, s: NoiseSchedule, rngs, cfg):
    """RSD step on one random crop per item; the residual outside the crops gets zero gradient.

    Crop offsets are multiples of 4 so the LR conditioning crop stays aligned.
    """
    if state.step >= state.max_steps:
        raise StateError(f"RSD step budget of {state.max_steps} exhausted")
    p, q = cfg.patch_size, cfg.patch_size // 4
    H, W = z0.shape[-2:]
    offs = [(4 * int(r.integers(0, (H - p) // 4 + 1)), 4 * int(r.integers(0, (W - p) // 4 + 1))) for r in rngs]
    sl = [(slice(None), slice(y, y + p), slice(x, x + p)) for y, x in offs]
    zc = np.stack([z0[i][sl[i]] for i in range(len(z0))])
    hc = np.stack([state.h[i][sl[i]] for i in range(len(z0))])
    lr = np.stack([cond.lr_image[i][:, y // 4:y // 4 + q, x // 4:x // 4 + q] for i, (y, x) in enumerate(offs)])
    ccrop = Conditioning(lr_image=lr, lr_noise_level=cond.lr_noise_level, token=cond.token)
    draw = _drawer(rngs, zc.shape)
    eps = draw()
    eps_prev = eps_new = None
    if not cfg.shared_eps:
        eps_prev, eps_new = draw(), draw()
    t = linear_time_schedule(state.step, state.max_steps, state.t_min, state.t_max)
    loss, gc, _, _ = rsd_loss_and_grad(hc, zc, denoiser, ccrop, t, eps, s, cfg, eps_prev, eps_new)
    grad = np.zeros_like(state.h)
    for i in range(len(z0)):
        grad[i][sl[i]] = gc[i]
    state.h_old = state.h
    state.h = _Optimizer(cfg, state.h.shape, state.opt_state).step(state.h, grad)
    state.step += 1
    return loss, state


# -- 2D comparison harness -------------------------------------------------------

METRIC_HEADER = metrics.UPSCALE_HEADER


def upscale2d_compare(image_lr, methods: Sequence[str], denoiser, s: NoiseSchedule, cfg: DistillConfig,
                      seed: int = 0, codec=None, cond_kwargs: dict | None = None,
                      sds_cfg: DistillConfig | None = None):
    """Upscale a batch of LR images with each requested method.

    Returns ``(images, rows)``: ``images[method]`` is ``(B, C, 4H, 4W)`` and
    ``rows`` holds one dict per (method, image) with the metric header keys.
    """
    for m in methods:
        if m not in METHODS:
            raise ParameterError(f"unknown upscaling method {m!r}; choose from {METHODS}")
    codec = codec or IdentityCodec()
    lr = np.asarray(image_lr, dtype=np.float64)
    if lr.ndim == 3:
        lr = lr[None]
    b, c, h, w = lr.shape
    cond = Conditioning(lr_image=lr, **(cond_kwargs or {}))
    x_init = upsample4(lr, cfg.init)
    images = {}
    for m in methods:
        if m == "ancestral":
            z = ancestral_sample(denoiser, cond, (b, c, 4 * h, 4 * w), s, np.random.SeedSequence([seed, 1]))
            images[m] = codec.decode(z)
        elif m == "sds":
            z = sds_optimize(codec.encode(x_init), denoiser, cond, s, sds_cfg or cfg,
                             np.random.SeedSequence([seed, 2]))
            images[m] = codec.decode(z)
        else:
            images[m] = rsd_upscale(x_init, lr, denoiser, codec, s, cfg,
                                    seeds=item_seeds(seed, b, offset=3 << 20), cond_kwargs=cond_kwargs)
    rows = []
    for m in methods:
        for i in range(b):
            rows.append({
                "method": m,
                "seed": seed,
                "sharpness": metrics.sharpness(images[m][i]),
                "lr_consistency": metrics.lr_consistency(images[m][i], lr[i]),
            })
    return images, rows
