"""DDPM substrate: noise schedules, forward noising, the reverse step, sampling.

Timesteps are zero-based, ``t in [0, T)``.  ``alpha_bar[0] = 1 - beta[0]`` is
the lightest noise level; ancestral sampling starts from a standard normal at
``T - 1`` and finishes with a noise-free reconstruction at ``t = 0``.

Latents are plain ``numpy`` arrays of any shape.  Operations are elementwise,
so a leading batch axis is carried through untouched.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from .errors import ParameterError, ShapeError, UnsupportedOperation

__all__ = [
    "Conditioning",
    "DenoiserModel",
    "NoiseSchedule",
    "make_schedule",
    "forward_noise",
    "reverse_step",
    "reconstruct_z0",
    "ancestral_sample",
    "elbo_loss",
]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    kind: str
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    gamma: np.ndarray = field(repr=False)

    def to_config(self) -> dict[str, Any]:
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "kind": self.kind,
        }

    @classmethod
    def from_config(cls, cfg: dict[str, Any]) -> "NoiseSchedule":
        unknown = set(cfg) - {"T", "beta_start", "beta_end", "kind"}
        if unknown:
            raise ParameterError(f"unknown schedule keys: {sorted(unknown)}")
        return make_schedule(
            int(cfg["T"]),
            float(cfg["beta_start"]),
            float(cfg["beta_end"]),
            cfg.get("kind", "linear"),
        )

    @property
    def hash(self) -> str:
        """Short digest of the config block; stored in denoiser checkpoints."""
        blob = json.dumps(self.to_config(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise ParameterError(f"timestep {t} outside [0, {self.T})")
        return t


def make_schedule(T: int, beta_start: float, beta_end: float, kind: str = "linear") -> NoiseSchedule:
    """Build a schedule with ``sigma = sqrt(beta)`` and unit loss weights."""
    if kind != "linear":
        raise ParameterError(f"unsupported schedule kind {kind!r}")
    if T < 2:
        raise ParameterError("T must be at least 2")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ParameterError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    arrays = dict(beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=np.sqrt(beta), gamma=np.ones(T))
    for a in arrays.values():
        a.setflags(write=False)
    return NoiseSchedule(T=T, beta_start=float(beta_start), beta_end=float(beta_end), kind=kind, **arrays)


@dataclass(frozen=True)
class Conditioning:
    """Side information for a denoiser.

    ``lr_image`` has a quarter of the target's spatial size (or is ``None``
    for unconditional models).  ``token`` is a class id, 0 = unconditional.
    """

    lr_image: np.ndarray | None = None
    lr_noise_level: int = 0
    token: int = 0


class DenoiserModel(Protocol):
    trainable: bool

    def predict_eps(self, z_t: np.ndarray, cond: Conditioning, t: int) -> np.ndarray: ...


def _same_shape(*arrays: np.ndarray) -> None:
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise ShapeError(f"shape mismatch: {shape} vs {np.shape(a)}")


def forward_noise(z0: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    _same_shape(z0, eps)
    ab = s.alpha_bar[s.check_t(t)]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def reverse_step(
    z_t: np.ndarray, eps_pred: np.ndarray, t: int, eps_new: np.ndarray, s: NoiseSchedule
) -> np.ndarray:
    """One DDPM ancestral step ``z_t -> z_{t-1}``."""
    _same_shape(z_t, eps_pred, eps_new)
    t = s.check_t(t)
    if t < 1:
        raise ParameterError("reverse_step needs t >= 1; use reconstruct_z0 at t = 0")
    a = s.alpha[t]
    coef = (1.0 - a) / math.sqrt(1.0 - s.alpha_bar[t])
    return (z_t - coef * eps_pred) / math.sqrt(a) + s.sigma[t] * eps_new


def reconstruct_z0(z_t: np.ndarray, eps_pred: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    _same_shape(z_t, eps_pred)
    ab = s.alpha_bar[s.check_t(t)]
    return (z_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def ancestral_sample(
    denoiser: DenoiserModel,
    cond: Conditioning,
    shape: tuple[int, ...],
    s: NoiseSchedule,
    seed: int | np.random.SeedSequence | np.random.Generator,
) -> np.ndarray:
    """Run the full reverse trajectory from ``N(0, I)`` and return ``z_0``.

    ``shape`` usually includes a batch axis; every trajectory in the batch
    shares one generator, so fix the batch size along with the seed.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape)
    for t in range(s.T - 1, 0, -1):
        eps_pred = denoiser.predict_eps(z, cond, t)
        z = reverse_step(z, eps_pred, t, rng.standard_normal(shape), s)
    # the last step to data is noise-free
    return reconstruct_z0(z, denoiser.predict_eps(z, cond, 0), 0, s)


def elbo_loss(
    denoiser: DenoiserModel,
    z0: np.ndarray,
    cond: Conditioning,
    t: int,
    eps: np.ndarray,
    s: NoiseSchedule,
) -> tuple[float, np.ndarray]:
    """Simple-loss ELBO ``gamma[t] * ||eps_phi(z_t) - eps||^2`` and its parameter gradient.

    The gradient is returned as a flat vector in the order of
    ``denoiser.get_params()``.
    """
    if not getattr(denoiser, "trainable", False):
        raise UnsupportedOperation(f"{type(denoiser).__name__} has no trainable parameters")
    z_t = forward_noise(z0, t, eps, s)
    return denoiser.loss_and_grad(z_t, cond, t, eps, weight=float(s.gamma[s.check_t(t)]))
