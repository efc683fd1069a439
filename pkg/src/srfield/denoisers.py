"""Noise-prediction backends.

``GMMDenoiser`` is exact: for data drawn from a Gaussian mixture the noised
marginal is again a mixture, so the optimal noise prediction follows from its
score in closed form.  ``ConvDenoiser`` is a small convolutional network,
conditioned on a 4x-upsampled LR image, trained with the simple ELBO loss.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.special import logsumexp
from torch import nn

from .diffusion import Conditioning, NoiseSchedule, forward_noise
from .errors import NumericError, ParameterError, ShapeError, StateError
from .imageops import FACTOR

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.asarray(self.variances, dtype=np.float64)
        if w.ndim != 1 or mu.shape[0] != w.size or v.shape != w.shape:
            raise ShapeError("weights (K,), means (K, D), variances (K,) required")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ParameterError("weights must be positive and sum to 1")
        if np.any(v <= 0):
            raise ParameterError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", v)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` points; returns ``(x, component_labels)``."""
        k = rng.choice(len(self.weights), size=n, p=self.weights)
        x = self.means[k] + np.sqrt(self.variances[k])[:, None] * rng.standard_normal((n, self.dim))
        return x, k


class GMMDenoiser:
    """Exact noise prediction ``-sqrt(1 - alpha_bar) * grad log p_t`` for GMM data."""

    trainable = False

    def __init__(self, gmm: GaussianMixture, schedule: NoiseSchedule):
        self.gmm = gmm
        self.schedule = schedule

    def _marginal(self, t: int):
        ab = self.schedule.alpha_bar[self.schedule.check_t(t)]
        means = math.sqrt(ab) * self.gmm.means
        var = ab * self.gmm.variances + (1.0 - ab)
        return ab, means, var

    def _flat(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.gmm.dim and z.reshape(z.shape[0], -1).shape[1] != self.gmm.dim:
            raise ShapeError(f"latent of shape {z.shape} does not match GMM dim {self.gmm.dim}")
        return z.reshape(-1, self.gmm.dim)

    def _responsibilities(self, zf: np.ndarray, t: int):
        ab, means, var = self._marginal(t)
        d = self.gmm.dim
        diff = means[None, :, :] - zf[:, None, :]  # (B, K, D)
        logp = (
            np.log(self.gmm.weights)[None]
            - 0.5 * np.einsum("bkd,bkd->bk", diff, diff) / var[None]
            - 0.5 * d * np.log(2 * np.pi * var)[None]
        )
        norm = logsumexp(logp, axis=1, keepdims=True)
        if not np.all(np.isfinite(norm)):
            bad = int(np.flatnonzero(~np.isfinite(norm[:, 0]))[0])
            raise NumericError(f"zero total responsibility at batch index {bad}, t={t}")
        return ab, diff / var[None, :, None], np.exp(logp - norm), norm[:, 0]

    def log_density(self, z: np.ndarray, t: int) -> np.ndarray:
        return self._responsibilities(self._flat(z), t)[3]

    def score(self, z: np.ndarray, t: int) -> np.ndarray:
        _, m, r, _ = self._responsibilities(self._flat(z), t)
        return np.einsum("bk,bkd->bd", r, m).reshape(np.shape(z))

    def predict_eps(self, z_t: np.ndarray, cond: Conditioning | None, t: int) -> np.ndarray:
        ab = self.schedule.alpha_bar[self.schedule.check_t(t)]
        return -math.sqrt(1.0 - ab) * self.score(z_t, t)

    def vjp(self, z_t: np.ndarray, cond: Conditioning | None, t: int, v: np.ndarray) -> np.ndarray:
        """``J^T v`` with ``J = d eps / d z_t`` (symmetric, from the log-density Hessian)."""
        ab, m, r, _ = self._responsibilities(self._flat(z_t), t)
        var = self._marginal(t)[2]
        vf = np.asarray(v, dtype=np.float64).reshape(m.shape[0], -1)
        mbar = np.einsum("bk,bkd->bd", r, m)
        proj = np.einsum("bkd,bd->bk", m, vf)
        hv = (
            -(r / var[None]).sum(axis=1, keepdims=True) * vf
            + np.einsum("bk,bkd->bd", r * proj, m)
            - mbar * np.einsum("bd,bd->b", mbar, vf)[:, None]
        )
        return (-math.sqrt(1.0 - ab) * hv).reshape(np.shape(z_t))


class ZeroDenoiser:
    """Predicts zero noise.  Baseline for loss comparisons."""

    trainable = False

    def predict_eps(self, z_t, cond, t):
        return np.zeros_like(z_t, dtype=np.float64)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


@dataclass
class LayerSpec:
    channels: int = 3
    hidden: int = 16
    dilations: tuple[int, ...] = (1, 2, 4, 8, 1)
    emb_dim: int = 32
    n_tokens: int = 4

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)


class _ConvNet(nn.Module):
    def __init__(self, spec: LayerSpec):
        super().__init__()
        h = spec.hidden
        nb = len(spec.dilations)
        self.spec = spec
        self.inp = nn.Conv2d(2 * spec.channels, h, 3, padding=1)
        self.blocks = nn.ModuleList(nn.Conv2d(h, h, 3, padding=d, dilation=d) for d in spec.dilations)
        self.temb = nn.Linear(spec.emb_dim, h * nb)
        self.token = nn.Embedding(spec.n_tokens, h * nb)
        self.out = nn.Conv2d(h, spec.channels, 3, padding=1)
        nn.init.zeros_(self.token.weight)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, z, lr_up, t, token):
        h = self.inp(torch.cat([z, lr_up], dim=1))
        emb = self.temb(timestep_embedding(t, self.spec.emb_dim)) + self.token(token)
        emb = emb.view(z.shape[0], len(self.blocks), -1, 1, 1)
        for i, blk in enumerate(self.blocks):
            h = h + blk(nn.functional.silu(h + emb[:, i]))
        return self.out(nn.functional.silu(h))


_MAGIC = b"SRFDEN01"


class ConvDenoiser:
    """Trainable LR-conditioned noise predictor (numpy in, numpy out).

    Inputs are batched ``(B, C, H, W)`` latents; a single ``(C, H, W)``
    latent is accepted and returned unbatched.  The LR conditioning is
    nearest-upsampled by 4 and concatenated on the channel axis.
    """

    trainable = True

    def __init__(self, spec: LayerSpec | None = None, schedule_hash: str = "", seed: int = 0,
                 dtype=torch.float32):
        self.spec = spec or LayerSpec()
        self.schedule_hash = schedule_hash
        self.dtype = dtype
        torch.manual_seed(seed)
        self.net = _ConvNet(self.spec).to(dtype)
        self.net.eval()
        log.info("ConvDenoiser with %d parameters", self.n_params)

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    # -- parameter vector -------------------------------------------------
    def get_params(self) -> np.ndarray:
        return np.concatenate([p.detach().cpu().numpy().ravel() for p in self.net.parameters()]).astype(np.float64)

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat)
        if flat.size != self.n_params:
            raise ShapeError(f"expected {self.n_params} parameters, got {flat.size}")
        off = 0
        with torch.no_grad():
            for p in self.net.parameters():
                n = p.numel()
                p.copy_(torch.from_numpy(np.array(flat[off:off + n])).view_as(p).to(self.dtype))
                off += n

    def _grad_vector(self) -> np.ndarray:
        return np.concatenate([
            (p.grad.detach().numpy().ravel() if p.grad is not None else np.zeros(p.numel()))
            for p in self.net.parameters()
        ]).astype(np.float64)

    # -- forward ------------------------------------------------------------
    def _inputs(self, z_t, cond: Conditioning, t):
        z = np.asarray(z_t)
        single = z.ndim == 3
        if single:
            z = z[None]
        if z.ndim != 4 or z.shape[1] != self.spec.channels:
            raise ShapeError(f"expected (B, {self.spec.channels}, H, W) latent, got {np.shape(z_t)}")
        b, c, hh, ww = z.shape
        if cond is None or cond.lr_image is None:
            raise ShapeError("ConvDenoiser requires an LR conditioning image")
        lr = np.asarray(cond.lr_image)
        if lr.ndim == 3:
            lr = np.broadcast_to(lr[None], (b, *lr.shape))
        if lr.shape != (b, c, hh // FACTOR, ww // FACTOR) or hh % FACTOR or ww % FACTOR:
            raise ShapeError(f"LR conditioning {np.shape(cond.lr_image)} is not 1/{FACTOR} of latent {z.shape}")
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        tok = np.broadcast_to(np.asarray(cond.token, dtype=np.int64), (b,))
        zt = torch.from_numpy(np.ascontiguousarray(z)).to(self.dtype)
        lr_up = torch.from_numpy(np.array(lr)).to(self.dtype)
        lr_up = lr_up.repeat_interleave(FACTOR, dim=2).repeat_interleave(FACTOR, dim=3)
        return single, zt, lr_up, torch.from_numpy(tt.copy()).to(self.dtype), torch.from_numpy(tok.copy())

    def predict_eps(self, z_t: np.ndarray, cond: Conditioning, t) -> np.ndarray:
        single, zt, lr_up, tt, tok = self._inputs(z_t, cond, t)
        with torch.no_grad():
            out = self.net(zt, lr_up, tt, tok).numpy().astype(np.float64)
        return out[0] if single else out

    def vjp(self, z_t: np.ndarray, cond: Conditioning, t, v: np.ndarray) -> np.ndarray:
        single, zt, lr_up, tt, tok = self._inputs(z_t, cond, t)
        zt.requires_grad_(True)
        out = self.net(zt, lr_up, tt, tok)
        vt = torch.from_numpy(np.ascontiguousarray(np.asarray(v).reshape(out.shape))).to(self.dtype)
        (g,) = torch.autograd.grad(out, zt, vt)
        g = g.numpy().astype(np.float64)
        return g[0] if single else g

    def loss_and_grad(self, z_t, cond: Conditioning, t, eps, weight: float = 1.0) -> tuple[float, np.ndarray]:
        """``weight * sum((eps_phi - eps)^2)`` and its gradient w.r.t. the parameter vector."""
        single, zt, lr_up, tt, tok = self._inputs(z_t, cond, t)
        target = torch.from_numpy(np.ascontiguousarray(np.asarray(eps).reshape(zt.shape))).to(self.dtype)
        self.net.zero_grad(set_to_none=True)
        loss = weight * ((self.net(zt, lr_up, tt, tok) - target) ** 2).sum()
        loss.backward()
        return float(loss.detach()), self._grad_vector()

    # -- checkpoints --------------------------------------------------------
    def save(self, path: str | Path) -> None:
        """Header JSON (layer spec, parameter count, schedule hash) then float32 LE parameters."""
        header = json.dumps({
            "version": 1,
            "layer_spec": asdict(self.spec),
            "n_params": self.n_params,
            "schedule_hash": self.schedule_hash,
        }, sort_keys=True).encode()
        params = np.concatenate([p.detach().numpy().ravel() for p in self.net.parameters()]).astype("<f4")
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            f.write(params.tobytes())

    @classmethod
    def load(cls, path: str | Path, schedule_hash: str | None = None) -> "ConvDenoiser":
        with open(path, "rb") as f:
            if f.read(len(_MAGIC)) != _MAGIC:
                raise StateError(f"{path} is not a denoiser checkpoint")
            (n,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(n))
            params = np.frombuffer(f.read(), dtype="<f4")
        if schedule_hash is not None and header["schedule_hash"] != schedule_hash:
            raise StateError(
                f"checkpoint schedule hash {header['schedule_hash']} does not match {schedule_hash}")
        if params.size != header["n_params"]:
            raise StateError("truncated checkpoint")
        model = cls(LayerSpec(**header["layer_spec"]), schedule_hash=header["schedule_hash"])
        model.set_params(params)
        return model


# -- training -------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    lr_noise_frac: float = 0.05
    val_fraction: float = 0.1
    token: int = 1
    layer: LayerSpec = field(default_factory=LayerSpec)


def lr_noise_level(schedule: NoiseSchedule, frac: float) -> int:
    return min(schedule.T - 1, max(0, int(round(frac * schedule.T))))


class DenoiserTrainer:
    """Epoch-wise trainer with resumable state.

    Each epoch draws its permutation, timesteps and noise from a generator
    seeded by ``(seed, epoch)``, so continuing from a saved epoch replays the
    same trajectory as an uninterrupted run.
    """

    def __init__(self, hr: np.ndarray, lr: np.ndarray, schedule: NoiseSchedule, cfg: TrainConfig,
                 seed: int = 0, model: ConvDenoiser | None = None):
        hr = np.asarray(hr, dtype=np.float32)
        lr = np.asarray(lr, dtype=np.float32)
        if len(hr) == 0:
            raise ParameterError("empty training corpus")
        if lr.shape[0] != hr.shape[0] or lr.shape[2] * FACTOR != hr.shape[2] or lr.shape[3] * FACTOR != hr.shape[3]:
            raise ShapeError("LR patches must be 1/4 of the HR patches")
        self.schedule = schedule
        self.cfg = cfg
        self.seed = seed
        split = np.random.default_rng([seed, 0xBEEF]).permutation(len(hr))
        n_val = int(round(cfg.val_fraction * len(hr)))
        self.val_idx, self.train_idx = np.sort(split[:n_val]), np.sort(split[n_val:])
        if len(self.train_idx) == 0:
            raise ParameterError("training split is empty")
        self.hr, self.lr = hr, lr
        self.model = model or ConvDenoiser(cfg.layer, schedule_hash=schedule.hash, seed=seed)
        self.model.net.train()
        self.opt = torch.optim.Adam(self.model.net.parameters(), lr=cfg.learning_rate,
                                    betas=tuple(cfg.adam_betas))
        self.epoch = 0
        self.losses: list[float] = []
        self.noise_level = lr_noise_level(schedule, cfg.lr_noise_frac)
        self.sqrt_ab = torch.from_numpy(np.sqrt(schedule.alpha_bar)).float()
        self.sqrt_1mab = torch.from_numpy(np.sqrt(1.0 - schedule.alpha_bar)).float()

    def _batch_loss(self, hr, lr, t, eps, lr_eps):
        ab_l = self.schedule.alpha_bar[self.noise_level]
        lr_noisy = math.sqrt(ab_l) * lr + math.sqrt(1.0 - ab_l) * lr_eps
        lr_up = lr_noisy.repeat_interleave(FACTOR, 2).repeat_interleave(FACTOR, 3)
        z_t = self.sqrt_ab[t].view(-1, 1, 1, 1) * hr + self.sqrt_1mab[t].view(-1, 1, 1, 1) * eps
        tok = torch.full((hr.shape[0],), self.cfg.token, dtype=torch.int64)
        pred = self.model.net(z_t, lr_up, t.float(), tok)
        gamma = torch.from_numpy(self.schedule.gamma[t.numpy()]).float().view(-1, 1, 1, 1)
        return (gamma * (pred - eps) ** 2).mean()

    def run_epoch(self) -> float:
        rng = np.random.default_rng([self.seed, self.epoch])
        order = self.train_idx[rng.permutation(len(self.train_idx))]
        total, count = 0.0, 0
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            hr = torch.from_numpy(self.hr[idx])
            lr = torch.from_numpy(self.lr[idx])
            t = torch.from_numpy(rng.integers(0, self.schedule.T, size=len(idx)))
            eps = torch.from_numpy(rng.standard_normal(hr.shape, dtype=np.float32))
            lr_eps = torch.from_numpy(rng.standard_normal(lr.shape, dtype=np.float32))
            self.opt.zero_grad(set_to_none=True)
            loss = self._batch_loss(hr, lr, t, eps, lr_eps)
            loss.backward()
            self.opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        mean = total / count
        if not math.isfinite(mean):
            raise NumericError(f"non-finite training loss at epoch {self.epoch}")
        self.losses.append(mean)
        log.info("epoch %d mean loss %.5f", self.epoch, mean)
        self.epoch += 1
        return mean

    def train(self, epochs: int | None = None, on_epoch=None) -> list[float]:
        target = self.cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            self.run_epoch()
            if on_epoch is not None:
                on_epoch(self)
        self.model.net.eval()
        return self.losses

    def validation_loss(self, pairs: int = 4, seed: int = 1234, idx: Sequence[int] | None = None) -> float:
        """Mean ELBO loss on held-out patches with fixed (t, eps) draws."""
        idx = self.val_idx if idx is None else np.asarray(idx)
        if len(idx) == 0:
            idx = self.train_idx
        rng = np.random.default_rng(seed)
        was_training = self.model.net.training
        self.model.net.eval()
        vals = []
        with torch.no_grad():
            for _ in range(pairs):
                hr = torch.from_numpy(self.hr[idx])
                lr = torch.from_numpy(self.lr[idx])
                t = torch.from_numpy(rng.integers(0, self.schedule.T, size=len(idx)))
                eps = torch.from_numpy(rng.standard_normal(hr.shape, dtype=np.float32))
                lr_eps = torch.from_numpy(rng.standard_normal(lr.shape, dtype=np.float32))
                vals.append(float(self._batch_loss(hr, lr, t, eps, lr_eps)))
        self.model.net.train(was_training)
        return float(np.mean(vals))

    # resumable optimizer state lives next to the model checkpoint
    def save_state(self, ckpt: str | Path) -> None:
        self.model.save(ckpt)
        flat = {}
        state = self.opt.state_dict()
        for i, st in state["state"].items():
            flat[f"step_{i}"] = np.asarray(float(st["step"]))
            flat[f"m_{i}"] = st["exp_avg"].numpy()
            flat[f"v_{i}"] = st["exp_avg_sq"].numpy()
        np.savez(str(ckpt) + ".opt.npz", epoch=self.epoch, losses=np.asarray(self.losses), **flat)

    def load_state(self, ckpt: str | Path) -> None:
        loaded = ConvDenoiser.load(ckpt, schedule_hash=self.schedule.hash)
        self.model.set_params(loaded.get_params())
        data = np.load(str(ckpt) + ".opt.npz")
        self.epoch = int(data["epoch"])
        self.losses = [float(x) for x in data["losses"]]
        params = list(self.model.net.parameters())
        state = {"state": {}, "param_groups": self.opt.state_dict()["param_groups"]}
        for i, p in enumerate(params):
            if f"m_{i}" in data:
                state["state"][i] = {
                    "step": torch.tensor(float(data[f"step_{i}"])),
                    "exp_avg": torch.from_numpy(data[f"m_{i}"].copy()),
                    "exp_avg_sq": torch.from_numpy(data[f"v_{i}"].copy()),
                }
        self.opt.load_state_dict(state)


def train_denoiser(hr: np.ndarray, lr: np.ndarray, schedule: NoiseSchedule, cfg: TrainConfig | None = None,
                   seed: int = 0) -> tuple[ConvDenoiser, list[float]]:
    """Fit a :class:`ConvDenoiser` to ``(HR, LR)`` patch pairs; returns ``(model, per-epoch mean loss)``."""
    trainer = DenoiserTrainer(hr, lr, schedule, cfg or TrainConfig(), seed=seed)
    losses = trainer.train()
    return trainer.model, losses


def make_conditioning(lr_image: np.ndarray, schedule: NoiseSchedule, frac: float = 0.05, token: int = 1) -> Conditioning:
    return Conditioning(lr_image=lr_image, lr_noise_level=lr_noise_level(schedule, frac), token=token)
