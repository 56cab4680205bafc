"""Gaussian diffusion in latent space.

Forward marginal and training objective (epsilon parameterization):

    z_t = sqrt(abar_t) * z_0 + sqrt(1 - abar_t) * eps
    L   = E || eps - eps_theta(z_t, c, t) ||^2

Ancestral reverse step with sigma_t^2 = beta_t:

    z_{t-1} = (z_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sqrt(beta_t) * n

Guided noise estimate: eps_hat = eps_uncond + s * (eps_cond - eps_uncond).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np
import torch

Denoiser = Callable[[torch.Tensor, torch.Tensor, Any], torch.Tensor]


class ScheduleError(ValueError):
    pass


class NonFiniteError(RuntimeError):
    """Raised when the reverse process produces NaN or Inf."""


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    beta_start: float = float("nan")
    beta_end: float = float("nan")
    family: str = "linear"
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ScheduleError("betas must be a non-empty 1-D sequence")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ScheduleError("betas must lie in (0, 1)")
        alphas = 1.0 - betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta_start),
                "beta_end": float(self.beta_end), "family": self.family}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        if d.get("family", "linear") != "linear":
            raise ScheduleError(f"unsupported schedule family {d.get('family')!r}")
        return make_linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ScheduleError(f"T must be an integer >= 2, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return NoiseSchedule(betas=betas, beta_start=beta_start, beta_end=beta_end)


def _gather(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.expand(like.shape[0])
    if t.ndim != 1 or t.shape[0] != like.shape[0]:
        raise ValueError(f"expected one step index per batch entry, got shape {tuple(t.shape)}")
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= values.size):
        raise IndexError(f"step index out of range [0, {values.size})")
    out = torch.from_numpy(values)[t.cpu()].to(device=like.device, dtype=like.dtype)
    return out.view(-1, *([1] * (like.ndim - 1)))


def q_sample(z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    abar = _gather(schedule.alpha_bars, t, z0)
    return abar.sqrt() * z0 + (1.0 - abar).sqrt() * eps


def training_loss(model: Denoiser, z0: torch.Tensor, c: Any, t: torch.Tensor, eps: torch.Tensor,
                  schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between the injected noise and the model's estimate of it."""
    z_t = q_sample(z0, t, eps, schedule)
    pred = model(z_t, torch.as_tensor(t, dtype=torch.long), c)
    if pred.shape != eps.shape:
        raise ValueError(f"model output {tuple(pred.shape)} does not match noise {tuple(eps.shape)}")
    return torch.mean((eps - pred) ** 2)


@dataclass
class GuidanceSpec:
    scale: float = 1.0
    null_bundle: Optional[Any] = None

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be nonnegative")


def guided_eps(model: Denoiser, z: torch.Tensor, t: torch.Tensor, c: Any, guidance: GuidanceSpec) -> torch.Tensor:
    s = float(guidance.scale)
    if s == 1.0:
        return model(z, t, c)
    null = guidance.null_bundle if guidance.null_bundle is not None else c.null_like()
    eps_u = model(z, t, null)
    if s == 0.0:
        return eps_u
    eps_c = model(z, t, c)
    return eps_u + s * (eps_c - eps_u)


@torch.no_grad()
def ddpm_sample(model: Denoiser, shape: tuple, c: Any, schedule: NoiseSchedule,
                guidance: Optional[GuidanceSpec] = None, seed: int = 0,
                dtype: torch.dtype = torch.float32) -> torch.Tensor:
    guidance = guidance or GuidanceSpec()
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(shape, generator=gen, dtype=dtype)
    batch = shape[0]
    for step in range(schedule.T - 1, -1, -1):
        t = torch.full((batch,), step, dtype=torch.long)
        eps = guided_eps(model, z, t, c, guidance)
        beta = float(schedule.betas[step])
        abar = float(schedule.alpha_bars[step])
        z = (z - beta / np.sqrt(1.0 - abar) * eps) / np.sqrt(1.0 - beta)
        if step > 0:
            z = z + np.sqrt(beta) * torch.randn(shape, generator=gen, dtype=dtype)
        if not torch.isfinite(z).all():
            raise NonFiniteError(f"non-finite latent at step {step}")
    return z
