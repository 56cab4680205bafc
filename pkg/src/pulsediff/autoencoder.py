"""Small convolutional VAE that supplies the latent space for diffusion.

Frames are encoded independently; clips of shape (B, F, C, H, W) are folded
to (B*F, C, H, W) so no information moves between frames.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class VAEConfig:
    in_channels: int = 1
    latent_channels: int = 4
    base_channels: int = 32
    downsample: int = 4
    kl_weight: float = 1e-6

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VAETrainConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 1e-3
    kl_weight: float = 1e-6


class EmptyDatasetError(ValueError):
    pass


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class VAE(nn.Module):
    def __init__(self, config: VAEConfig | None = None):
        super().__init__()
        self.config = cfg = config or VAEConfig()
        stages = int(round(math.log2(cfg.downsample)))
        if 2 ** stages != cfg.downsample:
            raise ValueError("downsample factor must be a power of two")
        ch = cfg.base_channels
        enc = [nn.Conv2d(cfg.in_channels, ch, 3, padding=1)]
        for i in range(stages):
            nxt = ch * 2 if i < 1 else ch
            enc += [_ResBlock(ch), nn.Conv2d(ch, nxt, 3, stride=2, padding=1)]
            ch = nxt
        enc += [_ResBlock(ch), nn.GroupNorm(8, ch), nn.SiLU(), nn.Conv2d(ch, 2 * cfg.latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(cfg.latent_channels, ch, 3, padding=1), _ResBlock(ch)]
        for i in reversed(range(stages)):
            nxt = cfg.base_channels if i == 0 else ch
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, nxt, 3, padding=1), _ResBlock(nxt)]
            ch = nxt
        dec += [nn.GroupNorm(8, ch), nn.SiLU(), nn.Conv2d(ch, cfg.in_channels, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    @property
    def downsample(self) -> int:
        return self.config.downsample

    def _moments(self, x: torch.Tensor):
        h, w = x.shape[-2:]
        f = self.config.downsample
        if h % f or w % f:
            raise ValueError(f"spatial size {h}x{w} not divisible by downsample factor {f}")
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic (posterior-mean) encoding of a (B, F, C, H, W) pixel clip."""
        b, f = x.shape[:2]
        mean, _ = self._moments(x.reshape(b * f, *x.shape[2:]))
        return mean.reshape(b, f, *mean.shape[1:])

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        b, f = z.shape[:2]
        x = self.decoder(z.reshape(b * f, *z.shape[2:])).clamp(-1.0, 1.0)
        return x.reshape(b, f, *x.shape[1:])

    def loss(self, x: torch.Tensor, gen: torch.Generator, kl_weight: float):
        """Reconstruction + weighted KL on a batch of single frames (N, C, H, W)."""
        mean, logvar = self._moments(x)
        std = torch.exp(0.5 * logvar)
        z = mean + std * torch.randn(mean.shape, generator=gen, dtype=mean.dtype)
        recon = self.decoder(z)
        rec = F.mse_loss(recon, x)
        if kl_weight == 0:
            kl_term = torch.zeros((), dtype=x.dtype)
        else:
            kl = 0.5 * torch.mean(mean ** 2 + logvar.exp() - 1.0 - logvar)
            kl_term = kl_weight * kl
        return rec + kl_term, rec.detach(), kl_term.detach()


def train_vae(frames: torch.Tensor, config: VAETrainConfig | None = None, seed: int = 0,
              vae_config: VAEConfig | None = None, log_every: int = 0):
    """Fit a VAE to a stack of frames (N, 1, H, W) in [-1, 1].

    Returns the trained model (eval mode) and a list of per-step dicts with the
    total, reconstruction and KL losses.
    """
    config = config or VAETrainConfig()
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise EmptyDatasetError("train_vae needs a non-empty (N, C, H, W) frame stack")
    torch.manual_seed(seed)
    vae_config = vae_config or VAEConfig(in_channels=frames.shape[1], kl_weight=config.kl_weight)
    vae = VAE(vae_config)
    opt = torch.optim.Adam(vae.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(seed)
    n = frames.shape[0]
    log = []
    vae.train()
    for step in range(config.steps):
        idx = torch.randint(0, n, (min(config.batch_size, n),), generator=gen)
        lr = config.lr * 0.5 * (1 + math.cos(math.pi * step / max(config.steps, 1)))
        for g in opt.param_groups:
            g["lr"] = lr
        total, rec, kl = vae.loss(frames[idx], gen, config.kl_weight)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        log.append({"step": step, "loss": float(total.detach()), "recon": float(rec), "kl": float(kl)})
    vae.eval()
    for p in vae.parameters():
        p.requires_grad_(False)
    return vae, log


@torch.no_grad()
def latent_scale(vae: VAE, frames: torch.Tensor, batch: int = 64) -> float:
    """Scale that brings encoded latents to unit standard deviation."""
    zs = [vae.encode(frames[i:i + batch].unsqueeze(1)) for i in range(0, frames.shape[0], batch)]
    std = float(torch.cat(zs).std())
    return 1.0 / max(std, 1e-6)


def psnr(a: torch.Tensor, b: torch.Tensor, peak_to_peak: float = 2.0) -> float:
    mse = float(torch.mean((a - b) ** 2))
    return 10.0 * math.log10(peak_to_peak ** 2 / max(mse, 1e-20))
