"""Conditioned denoiser: local-condition fusion + global context + UNet."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn

from .conditions import ConditionBundle, LocalConditionEncoder, concat_with_latent
from .global_conditions import GlobalAdapter, ImagePriorEmbedder, TextEmbedder
from .unet import ContextPack, UNet, UNetConfig


@dataclass
class ModelConfig:
    image_size: int = 32
    downsample: int = 4
    latent_channels: int = 4
    cond_channels: int = 4
    encoder_hidden: int = 32
    base_channels: int = 64
    channel_multipliers: tuple = (1, 2)
    num_blocks_per_level: int = 1
    attention_levels: tuple = (1,)
    context_dim: int = 128
    heads: int = 4
    norm_groups: int = 8
    text_tokens: int = 8
    prior_grid: int = 4
    prior_raw_dim: int = 64
    video: bool = False
    num_frames: int = 1

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_levels = tuple(self.attention_levels)

    @property
    def latent_size(self) -> int:
        return self.image_size // self.downsample

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            base_channels=self.base_channels, channel_multipliers=self.channel_multipliers,
            num_blocks_per_level=self.num_blocks_per_level, attention_levels=self.attention_levels,
            context_dim=self.context_dim, heads=self.heads,
            in_channels=self.latent_channels + self.cond_channels, out_channels=self.latent_channels,
            norm_groups=self.norm_groups, temporal=self.video, num_frames=self.num_frames)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ConditionedDenoiser(nn.Module):
    """Noise estimator eps_theta(z_t, c, t) over latent clips (B, F, C_lat, h, w)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = cfg = config
        self.cond = LocalConditionEncoder(cfg.cond_channels, cfg.downsample, cfg.encoder_hidden, with_flow=cfg.video)
        self.text = TextEmbedder(cfg.context_dim, cfg.text_tokens)
        self.prior = ImagePriorEmbedder(cfg.image_size, cfg.prior_grid, cfg.prior_raw_dim)
        self.adapter = GlobalAdapter(cfg.prior_raw_dim, cfg.context_dim)
        self.unet = UNet(cfg.unet_config())

    @property
    def stage(self) -> str:
        return "video" if self.config.video else "image"

    def context(self, bundle: ConditionBundle, num_frames: int, dtype=torch.float32) -> ContextPack:
        b = bundle.batch_size
        prompts = bundle.text if bundle.text is not None else [None] * b
        prompts = [p if bool(on) else None for p, on in zip(prompts, bundle.is_present("text"))]
        f_t = self.text(prompts).to(dtype)
        n_i, c = self.prior.num_tokens, self.config.context_dim
        on = bundle.is_present("image_prior")
        if bundle.image_prior is not None and bool(on.any()):
            f_i = self.adapter(self.prior(bundle.image_prior.to(dtype)))
            f_i = f_i * on.to(dtype).view(b, 1, 1)
        else:
            f_i = torch.zeros(b, n_i, c, dtype=dtype)
        return ContextPack(f_t.repeat_interleave(num_frames, 0), f_i.repeat_interleave(num_frames, 0))

    def model_input(self, z_t: torch.Tensor, bundle: ConditionBundle) -> torch.Tensor:
        b, nf = z_t.shape[:2]
        if bundle.batch_size != b:
            raise ValueError(f"bundle batch {bundle.batch_size} != latent batch {b}")
        feats = self.cond(bundle, nf, self.stage, z_t.dtype, latent_hw=tuple(z_t.shape[-2:]))
        return concat_with_latent(z_t, feats)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, bundle: ConditionBundle) -> torch.Tensor:
        if z_t.ndim != 5:
            raise ValueError(f"expected latent clip (B, F, C, h, w), got {tuple(z_t.shape)}")
        b, nf = z_t.shape[:2]
        x = self.model_input(z_t, bundle)
        ctx = self.context(bundle, nf, z_t.dtype)
        t = torch.as_tensor(t, dtype=torch.long).expand(b) if torch.as_tensor(t).ndim == 0 else t
        if self.config.video:
            return self.unet(x, t, ctx)
        out = self.unet(x.reshape(b * nf, *x.shape[2:]), torch.as_tensor(t).repeat_interleave(nf), ctx)
        return out.reshape(b, nf, *out.shape[1:])


def trainable_names(model: nn.Module) -> list:
    return [n for n, p in model.named_parameters() if p.requires_grad]
