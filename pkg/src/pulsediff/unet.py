"""Spatial denoising UNet with factorized text / image-prior cross-attention.

The same module classes serve the inflated video model: when built with
``temporal=True`` every spatial convolution stores a (C_out, C_in, 1, k, k)
kernel and each transformer block gains a temporal self-attention layer
right after its cross-attention. Spatial layers always see frames folded
into the batch, so frames only interact through the temporal layers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class UNetConfig:
    base_channels: int = 64
    channel_multipliers: tuple = (1, 2)
    num_blocks_per_level: int = 1
    attention_levels: tuple = (1,)
    context_dim: int = 128
    heads: int = 4
    in_channels: int = 8
    out_channels: int = 4
    norm_groups: int = 8
    temporal: bool = False
    num_frames: int = 1

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_levels = tuple(sorted(set(self.attention_levels)))
        levels = range(len(self.channel_multipliers))
        if any(lvl not in levels for lvl in self.attention_levels):
            raise ValueError(f"attention_levels {self.attention_levels} outside levels {list(levels)}")
        if self.in_channels < self.out_channels:
            raise ValueError("in_channels must include at least the latent channels")
        if self.temporal and self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")

    @property
    def cond_channels(self) -> int:
        return self.in_channels - self.out_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_levels"] = list(self.attention_levels)
        return d


class ContextPack(NamedTuple):
    """Text tokens (N, N_T, C) and adapted image-prior tokens (N, N_I, C)."""
    f_t: torch.Tensor
    f_i: torch.Tensor


def time_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal step embedding laid out as [sin(t w_k) ..., cos(t w_k) ...]."""
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    half = dim // 2
    t = torch.as_tensor(t)
    dtype = t.dtype if t.is_floating_point() else torch.get_default_dtype()
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).to(dtype)


class SpatialConv(nn.Module):
    """k x k convolution; after inflation the kernel is 1 x k x k over (F, H, W)."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, temporal: bool = False):
        super().__init__()
        self.stride, self.pad, self.temporal = stride, kernel // 2, temporal
        shape = (c_out, c_in, 1, kernel, kernel) if temporal else (c_out, c_in, kernel, kernel)
        self.weight = nn.Parameter(torch.empty(shape))
        self.bias = nn.Parameter(torch.empty(c_out))
        fan_in = c_in * kernel * kernel
        nn.init.kaiming_uniform_(self.weight.view(c_out, c_in, kernel, kernel), a=math.sqrt(5))
        nn.init.uniform_(self.bias, -1 / math.sqrt(fan_in), 1 / math.sqrt(fan_in))

    def forward(self, x: torch.Tensor, num_frames: int = 1) -> torch.Tensor:
        if not self.temporal:
            return F.conv2d(x, self.weight, self.bias, self.stride, self.pad)
        n, c, h, w = x.shape
        x = x.reshape(n // num_frames, num_frames, c, h, w).transpose(1, 2)
        y = F.conv3d(x, self.weight, self.bias, (1, self.stride, self.stride), (0, self.pad, self.pad))
        return y.transpose(1, 2).reshape(n, y.shape[1], *y.shape[-2:])


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int, groups: int, temporal: bool):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = SpatialConv(c_in, c_out, 3, temporal=temporal)
        self.temb = nn.Linear(temb_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = SpatialConv(c_out, c_out, 3, temporal=temporal)
        self.skip = SpatialConv(c_in, c_out, 1, temporal=temporal) if c_in != c_out else None

    def forward(self, x, temb, num_frames=1):
        h = self.conv1(F.silu(self.norm1(x)), num_frames)
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)), num_frames)
        skip = x if self.skip is None else self.skip(x, num_frames)
        return skip + h


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    n, l, c = x.shape
    return x.reshape(n, l, heads, c // heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    n, h, l, d = x.shape
    return x.transpose(1, 2).reshape(n, l, h * d)


def attention(q, k, v, heads: int, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Multi-head scaled dot-product attention on (N, L, C) inputs."""
    q, k, v = (_split_heads(a, heads) for a in (q, k, v))
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if bias is not None:
        logits = logits + bias
    return _merge_heads(torch.softmax(logits, dim=-1) @ v)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=-1)
        return self.out(attention(q, k, v, self.heads))


class FactorizedCrossAttention(nn.Module):
    """Two cross-attention branches (text, image prior) with private Q/K/V.

    The pre-attention LayerNorm and the bias-free output projection are shared.
    The value half of the image branch starts at zero, so a freshly added
    branch leaves the text-only output untouched.
    """

    def __init__(self, dim: int, context_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.q_text = nn.Linear(dim, dim, bias=False)
        self.kv_text = nn.Linear(context_dim, 2 * dim, bias=False)
        self.q_img = nn.Linear(dim, dim, bias=False)
        self.kv_img = nn.Linear(context_dim, 2 * dim, bias=False)
        self.out = nn.Linear(dim, dim, bias=False)
        with torch.no_grad():
            self.kv_img.weight[dim:].zero_()

    def branch(self, hn: torch.Tensor, tokens: torch.Tensor, which: str) -> torch.Tensor:
        q = getattr(self, f"q_{which}")(hn)
        k, v = getattr(self, f"kv_{which}")(tokens).chunk(2, dim=-1)
        return attention(q, k, v, self.heads)

    def forward(self, h: torch.Tensor, f_t: torch.Tensor, f_i: torch.Tensor) -> torch.Tensor:
        hn = self.norm(h)
        return self.out(self.branch(hn, f_t, "text") + self.branch(hn, f_i, "img"))


def factorized_cross_attention(h: torch.Tensor, f_t: torch.Tensor, f_i: torch.Tensor,
                               layer: FactorizedCrossAttention) -> torch.Tensor:
    c = h.shape[-1]
    if f_t.shape[-1] != f_i.shape[-1]:
        raise ValueError(f"text dim {f_t.shape[-1]} != image-prior dim {f_i.shape[-1]}")
    if layer.kv_text.in_features != f_t.shape[-1] or layer.q_text.in_features != c:
        raise ValueError("feature or context dimension does not match the layer")
    return layer(h, f_t, f_i)


class TemporalAttention(nn.Module):
    """Self-attention across frames at each spatial location.

    Relative position bias over frame offsets; the output projection is
    zero-initialized so the layer starts as an identity on the residual path.
    """

    def __init__(self, dim: int, heads: int, num_frames: int):
        super().__init__()
        self.heads, self.num_frames = heads, num_frames
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.out = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros(heads, 2 * num_frames - 1))
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def position_bias(self, f: int) -> torch.Tensor:
        if f > self.num_frames:
            raise ValueError(f"clip has {f} frames, layer was built for {self.num_frames}")
        idx = torch.arange(f)
        offsets = idx[None, :] - idx[:, None] + self.num_frames - 1
        return self.rel_bias[:, offsets]

    def forward(self, x: torch.Tensor, num_frames: int) -> torch.Tensor:
        # x: (B*F, L, C) -> attend over F for each of the L locations
        n, l, c = x.shape
        b = n // num_frames
        seq = x.reshape(b, num_frames, l, c).transpose(1, 2).reshape(b * l, num_frames, c)
        q, k, v = self.qkv(self.norm(seq)).chunk(3, dim=-1)
        y = self.out(attention(q, k, v, self.heads, self.position_bias(num_frames)))
        return y.reshape(b, l, num_frames, c).transpose(1, 2).reshape(n, l, c)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 2):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mult * dim)
        self.fc2 = nn.Linear(mult * dim, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(self.norm(x))))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, context_dim: int, heads: int, temporal: bool, num_frames: int):
        super().__init__()
        self.attn1 = SelfAttention(dim, heads)
        self.xattn = FactorizedCrossAttention(dim, context_dim, heads)
        self.temporal = TemporalAttention(dim, heads, num_frames) if temporal else None
        self.ff = FeedForward(dim)

    def forward(self, x: torch.Tensor, ctx: ContextPack, num_frames: int = 1) -> torch.Tensor:
        n, c, h, w = x.shape
        tok = x.flatten(2).transpose(1, 2)
        tok = tok + self.attn1(tok)
        tok = tok + self.xattn(tok, ctx.f_t, ctx.f_i)
        if self.temporal is not None:
            tok = tok + self.temporal(tok, num_frames)
        tok = tok + self.ff(tok)
        return tok.transpose(1, 2).reshape(n, c, h, w)


class _Level(nn.Module):
    def __init__(self):
        super().__init__()
        self.res = nn.ModuleList()
        self.attn = nn.ModuleList()
        self.resample: Optional[SpatialConv] = None


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = cfg = config
        tmp, nf, g = cfg.temporal, cfg.num_frames, cfg.norm_groups
        chans = [cfg.base_channels * m for m in cfg.channel_multipliers]
        temb = 4 * cfg.base_channels

        def block(ch):
            return TransformerBlock(ch, cfg.context_dim, cfg.heads, tmp, nf)

        self.time_mlp = nn.Sequential(nn.Linear(cfg.base_channels, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = SpatialConv(cfg.in_channels, chans[0], 3, temporal=tmp)

        self.down = nn.ModuleList()
        skips, ch = [chans[0]], chans[0]
        for lvl, c_out in enumerate(chans):
            level = _Level()
            for _ in range(cfg.num_blocks_per_level):
                level.res.append(ResBlock(ch, c_out, temb, g, tmp))
                ch = c_out
                if lvl in cfg.attention_levels:
                    level.attn.append(block(ch))
                skips.append(ch)
            if lvl < len(chans) - 1:
                level.resample = SpatialConv(ch, ch, 3, stride=2, temporal=tmp)
                skips.append(ch)
            self.down.append(level)

        self.mid_res1 = ResBlock(ch, ch, temb, g, tmp)
        self.mid_attn = block(ch)
        self.mid_res2 = ResBlock(ch, ch, temb, g, tmp)

        self.up = nn.ModuleList()
        for lvl in reversed(range(len(chans))):
            level = _Level()
            c_out = chans[lvl]
            for _ in range(cfg.num_blocks_per_level + 1):
                level.res.append(ResBlock(ch + skips.pop(), c_out, temb, g, tmp))
                ch = c_out
                if lvl in cfg.attention_levels:
                    level.attn.append(block(ch))
            if lvl > 0:
                level.resample = SpatialConv(ch, ch, 3, temporal=tmp)
            self.up.append(level)

        self.norm_out = nn.GroupNorm(g, ch)
        self.conv_out = SpatialConv(ch, cfg.out_channels, 3, temporal=tmp)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor, ctx: ContextPack) -> torch.Tensor:
        """Noise estimate.

        2D model: x is (N, C_in, h, w) with frames already folded into N.
        Temporal model: x is (B, F, C_in, h, w); t holds one step per clip.
        """
        cfg = self.config
        if cfg.temporal:
            if x.ndim != 5:
                raise ValueError(f"temporal UNet expects (B, F, C, h, w), got {tuple(x.shape)}")
            b, nf = x.shape[:2]
            x = x.reshape(b * nf, *x.shape[2:])
            t = torch.as_tensor(t).repeat_interleave(nf)
        else:
            if x.ndim != 4:
                raise ValueError(f"2D UNet expects (N, C, h, w), got {tuple(x.shape)}")
            nf = 1
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        for name, tok in (("text", ctx.f_t), ("image-prior", ctx.f_i)):
            if tok.shape[-1] != cfg.context_dim or tok.shape[0] != x.shape[0]:
                raise ValueError(f"{name} context shape {tuple(tok.shape)} does not match "
                                 f"(N={x.shape[0]}, *, C={cfg.context_dim})")

        temb = self.time_mlp(time_embedding(t, cfg.base_channels).to(x.dtype))
        h = self.conv_in(x, nf)
        hs = [h]
        for level in self.down:
            for i, res in enumerate(level.res):
                h = res(h, temb, nf)
                if len(level.attn):
                    h = level.attn[i](h, ctx, nf)
                hs.append(h)
            if level.resample is not None:
                h = level.resample(h, nf)
                hs.append(h)
        h = self.mid_res1(h, temb, nf)
        h = self.mid_attn(h, ctx, nf)
        h = self.mid_res2(h, temb, nf)
        for level in self.up:
            for i, res in enumerate(level.res):
                h = res(torch.cat([h, hs.pop()], dim=1), temb, nf)
                if len(level.attn):
                    h = level.attn[i](h, ctx, nf)
            if level.resample is not None:
                h = F.interpolate(h, scale_factor=2.0, mode="nearest")
                h = level.resample(h, nf)
        out = self.conv_out(F.silu(self.norm_out(h)), nf)
        if cfg.temporal:
            out = out.reshape(b, nf, *out.shape[1:])
        return out


def forward2d(z_in: torch.Tensor, t: torch.Tensor, ctx: ContextPack, unet: UNet) -> torch.Tensor:
    if unet.config.temporal:
        raise ValueError("forward2d needs a 2D (non-inflated) UNet")
    return unet(z_in, t, ctx)
