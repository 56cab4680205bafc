"""Global (non-spatial) conditions: view prompt tokens and image-prior tokens."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

PROMPTS = ("An ECHO with 2-chamber view.", "An ECHO with 4-chamber view.")
VIEW_PROMPTS = {"A2C": PROMPTS[0], "A4C": PROMPTS[1]}
TEXT_EMBEDDER_ID = "text:lookup-v1"
IMAGE_EMBEDDER_ID = "img:convpatch-v1"


class UnknownPromptError(KeyError):
    pass


class TextEmbedder(nn.Module):
    """Learned token block per fixed prompt; the null prompt maps to zeros."""

    def __init__(self, context_dim: int = 128, num_tokens: int = 8, prompts=PROMPTS, seed: int = 0):
        super().__init__()
        self.prompts = tuple(prompts)
        gen = torch.Generator().manual_seed(seed)
        self.tokens = nn.Parameter(torch.randn(len(self.prompts), num_tokens, context_dim, generator=gen))
        self.num_tokens, self.context_dim = num_tokens, context_dim

    def index(self, prompt) -> int:
        if prompt is None:
            return -1
        try:
            return self.prompts.index(prompt)
        except ValueError:
            raise UnknownPromptError(f"prompt {prompt!r} not in vocabulary {self.prompts}") from None

    def forward(self, prompts) -> torch.Tensor:
        """Token blocks (B, N_T, C) for a list of prompts (None = null)."""
        idx = [self.index(p) for p in prompts]
        zero = torch.zeros(self.num_tokens, self.context_dim, dtype=self.tokens.dtype)
        return torch.stack([self.tokens[i] if i >= 0 else zero for i in idx])


def embed_text(prompt, embedder: TextEmbedder) -> torch.Tensor:
    return embedder([prompt])[0]


class ImagePriorEmbedder(nn.Module):
    """Frozen random convolutional patch encoder.

    Weights are buffers drawn from a fixed seed, so they never train and two
    instances built with the same arguments agree bitwise.
    """

    def __init__(self, image_size: int = 32, grid: int = 4, raw_dim: int = 64, seed: int = 1234):
        super().__init__()
        if image_size % grid:
            raise ValueError("image size must be divisible by the token grid")
        self.patch = image_size // grid
        self.grid, self.raw_dim, self.image_size = grid, raw_dim, image_size
        gen = torch.Generator().manual_seed(seed)
        self.register_buffer("w1", torch.randn(32, 1, 3, 3, generator=gen) / 3.0)
        self.register_buffer("b1", 0.1 * torch.randn(32, generator=gen))
        self.register_buffer("w2", torch.randn(raw_dim, 32, self.patch, self.patch, generator=gen)
                             / (self.patch * (32 ** 0.5)))
        self.register_buffer("b2", 0.1 * torch.randn(raw_dim, generator=gen))

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, 1, H, W) in [-1, 1] -> (B, N_I, raw_dim)."""
        if frames.ndim != 4 or frames.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) frames, got {tuple(frames.shape)}")
        if frames.shape[-1] != self.image_size or frames.shape[-2] != self.image_size:
            raise ValueError(f"expected {self.image_size}x{self.image_size} frames")
        if frames.numel() and (frames.min() < -1 - 1e-6 or frames.max() > 1 + 1e-6):
            raise ValueError("image prior must lie in [-1, 1]")
        h = F.gelu(F.conv2d(frames, self.w1.to(frames.dtype), self.b1.to(frames.dtype), padding=1))
        h = F.conv2d(h, self.w2.to(frames.dtype), self.b2.to(frames.dtype), stride=self.patch)
        return h.flatten(2).transpose(1, 2)


def embed_image_prior(frame: torch.Tensor, embedder: ImagePriorEmbedder) -> torch.Tensor:
    return embedder(frame.unsqueeze(0))[0]


class GlobalAdapter(nn.Module):
    """Per-token MLP mapping image-prior features into the text token space."""

    def __init__(self, raw_dim: int = 64, context_dim: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(raw_dim, context_dim)
        self.fc2 = nn.Linear(context_dim, context_dim)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        if raw.shape[-1] != self.fc1.in_features:
            raise ValueError(f"adapter expects raw dim {self.fc1.in_features}, got {raw.shape[-1]}")
        return self.fc2(F.gelu(self.fc1(raw)))


def global_adapter(raw: torch.Tensor, adapter: GlobalAdapter) -> torch.Tensor:
    return adapter(raw)
