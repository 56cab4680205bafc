"""Sampling decoded clips from a trained checkpoint."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch

from .conditions import CONDITIONS, ConditionBundle
from .data.phantom import SampleRecord
from .diffusion import GuidanceSpec, ddpm_sample
from .training import TrainedModel, bundle_from_arrays, records_to_arrays


def bundle_from_record(record: SampleRecord, num_frames: int, start: int = 0, video: bool = True) -> ConditionBundle:
    _, arrays = records_to_arrays([record])

    class _View:
        pass

    data = _View()
    for k, v in arrays.items():
        setattr(data, k, v)
    return bundle_from_arrays(data, torch.tensor([0]), torch.tensor([start]), num_frames, video)


@torch.no_grad()
def sample_clip(trained: TrainedModel, bundle: ConditionBundle, guidance_scale: float = 1.0,
                seed: int = 0, num_frames: Optional[int] = None) -> np.ndarray:
    """Decoded pixel clips (B, F, 1, H, W) in [-1, 1]."""
    cfg = trained.model.config
    nf = num_frames or (cfg.num_frames if cfg.video else (bundle.num_frames or 1))
    b = bundle.batch_size
    shape = (b, nf, cfg.latent_channels, cfg.latent_size, cfg.latent_size)
    z = ddpm_sample(trained.model, shape, bundle, trained.schedule, GuidanceSpec(guidance_scale), seed)
    return trained.vae.decode(z / trained.latent_scale).numpy()


def parse_drop(names: Sequence[str] | str) -> list:
    if isinstance(names, str):
        names = [n.strip() for n in names.split(",") if n.strip()]
    names = list(names)
    if "all" in names:
        return list(CONDITIONS)
    unknown = [n for n in names if n not in CONDITIONS]
    if unknown:
        raise ValueError(f"unknown condition name(s) {unknown}; valid: {', '.join(CONDITIONS)}")
    return names
