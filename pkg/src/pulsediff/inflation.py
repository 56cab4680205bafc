"""2D -> 3D inflation of the conditioned denoiser."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import torch

from .model import ConditionedDenoiser, ModelConfig
from .unet import ContextPack, UNet


class MissingParameterError(KeyError):
    pass


@dataclass
class InflationReport:
    mapped: list = field(default_factory=list)        # (2D name, 3D name)
    new_temporal: list = field(default_factory=list)
    new_flow: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mapped": [list(m) for m in self.mapped], "new_temporal": self.new_temporal,
                "new_flow": self.new_flow}


def inflate(params2d: Mapping[str, torch.Tensor], config: ModelConfig, num_frames: int = 8,
            seed: int = 0):
    """Build a video denoiser from 2D weights.

    Spatial k x k kernels become 1 x k x k with identical values; temporal
    attention layers and the flow encoder are freshly initialized (their
    output layers start at zero). Returns (model3d, report).
    """
    cfg3 = replace(config, video=True, num_frames=int(num_frames))
    torch.manual_seed(seed)
    model3d = ConditionedDenoiser(cfg3)
    target = model3d.state_dict()
    expected2d = ConditionedDenoiser(replace(config, video=False, num_frames=1)).state_dict()
    missing = sorted(set(expected2d) - set(params2d))
    if missing:
        raise MissingParameterError(f"2D parameters missing for inflation: {missing}")

    param_names = {n for n, _ in model3d.named_parameters()}
    report = InflationReport()
    new_state = {}
    for name in expected2d:
        src = params2d[name]
        dst = target[name]
        if src.ndim == 4 and dst.ndim == 5 and dst.shape[2] == 1:
            val = src.unsqueeze(2)
        else:
            val = src
        if val.shape != dst.shape:
            raise ValueError(f"{name}: 2D shape {tuple(src.shape)} incompatible with {tuple(dst.shape)}")
        new_state[name] = val.detach().clone()
        if name in param_names:
            report.mapped.append((name, name))
    for name in target:
        if name in new_state:
            continue
        if ".temporal." in name:
            report.new_temporal.append(name)
        elif name.startswith("cond.flow_encoder."):
            report.new_flow.append(name)
        else:
            raise RuntimeError(f"unexpected new parameter {name}")
    model3d.load_state_dict({**target, **new_state})
    return model3d, report


def inflate_model(model2d: ConditionedDenoiser, num_frames: int = 8, seed: int = 0):
    return inflate(model2d.state_dict(), model2d.config, num_frames, seed)


def forward3d(z_in: torch.Tensor, t: torch.Tensor, ctx: ContextPack, unet3d: UNet) -> torch.Tensor:
    if not unet3d.config.temporal:
        raise ValueError("forward3d needs an inflated UNet")
    return unet3d(z_in, t, ctx)
