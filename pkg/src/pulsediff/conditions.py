"""Local conditions: container, per-condition encoders, fusion and dropping.

Conditions in canonical order::

    sketch       (B, 1, H, W)       static edge map, broadcast over frames
    mask         (B, F, 1, H, W)    integer labels {0 bg, 1 chamber, 2 myocardium, 3 valve}
    mv_skeleton  (B, F, 2, H, W)    valve polyline + motion-direction stroke
    flow         (B, F-1, 2, H, W)  (u, v) displacement in pixels/frame
    text         list of prompts    global
    image_prior  (B, 1, H, W)       global reference frame
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CONDITIONS = ("sketch", "mask", "mv_skeleton", "flow", "text", "image_prior")
LOCAL_CONDITIONS = CONDITIONS[:4]
NUM_LABELS = 4
DEFAULT_DROP_PROB = 0.1
FLOW_MAGIC = b"FLO1"


class ConditionError(ValueError):
    pass


@dataclass
class ConditionBundle:
    sketch: Optional[torch.Tensor] = None
    mask: Optional[torch.Tensor] = None
    mv_skeleton: Optional[torch.Tensor] = None
    flow: Optional[torch.Tensor] = None
    text: Optional[list] = None
    image_prior: Optional[torch.Tensor] = None
    present: Optional[torch.Tensor] = None  # (B, 6) bool, column order = CONDITIONS

    def __post_init__(self):
        b = self.batch_size
        populated = torch.tensor([getattr(self, n) is not None for n in CONDITIONS])
        if self.present is None:
            self.present = populated.expand(b, -1).clone()
        else:
            self.present = torch.as_tensor(self.present, dtype=torch.bool).reshape(b, len(CONDITIONS))
            if (self.present & ~populated).any():
                bad = [n for n, p, q in zip(CONDITIONS, self.present.any(0), populated) if p and not q]
                raise ConditionError(f"present flag set for unpopulated condition(s): {bad}")
        if self.text is not None:
            self.text = list(self.text)
            if len(self.text) != b:
                raise ConditionError("text list length must equal the batch size")
            # a null prompt counts as an absent text condition
            self.present[:, 4] &= torch.tensor([p is not None for p in self.text])

    @property
    def batch_size(self) -> int:
        for name in CONDITIONS:
            v = getattr(self, name)
            if v is not None:
                return len(v)
        if self.present is not None:
            return int(torch.as_tensor(self.present).reshape(-1, len(CONDITIONS)).shape[0])
        return 1

    @property
    def num_frames(self) -> Optional[int]:
        if self.mask is not None:
            return self.mask.shape[1]
        if self.mv_skeleton is not None:
            return self.mv_skeleton.shape[1]
        if self.flow is not None:
            return self.flow.shape[1] + 1
        return None

    def is_present(self, name: str) -> torch.Tensor:
        return self.present[:, CONDITIONS.index(name)]

    def present_names(self) -> list:
        """Conditions present for at least one sample."""
        return [n for n, p in zip(CONDITIONS, self.present.any(0)) if bool(p)]

    def with_absent(self, names: Sequence[str]) -> "ConditionBundle":
        unknown = [n for n in names if n not in CONDITIONS]
        if unknown:
            raise ConditionError(f"unknown condition name(s): {unknown}; valid: {list(CONDITIONS)}")
        present = self.present.clone()
        for n in names:
            present[:, CONDITIONS.index(n)] = False
        return replace(self, present=present)

    def only(self, names: Sequence[str]) -> "ConditionBundle":
        return self.with_absent([n for n in CONDITIONS if n not in names])

    def null_like(self) -> "ConditionBundle":
        return self.with_absent(CONDITIONS)

    def select(self, idx) -> "ConditionBundle":
        idx = torch.as_tensor(idx, dtype=torch.long)
        kw = {n: (None if getattr(self, n) is None else getattr(self, n)[idx]) for n in CONDITIONS if n != "text"}
        text = None if self.text is None else [self.text[int(i)] for i in idx]
        return ConditionBundle(text=text, present=self.present[idx], **kw)

    def validate(self, labels: int = NUM_LABELS) -> None:
        if self.mask is not None:
            if self.mask.is_floating_point():
                raise ConditionError("mask must hold integer labels")
            if self.mask.numel() and (int(self.mask.min()) < 0 or int(self.mask.max()) >= labels):
                raise ConditionError(f"mask labels outside 0..{labels - 1}")
        f = self.num_frames
        if self.flow is not None and f is not None and self.flow.shape[1] != f - 1:
            raise ConditionError(f"flow must have F-1={f - 1} slices, got {self.flow.shape[1]}")


def _mask_onehot(mask: torch.Tensor, dtype) -> torch.Tensor:
    """(N, 1, H, W) labels -> (N, NUM_LABELS-1, H, W) indicator planes (background implicit)."""
    oh = F.one_hot(mask[:, 0].long(), NUM_LABELS).permute(0, 3, 1, 2)
    return oh[:, 1:].to(dtype)


class ConditionEncoder(nn.Module):
    """Lightweight conv stack taking a condition map down to latent resolution."""

    def __init__(self, in_channels: int, out_channels: int, downsample: int = 4, hidden: int = 32,
                 zero_init: bool = False):
        super().__init__()
        stages = int(round(math.log2(downsample)))
        layers = [nn.Conv2d(in_channels, hidden // 2, 3, padding=1), nn.SiLU()]
        ch = hidden // 2
        for _ in range(stages):
            layers += [nn.Conv2d(ch, hidden, 3, stride=2, padding=1), nn.SiLU()]
            ch = hidden
        layers.append(nn.Conv2d(ch, out_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)
        if zero_init:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, x):
        return self.net(x)


_IN_CHANNELS = {"sketch": 1, "mask": NUM_LABELS - 1, "mv_skeleton": 2, "flow": 2}


class LocalConditionEncoder(nn.Module):
    """One encoder per local condition; outputs are summed into a single map."""

    def __init__(self, cond_channels: int = 4, downsample: int = 4, hidden: int = 32, with_flow: bool = False):
        super().__init__()
        self.cond_channels, self.downsample, self.hidden = cond_channels, downsample, hidden
        self.sketch_encoder = ConditionEncoder(1, cond_channels, downsample, hidden)
        self.mask_encoder = ConditionEncoder(NUM_LABELS - 1, cond_channels, downsample, hidden)
        self.mv_encoder = ConditionEncoder(2, cond_channels, downsample, hidden)
        self.flow_encoder = None
        if with_flow:
            self.add_flow_encoder()

    def add_flow_encoder(self) -> ConditionEncoder:
        self.flow_encoder = ConditionEncoder(2, self.cond_channels, self.downsample, self.hidden, zero_init=True)
        return self.flow_encoder

    def encoder_for(self, name: str) -> Optional[ConditionEncoder]:
        return {"sketch": self.sketch_encoder, "mask": self.mask_encoder,
                "mv_skeleton": self.mv_encoder, "flow": self.flow_encoder}[name]

    def _run(self, name: str, x: torch.Tensor, dtype) -> torch.Tensor:
        # x: (B, F', C, H, W) -> (B, F', C_cond, h, w)
        b, f = x.shape[:2]
        flat = x.reshape(b * f, *x.shape[2:])
        flat = _mask_onehot(flat, dtype) if name == "mask" else flat.to(dtype)
        y = self.encoder_for(name)(flat)
        return y.reshape(b, f, *y.shape[1:])

    def forward(self, bundle: ConditionBundle, num_frames: int, stage: str = "video",
                dtype: torch.dtype = torch.float32, latent_hw: Optional[tuple] = None) -> torch.Tensor:
        if stage not in ("image", "video"):
            raise ConditionError(f"stage must be 'image' or 'video', got {stage!r}")
        if stage == "image" and bundle.flow is not None and bool(bundle.is_present("flow").any()):
            raise ConditionError("optical flow is not a condition of the image stage")
        sizes = {tuple(getattr(bundle, n).shape[-2:]) for n in LOCAL_CONDITIONS if getattr(bundle, n) is not None}
        if len(sizes) > 1:
            raise ConditionError(f"local conditions disagree on resolution: {sorted(sizes)}")
        b = bundle.batch_size
        if sizes:
            (hh, ww), = sizes
        else:
            hh = ww = None
        out = None
        for name in LOCAL_CONDITIONS:
            x = getattr(bundle, name)
            flags = bundle.is_present(name)
            if x is None or not bool(flags.any()):
                continue
            if name == "flow" and self.flow_encoder is None:
                raise ConditionError("model has no flow encoder (image-stage model)")
            if name == "sketch":
                x = x.unsqueeze(1)
            y = self._run(name, x, dtype)
            if name == "sketch":
                y = y.expand(-1, num_frames, -1, -1, -1)
            elif name == "flow":
                y = torch.cat([y, torch.zeros_like(y[:, :1])], dim=1)
            if y.shape[1] != num_frames:
                raise ConditionError(f"{name} covers {y.shape[1]} frames, expected {num_frames}")
            y = y * flags.to(dtype).view(b, 1, 1, 1, 1)
            out = y if out is None else out + y
        if out is None:
            if latent_hw is None:
                if hh is None:
                    raise ConditionError("no local maps in bundle; pass latent_hw to size the zero map")
                latent_hw = (hh // self.downsample, ww // self.downsample)
            out = torch.zeros(b, num_frames, self.cond_channels, *latent_hw, dtype=dtype)
        return out


def encode_local(bundle: ConditionBundle, encoders: LocalConditionEncoder, stage: str = "video",
                 num_frames: Optional[int] = None) -> torch.Tensor:
    if num_frames is None:
        num_frames = bundle.num_frames or 1
    return encoders(bundle, num_frames, stage)


def concat_with_latent(z_t: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
    """Latent channels first, condition channels second."""
    if z_t.ndim != feats.ndim or z_t.shape[:2] != feats.shape[:2] or z_t.shape[-2:] != feats.shape[-2:]:
        raise ConditionError(f"latent {tuple(z_t.shape)} and condition features {tuple(feats.shape)} misaligned")
    return torch.cat([z_t, feats.to(z_t.dtype)], dim=2)


def drop_conditions(bundle: ConditionBundle,
                    drop_probs: Union[float, Mapping[str, float]] = DEFAULT_DROP_PROB,
                    drop_all_prob: float = DEFAULT_DROP_PROB, rng_seed: int = 0) -> ConditionBundle:
    """Randomly mark conditions absent, per sample, for joint condition training."""
    if isinstance(drop_probs, Mapping):
        probs = np.array([float(drop_probs.get(n, 0.0)) for n in CONDITIONS])
    else:
        probs = np.full(len(CONDITIONS), float(drop_probs))
    if np.any(probs < 0) or np.any(probs > 1) or not 0 <= drop_all_prob <= 1:
        raise ConditionError("drop probabilities must lie in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    b = bundle.batch_size
    drop = rng.random((b, len(CONDITIONS))) < probs
    drop_all = rng.random(b) < drop_all_prob
    keep = ~(drop | drop_all[:, None])
    return replace(bundle, present=bundle.present & torch.from_numpy(keep))


def write_flow(path: Union[str, Path], flow: np.ndarray) -> None:
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ValueError(f"flow must be (F-1, 2, H, W), got {flow.shape}")
    n, _, h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<III", h, w, n))
        fh.write(flow.tobytes(order="C"))


def read_flow(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: bad flow magic {data[:4]!r}")
    h, w, n = struct.unpack("<III", data[4:16])
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != n * 2 * h * w:
        raise ValueError(f"{path}: truncated flow payload")
    return body.reshape(n, 2, h, w).astype(np.float32)
