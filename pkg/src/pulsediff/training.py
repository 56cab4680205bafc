"""Two-stage training (image LDM, then inflated video LDM) and CMR finetuning."""

from __future__ import annotations

import fnmatch
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .autoencoder import VAE, VAEConfig, VAETrainConfig, latent_scale, train_vae
from .checkpoint import load_checkpoint, save_checkpoint, split_group
from .conditions import CONDITIONS, ConditionBundle, drop_conditions
from .data.phantom import SampleRecord
from .diffusion import NoiseSchedule, make_linear_schedule, training_loss
from .global_conditions import IMAGE_EMBEDDER_ID, TEXT_EMBEDDER_ID
from .inflation import InflationReport, MissingParameterError, inflate_model
from .model import ConditionedDenoiser, ModelConfig

log = logging.getLogger(__name__)

STAGES = ("1", "2", "cmr")
EMBEDDER_IDS = {"text": TEXT_EMBEDDER_ID, "image": IMAGE_EMBEDDER_ID}
STAGE2_TRAINABLE = ("unet.*.temporal.*", "cond.flow_encoder.*", "unet.*.xattn.q_text.*", "unet.*.xattn.q_img.*")
CMR_TRAINABLE = ("unet.*", "cond.mask_encoder.*")


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class IncompatibleCheckpointError(ValueError):
    pass


class ConditionLeakError(AssertionError):
    pass


@dataclass
class TrainConfig:
    stage: str = "1"
    batch_size: Optional[int] = None
    lr_peak: float = 1e-4
    warmup_steps: int = 500
    epochs: int = 200
    steps: Optional[int] = None
    frames: Optional[int] = None
    image_size: int = 32
    drop_probs: dict = field(default_factory=lambda: {n: 0.1 for n in CONDITIONS})
    drop_all_prob: float = 0.1
    seed: int = 0
    data: Optional[str] = None
    init_ckpt: Optional[str] = None
    out: Optional[str] = None
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    model: dict = field(default_factory=dict)
    vae_steps: int = 1500
    vae_lr: float = 1e-3
    vae_batch_size: int = 16

    def __post_init__(self):
        self.stage = str(self.stage)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved(self) -> "TrainConfig":
        video = self.stage != "1"
        return replace(self, batch_size=self.batch_size or (4 if video else 16),
                       frames=self.frames or (8 if video else 1))

    def problems(self) -> list:
        out = []
        if self.stage not in STAGES:
            out.append(f"stage must be one of {STAGES}, got {self.stage!r}")
        cfg = self.resolved() if self.stage in STAGES else self
        if cfg.stage == "1" and cfg.frames != 1:
            out.append(f"stage 1 trains on single frames (frames=1), got frames={cfg.frames}")
        if cfg.frames is not None and cfg.frames < 1:
            out.append("frames must be >= 1")
        if cfg.batch_size is not None and cfg.batch_size < 1:
            out.append("batch_size must be >= 1")
        if not self.lr_peak > 0:
            out.append("lr_peak must be > 0")
        if self.warmup_steps < 1:
            out.append("warmup_steps must be >= 1")
        if self.steps is not None and self.steps < 1:
            out.append("steps must be >= 1")
        if self.epochs < 1:
            out.append("epochs must be >= 1")
        if self.T < 2 or not (0 < self.beta_start <= self.beta_end < 1):
            out.append("schedule needs T >= 2 and 0 < beta_start <= beta_end < 1")
        bad = [k for k in self.drop_probs if k not in CONDITIONS]
        if bad:
            out.append(f"drop_probs has unknown condition(s) {bad}")
        if any(not 0 <= float(p) <= 1 for p in self.drop_probs.values()) or not 0 <= self.drop_all_prob <= 1:
            out.append("drop probabilities must lie in [0, 1]")
        if self.image_size % 4:
            out.append("image_size must be divisible by the VAE downsample factor 4")
        try:
            ModelConfig.from_dict(self.model)
        except (TypeError, ValueError) as exc:
            out.append(f"model: {exc}")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self.resolved()

    def identity(self) -> dict:
        """Fields that determine the trained weights (the output location does not)."""
        d = self.to_dict()
        d.pop("out")
        return d

    def hash(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


def total_steps(config: TrainConfig, num_items: int) -> int:
    if config.steps is not None:
        return int(config.steps)
    per_epoch = max(1, math.ceil(num_items / max(1, config.batch_size or 1)))
    return config.epochs * per_epoch


def lr_at(step: int, config: TrainConfig, total: Optional[int] = None) -> float:
    """Linear warmup to lr_peak, then cosine decay to 0 at the final step."""
    total = total if total is not None else (config.steps or config.warmup_steps)
    warm = config.warmup_steps
    if step < warm:
        return config.lr_peak * step / warm
    span = max(total - warm, 1)
    frac = min((step - warm) / span, 1.0)
    return config.lr_peak * 0.5 * (1.0 + math.cos(math.pi * frac))


def param_group(name: str) -> str:
    if ".temporal." in name:
        return "unet.temporal"
    for sub in ("q_text", "q_img", "kv_text", "kv_img"):
        if f".xattn.{sub}." in name:
            return f"unet.xattn.{sub}"
    if name.startswith("unet."):
        return "unet.spatial"
    if name.startswith("cond.flow_encoder."):
        return "cond.flow_encoder"
    return name.split(".")[0]


@dataclass
class FreezeMask:
    trainable: tuple

    def resolve(self, names: Sequence[str]) -> set:
        names = list(names)
        dead = [p for p in self.trainable if not any(fnmatch.fnmatchcase(n, p) for n in names)]
        if dead:
            raise ValueError(f"trainable pattern(s) match no parameter: {dead}")
        return {n for n in names if any(fnmatch.fnmatchcase(n, p) for p in self.trainable)}

    def apply(self, model: torch.nn.Module) -> list:
        names = [n for n, _ in model.named_parameters()]
        keep = self.resolve(names)
        params = []
        for n, p in model.named_parameters():
            p.requires_grad_(n in keep)
            if n in keep:
                params.append(p)
        return params


# ----------------------------------------------------------------------------- data


@dataclass
class ClipTensors:
    latents: torch.Tensor            # (N, F, C, h, w), already scaled
    sketch: torch.Tensor             # (N, 1, H, W)
    mask: torch.Tensor               # (N, F, 1, H, W) long
    mv: torch.Tensor                 # (N, F, 2, H, W)
    flow: torch.Tensor               # (N, F-1, 2, H, W)
    prior: torch.Tensor              # (N, 1, H, W)
    prompts: list
    present: torch.Tensor            # (N, 6)

    @property
    def num_frames(self) -> int:
        return self.latents.shape[1]

    def __len__(self) -> int:
        return self.latents.shape[0]


def _stack(records, name, shape, dtype):
    arrs = [getattr(r, name) if getattr(r, name) is not None else np.zeros(shape, dtype) for r in records]
    return torch.from_numpy(np.stack(arrs).astype(dtype))


def records_to_arrays(records: Sequence[SampleRecord]):
    """Stack records into dense tensors plus a (N, 6) availability table."""
    if not records:
        raise ValueError("dataset is empty")
    shapes = {r.frames.shape for r in records}
    if len(shapes) != 1:
        raise ValueError(f"all cases must share (F, 1, H, W); found {sorted(shapes)}")
    f, _, h, w = records[0].frames.shape
    frames = torch.from_numpy(np.stack([r.frames for r in records]).astype(np.float32))
    arrays = dict(
        sketch=_stack(records, "sketch", (1, h, w), np.float32),
        mask=_stack(records, "mask", (f, 1, h, w), np.int64),
        mv=_stack(records, "mv_skeleton", (f, 2, h, w), np.float32),
        flow=_stack(records, "flow", (max(f - 1, 0), 2, h, w), np.float32),
        prior=_stack(records, "prior_frame", (1, h, w), np.float32),
        prompts=[r.prompt for r in records],
        present=torch.tensor([[r.present[n] for n in CONDITIONS] for r in records]),
    )
    return frames, arrays


@torch.no_grad()
def encode_frames(vae: VAE, frames: torch.Tensor, scale: float, batch: int = 16) -> torch.Tensor:
    out = [vae.encode(frames[i:i + batch]) for i in range(0, frames.shape[0], batch)]
    return torch.cat(out) * scale


def bundle_from_arrays(data, idx: torch.Tensor, start: torch.Tensor, nf: int, video: bool) -> ConditionBundle:
    """Condition bundle for clips [start, start + nf) of the selected cases."""
    t_idx = start[:, None] + torch.arange(nf)[None]
    rows = idx[:, None]
    kw = dict(sketch=data.sketch[idx], mask=data.mask[rows, t_idx], mv_skeleton=data.mv[rows, t_idx],
              text=[data.prompts[int(i)] for i in idx], image_prior=data.prior[idx])
    present = data.present[idx].clone()
    if video and nf > 1:
        kw["flow"] = data.flow[rows, t_idx[:, :-1]]
    else:
        present[:, CONDITIONS.index("flow")] = False
    return ConditionBundle(present=present, **kw)


def _batch_sampler(data: ClipTensors, batch: int, nf: int, video: bool):
    total_f = data.num_frames
    if nf > total_f:
        raise ValueError(f"clips need {nf} frames but cases have {total_f}")

    def sample(gen: torch.Generator):
        idx = torch.randint(0, len(data), (batch,), generator=gen)
        start = torch.randint(0, total_f - nf + 1, (batch,), generator=gen)
        t_idx = start[:, None] + torch.arange(nf)[None]
        z0 = data.latents[idx[:, None], t_idx]
        return z0, bundle_from_arrays(data, idx, start, nf, video)

    return sample


# ----------------------------------------------------------------------------- results


@dataclass
class TrainedModel:
    model: ConditionedDenoiser
    vae: VAE
    schedule: NoiseSchedule
    latent_scale: float
    meta: dict
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    report: Optional[InflationReport] = None

    def save(self, path) -> None:
        tensors = dict(self.model.state_dict())
        tensors.update({f"vae.{k}": v for k, v in self.vae.state_dict().items()})
        save_checkpoint(path, tensors, self.meta)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        tensors, meta = load_checkpoint(path)
        ids = meta.get("embedder_ids")
        if ids != EMBEDDER_IDS:
            raise IncompatibleCheckpointError(f"{path}: embedder ids {ids} incompatible with {EMBEDDER_IDS}")
        model = ConditionedDenoiser(ModelConfig.from_dict(meta["model_config"]))
        vae = VAE(VAEConfig(**meta["vae_config"]))
        vae_state = split_group(tensors, "vae")
        model_state = {k: v for k, v in tensors.items() if not k.startswith("vae.")}
        for module, state in ((model, model_state), (vae, vae_state)):
            expected = module.state_dict()
            missing = sorted(set(expected) - set(state))
            if missing:
                raise IncompatibleCheckpointError(f"{path}: missing parameters {missing}")
            module.load_state_dict({k: state[k].reshape(expected[k].shape) for k in expected})
        model.eval()
        vae.eval()
        for p in vae.parameters():
            p.requires_grad_(False)
        return cls(model, vae, NoiseSchedule.from_dict(meta["schedule"]), float(meta["latent_scale"]), meta)


def smoothed_losses(losses: Sequence[float], window: int = 20) -> tuple:
    """Mean of the first and of the last ``window`` losses."""
    arr = np.asarray(losses, dtype=np.float64)
    window = max(1, min(window, arr.size // 2 or 1))
    return float(arr[:window].mean()), float(arr[-window:].mean())


def _meta(config: TrainConfig, model: ConditionedDenoiser, vae: VAE, schedule: NoiseSchedule,
          scale: float, steps: int, extra: Optional[dict] = None) -> dict:
    meta = {
        "stage": config.stage, "step": steps, "epochs": config.epochs, "config_hash": config.hash(),
        "config": config.identity(), "schedule": schedule.to_dict(), "embedder_ids": dict(EMBEDDER_IDS),
        "model_config": model.config.to_dict(), "vae_config": vae.config.to_dict(),
        "latent_scale": scale, "frames": model.config.num_frames, "image_size": model.config.image_size,
        "selection": "last",
    }
    meta.update(extra or {})
    return meta


def _optimize(model: ConditionedDenoiser, params: list, sample_batch: Callable, config: TrainConfig,
              schedule: NoiseSchedule, steps: int, bundle_hook: Optional[Callable] = None,
              on_step: Optional[Callable] = None):
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(params, lr=0.0, betas=(0.9, 0.999), weight_decay=0.0)
    losses, lrs = [], []
    model.train()
    for step in range(steps):
        lr = lr_at(step, config, steps)
        for g in opt.param_groups:
            g["lr"] = lr
        z0, bundle = sample_batch(gen)
        bundle = drop_conditions(bundle, config.drop_probs, config.drop_all_prob,
                                 rng_seed=config.seed * 1_000_003 + step)
        if bundle_hook is not None:
            bundle = bundle_hook(bundle)
        t = torch.randint(0, schedule.T, (z0.shape[0],), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        loss = training_loss(model, z0, bundle, t, eps, schedule)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        lrs.append(lr)
        if on_step is not None:
            on_step(step, losses[-1], lr)
    model.eval()
    return losses, lrs


def _records(dataset) -> list:
    if hasattr(dataset, "load_all"):
        return dataset.load_all()
    return list(dataset)


def _check_size(config: TrainConfig, frames: torch.Tensor):
    h, w = frames.shape[-2:]
    if h != config.image_size or w != config.image_size:
        raise ValueError(f"dataset frames are {h}x{w}, config.image_size is {config.image_size}")


def train_stage1(config: TrainConfig, dataset, vae: Optional[VAE] = None,
                 on_step: Optional[Callable] = None) -> TrainedModel:
    config = config.validate()
    if config.stage != "1":
        raise ConfigError([f"train_stage1 needs stage '1', got {config.stage!r}"])
    records = _records(dataset)
    if not records:
        raise ValueError("stage 1 needs a non-empty dataset")
    frames, arrays = records_to_arrays(records)
    _check_size(config, frames)
    torch.manual_seed(config.seed)
    vae_log = []
    if vae is None:
        vae, vae_log = train_vae(frames.reshape(-1, *frames.shape[2:]),
                                 VAETrainConfig(config.vae_steps, config.vae_batch_size, config.vae_lr),
                                 seed=config.seed)
    scale = latent_scale(vae, frames.reshape(-1, *frames.shape[2:]))
    data = ClipTensors(latents=encode_frames(vae, frames, scale), **arrays)

    mcfg = replace(ModelConfig.from_dict(config.model), image_size=config.image_size, video=False, num_frames=1)
    torch.manual_seed(config.seed)
    model = ConditionedDenoiser(mcfg)
    schedule = config.schedule()
    steps = total_steps(config, len(data) * data.num_frames)
    params = [p for p in model.parameters() if p.requires_grad]
    losses, lrs = _optimize(model, params, _batch_sampler(data, config.batch_size, 1, False),
                            config, schedule, steps, on_step=on_step)
    meta = _meta(config, model, vae, schedule, scale, steps,
                 {"vae_final_loss": vae_log[-1]["loss"] if vae_log else None})
    return TrainedModel(model, vae, schedule, scale, meta, losses, lrs)


def _init_video_model(init: TrainedModel, num_frames: int, seed: int):
    if init.model.config.video:
        if init.model.config.num_frames != num_frames:
            raise IncompatibleCheckpointError(
                f"checkpoint was trained with {init.model.config.num_frames} frames, config asks {num_frames}")
        model = ConditionedDenoiser(init.model.config)
        model.load_state_dict(init.model.state_dict())
        return model, None
    try:
        return inflate_model(init.model, num_frames, seed)
    except MissingParameterError as exc:
        raise IncompatibleCheckpointError(str(exc)) from exc


def train_stage2(config: TrainConfig, dataset, stage1: TrainedModel,
                 on_step: Optional[Callable] = None) -> TrainedModel:
    config = config.validate()
    if config.stage != "2":
        raise ConfigError([f"train_stage2 needs stage '2', got {config.stage!r}"])
    if stage1.model.config.video:
        raise IncompatibleCheckpointError("stage 2 starts from a stage-1 (image) checkpoint")
    if stage1.model.config.image_size != config.image_size:
        raise IncompatibleCheckpointError(
            f"stage-1 image size {stage1.model.config.image_size} != config {config.image_size}")
    records = _records(dataset)
    frames, arrays = records_to_arrays(records)
    _check_size(config, frames)
    data = ClipTensors(latents=encode_frames(stage1.vae, frames, stage1.latent_scale), **arrays)
    model, report = _init_video_model(stage1, config.frames, config.seed)
    params = FreezeMask(STAGE2_TRAINABLE).apply(model)
    schedule = stage1.schedule
    steps = total_steps(config, len(data))
    losses, lrs = _optimize(model, params, _batch_sampler(data, config.batch_size, config.frames, True),
                            config, schedule, steps, on_step=on_step)
    meta = _meta(config, model, stage1.vae, schedule, stage1.latent_scale, steps,
                 {"init_config_hash": stage1.meta.get("config_hash"),
                  "trainable": sorted(n for n, p in model.named_parameters() if p.requires_grad)})
    return TrainedModel(model, stage1.vae, schedule, stage1.latent_scale, meta, losses, lrs, report)


def force_mask_only(bundle: ConditionBundle) -> ConditionBundle:
    return bundle.only(["mask"])


def assert_mask_only(bundle: ConditionBundle) -> ConditionBundle:
    leaked = [n for n in bundle.present_names() if n != "mask"]
    if leaked:
        raise ConditionLeakError(f"CMR synthesis is mask-conditioned only; found {leaked}")
    return bundle


def finetune_cmr(config: TrainConfig, cmr_dataset, us_ckpt: TrainedModel,
                 on_step: Optional[Callable] = None) -> TrainedModel:
    """Few-shot transfer to mask-guided volumes; the slice axis is the frame axis."""
    config = config.validate()
    if config.stage != "cmr":
        raise ConfigError([f"finetune_cmr needs stage 'cmr', got {config.stage!r}"])
    records = [replace(r, sketch=None, mv_skeleton=None, flow=None, prompt=None, prior_frame=None)
               for r in _records(cmr_dataset)]
    if not records or any(r.mask is None for r in records):
        raise ValueError("CMR finetuning needs mask volumes for every case")
    frames, arrays = records_to_arrays(records)
    _check_size(config, frames)
    vae = us_ckpt.vae
    scale = latent_scale(vae, frames.reshape(-1, *frames.shape[2:]))
    data = ClipTensors(latents=encode_frames(vae, frames, scale), **arrays)
    model, report = _init_video_model(us_ckpt, config.frames, config.seed)
    params = FreezeMask(CMR_TRAINABLE).apply(model)
    steps = total_steps(config, len(data))

    def hook(bundle):
        return assert_mask_only(force_mask_only(bundle))

    losses, lrs = _optimize(model, params, _batch_sampler(data, config.batch_size, config.frames, True),
                            config, us_ckpt.schedule, steps, bundle_hook=hook, on_step=on_step)
    meta = _meta(config, model, vae, us_ckpt.schedule, scale, steps,
                 {"init_config_hash": us_ckpt.meta.get("config_hash"), "conditions": ["mask"]})
    return TrainedModel(model, vae, us_ckpt.schedule, scale, meta, losses, lrs, report)
