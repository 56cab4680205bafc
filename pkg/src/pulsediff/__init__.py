"""Multimodal conditional latent video diffusion for echocardiography phantoms."""

from .conditions import CONDITIONS, ConditionBundle, drop_conditions
from .diffusion import GuidanceSpec, NoiseSchedule, ddpm_sample, make_linear_schedule, q_sample, training_loss
from .inflation import inflate, inflate_model
from .model import ConditionedDenoiser, ModelConfig
from .training import TrainConfig, TrainedModel, finetune_cmr, lr_at, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "CONDITIONS", "ConditionBundle", "drop_conditions", "GuidanceSpec", "NoiseSchedule", "ddpm_sample",
    "make_linear_schedule", "q_sample", "training_loss", "inflate", "inflate_model", "ConditionedDenoiser",
    "ModelConfig", "TrainConfig", "TrainedModel", "finetune_cmr", "lr_at", "train_stage1", "train_stage2",
]
