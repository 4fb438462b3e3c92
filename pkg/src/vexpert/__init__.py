"""A mixture-of-experts vision backbone distilled from several teachers, with
learned routing over its expert library for downstream control tasks."""

from .autodiff import Tape, Tensor, no_grad
from .backbone import (FTR, LTR, PER, TS, ModelConfig, Strategy, VERModel, forward_bvt, forward_vel,
                       load_checkpoint, save_checkpoint)
from .config import ExperimentConfig
from .errors import ConfigError, ContractError, FormatError, NumericError, ShapeError
from .losses import DistillConfig, distill_loss, mi_loss, pretrain_loss
from .moe import MoELayer, moe_forward
from .routing import CTASchedule, cta_k, gumbel_sample
from .schedule import LRSchedule, lr_at
from .task import SyntheticTask, evaluate, finetune_router
from .teachers import TeacherBank

__version__ = "0.1.0"

__all__ = [
    "CTASchedule", "ConfigError", "ContractError", "DistillConfig", "ExperimentConfig", "FTR",
    "FormatError", "LRSchedule", "LTR", "ModelConfig", "MoELayer", "NumericError", "PER",
    "ShapeError", "Strategy", "SyntheticTask", "TS", "Tape", "TeacherBank", "Tensor", "VERModel",
    "cta_k", "distill_loss", "evaluate", "finetune_router", "forward_bvt", "forward_vel",
    "gumbel_sample", "load_checkpoint", "lr_at", "mi_loss", "moe_forward", "no_grad",
    "pretrain_loss", "save_checkpoint",
]
