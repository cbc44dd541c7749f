"""Transformer restoration with prior queries, built on a small numpy autodiff engine.

Submodules: ``core`` (tensors, ops, Adam), ``model`` (backbone and prior
learning module), ``losses``, ``degrade`` (synthetic data), ``pipeline``
(pre-training, fine-tuning, evaluation), ``metrics``, ``checkpoint`` and
``cli``.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig, loads_config, parse_config
from .degrade import DegradationSpec, Task, TaskSet, apply_degradation, default_tasks, gen_clean_patch
from .errors import ConfigurationError, DimensionError, FormatError, TapeError, TrainingDiverged, UsageError
from .losses import ContrastiveConfig, combined_pretrain_loss, contrastive_loss, l1_loss
from .metrics import EvalReport, psnr, ssim
from .model import ModelConfig, backbone_forward, init_backbone, init_plm, plm_forward
from .pipeline import compare_pretrain_effect, evaluate_set, finetune, pretrain, restore_image

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ConfigurationError",
    "ContrastiveConfig",
    "DegradationSpec",
    "DimensionError",
    "EvalReport",
    "FormatError",
    "ModelConfig",
    "TapeError",
    "Task",
    "TaskSet",
    "TrainConfig",
    "TrainingDiverged",
    "UsageError",
    "apply_degradation",
    "backbone_forward",
    "combined_pretrain_loss",
    "compare_pretrain_effect",
    "contrastive_loss",
    "default_tasks",
    "evaluate_set",
    "finetune",
    "gen_clean_patch",
    "init_backbone",
    "init_plm",
    "l1_loss",
    "load_checkpoint",
    "loads_config",
    "parse_config",
    "plm_forward",
    "pretrain",
    "psnr",
    "restore_image",
    "save_checkpoint",
    "ssim",
]
