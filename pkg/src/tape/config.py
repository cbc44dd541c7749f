"""Experiment configuration: JSON file <-> :class:`TrainConfig`."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .degrade import TaskSet, default_tasks
from .errors import ConfigurationError
from .losses import ContrastiveConfig
from .model import ModelConfig

FINETUNE_MODES = ("stepwise", "joint")


@dataclass
class TrainConfig:
    seed: int = 0
    # model
    channels: int = 16
    patch_size: int = 4
    heads: int = 2
    n_blocks: int = 1
    plm_hidden: int = 32
    ffn_mult: int = 2
    max_size: int = 64
    # data
    height: int = 16
    width: int = 16
    clean_dir: str | None = None
    tasks: TaskSet = field(default_factory=default_tasks)
    eval_size: int = 32
    # optimisation
    batch_size: int = 4
    lr: float = 2e-4
    lr_decayed: float = 1e-4
    decay_step: int = 1000
    pretrain_iters: int = 3000
    finetune_iters: int = 1000
    finetune_lr: float = 2e-4
    finetune_mode: str = "stepwise"
    stop_pseudo_gradient: bool = False
    contrastive_weight: float = 0.1
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(
            channels=self.channels, patch_size=self.patch_size, heads=self.heads,
            n_blocks=self.n_blocks, plm_hidden=self.plm_hidden, ffn_mult=self.ffn_mult,
            max_size=self.max_size,
        )

    @property
    def size(self) -> tuple[int, int]:
        return (self.height, self.width)

    def validate(self) -> None:
        def need(ok: bool, name: str, why: str):
            if not ok:
                raise ConfigurationError(f"{name}: {why}")

        for name in ("channels", "patch_size", "heads", "plm_hidden", "ffn_mult", "max_size",
                     "batch_size", "pretrain_iters", "finetune_iters", "eval_size"):
            value = getattr(self, name)
            need(isinstance(value, int) and not isinstance(value, bool) and value >= 1,
                 name, f"must be an integer >= 1, got {value!r}")
        need(isinstance(self.n_blocks, int) and self.n_blocks >= 0, "n_blocks", "must be an integer >= 0")
        need(isinstance(self.decay_step, int) and self.decay_step >= 0, "decay_step", "must be an integer >= 0")
        for name in ("height", "width"):
            value = getattr(self, name)
            need(isinstance(value, int) and value >= 8, name, f"must be an integer >= 8, got {value!r}")
            need(value % self.patch_size == 0, "patch_size",
                 f"patch_size {self.patch_size} must divide {name} {value}")
        need(self.max_size % self.patch_size == 0, "patch_size",
             f"patch_size {self.patch_size} must divide max_size {self.max_size}")
        need(self.height <= self.max_size and self.width <= self.max_size, "max_size",
             "must be at least the training patch size")
        need((self.channels * self.patch_size ** 2) % self.heads == 0, "heads",
             "must divide the token dimension channels * patch_size**2")
        for name in ("lr", "lr_decayed", "finetune_lr"):
            value = getattr(self, name)
            need(isinstance(value, (int, float)) and value > 0, name, f"must be > 0, got {value!r}")
        need(self.contrastive_weight >= 0, "contrastive_weight", "must be >= 0")
        need(self.finetune_mode in FINETUNE_MODES, "finetune_mode", f"must be one of {FINETUNE_MODES}")
        need(isinstance(self.seed, int) and self.seed >= 0, "seed", "must be a non-negative integer")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, TaskSet):
                value = value.to_list()
            elif isinstance(value, ContrastiveConfig):
                value = dataclasses.asdict(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> TrainConfig:
        if not isinstance(raw, dict):
            raise ConfigurationError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"{unknown[0]}: unknown config field")
        kwargs = dict(raw)
        if "tasks" in kwargs:
            kwargs["tasks"] = TaskSet.from_list(kwargs["tasks"])
        if "contrastive" in kwargs:
            c = kwargs["contrastive"]
            try:
                kwargs["contrastive"] = ContrastiveConfig(**c)
            except TypeError as exc:
                raise ConfigurationError(f"contrastive: {exc}") from None
        return cls(**kwargs)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


def parse_config(path: str | os.PathLike) -> TrainConfig:
    """Load a JSON config, filling defaults and validating invariants."""
    with open(path) as fh:
        text = fh.read()
    return loads_config(text)


def loads_config(text: str) -> TrainConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return TrainConfig.from_dict(raw)
