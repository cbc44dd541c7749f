"""Two-stage training: task-agnostic pre-training, task-specific fine-tuning.

Pre-training feeds the clean image to the PLM, so the prior queries describe
a non-degraded image; the PLM is additionally shaped by the contrastive loss
between degraded-image and clean-image queries. At fine-tune and inference
time the clean image is unknown, so an auxiliary backbone ``phi`` (cloned
from the pre-trained ``theta``) produces a pseudo ground truth that feeds
the PLM instead.

Randomness: every consumer draws from its own named substream of the master
seed (see :func:`substream`), and live generator states travel inside the
:class:`~tape.checkpoint.Checkpoint`, so interrupted runs resume exactly.
"""

from __future__ import annotations

import csv
import io
import math
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint
from .config import TrainConfig
from .core import ops
from .core.adam import AdamState, adam_step
from .core.params import ParameterStore
from .core.tensor import Tensor, backward, no_grad
from .degrade import CleanSource, make_pair, pick_task
from .errors import ConfigurationError, TrainingDiverged
from .losses import combined_pretrain_loss, l1_loss
from .metrics import EvalReport
from .model import backbone_forward, init_backbone, init_plm, plm_forward

LOG_COLUMNS = ("iteration", "task", "l1", "contrastive", "total", "seconds")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the named consumer of master ``seed``.

    Streams: ``init`` (weights), ``data`` (pre-training pairs), ``contrastive``
    (negative sampling), ``finetune:<task>`` and ``eval:<task>``.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))]))


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **record) -> None:
        if self.records and record["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("log iterations must increase")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, key: str, stage: str | None = None) -> np.ndarray:
        return np.array([r[key] for r in self.records if stage is None or r["stage"] == stage])

    def deterministic_view(self) -> list[tuple]:
        """Records without wall-clock time, for reproducibility comparisons."""
        return [tuple(r[k] for k in LOG_COLUMNS if k != "seconds") for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for r in self.records:
            writer.writerow([r["iteration"], r["task"], repr(r["l1"]), repr(r["contrastive"]),
                             repr(r["total"]), f"{r['seconds']:.4f}"])
        return buf.getvalue()


def init_checkpoint(cfg: TrainConfig) -> Checkpoint:
    """Freshly initialised backbone and PLM (the 'scratch' model)."""
    rng = substream(cfg.seed, "init")
    theta = init_backbone(cfg.model, rng)
    plm = init_plm(cfg.model, rng)
    rngs = {"data": substream(cfg.seed, "data"), "contrastive": substream(cfg.seed, "contrastive")}
    return Checkpoint(cfg, {"theta": theta, "plm": plm}, {}, rngs, "init", 0)


def _source(cfg: TrainConfig) -> CleanSource:
    return CleanSource(cfg.size, cfg.clean_dir)


def _check_compatible(cfg: TrainConfig, ckpt: Checkpoint) -> None:
    if cfg.model != ckpt.config.model:
        raise ConfigurationError(f"checkpoint model {ckpt.config.model} does not match config {cfg.model}")


def _finite_or_abort(record: dict) -> None:
    if not all(math.isfinite(record[k]) for k in ("l1", "contrastive", "total")):
        raise TrainingDiverged(record)


# --- pre-training --------------------------------------------------------------------

def pretrain(
    cfg: TrainConfig,
    init: Checkpoint | None = None,
    until: int | None = None,
    on_step: Callable[[int, ParameterStore], None] | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Run pre-training iterations ``init.iteration .. until`` (default ``cfg.pretrain_iters``).

    Each iteration picks one pretrain-known task, draws ``batch_size`` pairs
    from it and takes one Adam step on backbone and PLM jointly.
    ``on_step(iteration, params)`` sees the accumulated gradients just
    before each optimizer step.
    """
    ckpt = init if init is not None else init_checkpoint(cfg)
    _check_compatible(cfg, ckpt)
    if ckpt.stage not in ("init", "pretrain"):
        raise ConfigurationError(f"cannot pre-train from a {ckpt.stage!r} checkpoint")
    until = cfg.pretrain_iters if until is None else until
    ckpt.stage = "pretrain"
    ckpt.config = cfg
    mcfg = cfg.model
    theta, plm = ckpt.theta, ckpt.plm
    params = ParameterStore.merge(theta=theta, plm=plm)
    opt = ckpt.optimizers.setdefault("pretrain", AdamState(lr=cfg.lr))
    data_rng, con_rng = ckpt.rngs["data"], ckpt.rngs["contrastive"]
    source = _source(cfg)
    log = TrainLog()
    start = time.perf_counter()
    for it in range(ckpt.iteration, until):
        task = pick_task(cfg.tasks, "pretrain", data_rng)
        l1_sum = con_sum = total_sum = 0.0
        for _ in range(cfg.batch_size):
            cor, clean = make_pair(task, data_rng, source)
            i_cor, i_gt = Tensor(cor), Tensor(clean)
            q_gt = plm_forward(i_gt, plm, mcfg)
            q_d = plm_forward(i_cor, plm, mcfg)
            out = backbone_forward(i_cor, q_gt, theta, mcfg)
            total, rec, con = combined_pretrain_loss(
                out, i_gt, q_d, q_gt, cfg.contrastive_weight, cfg.contrastive, rng=con_rng)
            l1_sum += rec.item()
            con_sum += con.item()
            total_sum += total.item()
            backward(ops.mul(total, 1.0 / cfg.batch_size), params.values())
        b = cfg.batch_size
        record = dict(iteration=it, task=task.name, l1=l1_sum / b, contrastive=con_sum / b,
                      total=total_sum / b, seconds=time.perf_counter() - start, stage="pretrain")
        _finite_or_abort(record)
        if on_step is not None:
            on_step(it, params)
        opt.lr = cfg.lr if it < cfg.decay_step else cfg.lr_decayed
        adam_step(params, opt)
        log.append(**record)
        ckpt.iteration = it + 1
    return ckpt, log


# --- fine-tuning -------------------------------------------------------------------------

def _begin_finetune(cfg: TrainConfig, init: Checkpoint, task: str) -> Checkpoint:
    _check_compatible(cfg, init)
    cfg.tasks.get(task)  # raises for unknown task
    ckpt = init.copy()
    ckpt.config = cfg
    ckpt.stores["phi"] = ckpt.theta.copy()
    ckpt.optimizers = {}
    ckpt.rngs = {"finetune": substream(cfg.seed, f"finetune:{task}")}
    ckpt.iteration = 0
    return ckpt


def _finetune_batch(cfg: TrainConfig, ckpt: Checkpoint, task: str, source: CleanSource):
    t = cfg.tasks.get(task)
    return [make_pair(t, ckpt.rngs["finetune"], source) for _ in range(cfg.batch_size)]


def _phi_pseudo_gt(ckpt: Checkpoint, image: Tensor) -> Tensor:
    mcfg = ckpt.config.model
    return backbone_forward(image, plm_forward(image, ckpt.plm, mcfg), ckpt.phi, mcfg)


def finetune_phase1(cfg: TrainConfig, init: Checkpoint, task: str, iterations: int | None = None) -> tuple[Checkpoint, TrainLog]:
    """Clone theta into phi and train phi alone on ``L1(pseudo_gt, gt)``."""
    ckpt = _begin_finetune(cfg, init, task)
    n = cfg.finetune_iters // 2 if iterations is None else iterations
    opt = ckpt.optimizers.setdefault("phi", AdamState(lr=cfg.finetune_lr))
    phi, plm, mcfg = ckpt.phi, ckpt.plm, cfg.model
    source = _source(cfg)
    log = TrainLog()
    start = time.perf_counter()
    for it in range(n):
        l1_sum = 0.0
        for cor, clean in _finetune_batch(cfg, ckpt, task, source):
            i_cor = Tensor(cor)
            with no_grad():
                q = plm_forward(i_cor, plm, mcfg)
            loss = l1_loss(backbone_forward(i_cor, q, phi, mcfg), clean)
            l1_sum += loss.item()
            backward(ops.mul(loss, 1.0 / cfg.batch_size), phi.values())
        l1 = l1_sum / cfg.batch_size
        record = dict(iteration=it, task=task, l1=l1, contrastive=0.0, total=l1,
                      seconds=time.perf_counter() - start, stage="phase1")
        _finite_or_abort(record)
        adam_step(phi, opt)
        log.append(**record)
        ckpt.iteration = it + 1
    ckpt.stage = "finetune_phase1"
    return ckpt, log


def finetune_phase2(
    cfg: TrainConfig,
    ckpt: Checkpoint,
    task: str,
    iterations: int | None = None,
    pseudo_fn: Callable[[Tensor], Tensor] | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Freeze phi; train PLM + theta on ``L1(theta(I, PLM(pseudo_gt)), gt)``.

    ``pseudo_fn`` replaces phi as the pseudo-GT generator (e.g. identity).
    """
    if ckpt.stage != "finetune_phase1":
        raise ConfigurationError("phase 2 needs a checkpoint produced by phase 1")
    cfg.tasks.get(task)
    n = cfg.finetune_iters - cfg.finetune_iters // 2 if iterations is None else iterations
    params = ParameterStore.merge(theta=ckpt.theta, plm=ckpt.plm)
    opt = ckpt.optimizers.setdefault("main", AdamState(lr=cfg.finetune_lr))
    theta, plm, mcfg = ckpt.theta, ckpt.plm, cfg.model
    pseudo_fn = pseudo_fn or (lambda image: _phi_pseudo_gt(ckpt, image))
    source = _source(cfg)
    log = TrainLog()
    first = ckpt.iteration
    start = time.perf_counter()
    for it in range(first, first + n):
        l1_sum = 0.0
        for cor, clean in _finetune_batch(cfg, ckpt, task, source):
            i_cor = Tensor(cor)
            with no_grad():
                pseudo = Tensor(pseudo_fn(i_cor).data)
            out = backbone_forward(i_cor, plm_forward(pseudo, plm, mcfg), theta, mcfg)
            loss = l1_loss(out, clean)
            l1_sum += loss.item()
            backward(ops.mul(loss, 1.0 / cfg.batch_size), params.values())
        l1 = l1_sum / cfg.batch_size
        record = dict(iteration=it, task=task, l1=l1, contrastive=0.0, total=l1,
                      seconds=time.perf_counter() - start, stage="phase2")
        _finite_or_abort(record)
        adam_step(params, opt)
        log.append(**record)
        ckpt.iteration = it + 1
    ckpt.stage = "finetune_stepwise"
    return ckpt, log


def finetune_stepwise(cfg: TrainConfig, init: Checkpoint, task: str) -> tuple[Checkpoint, TrainLog]:
    """Phase 1 (train phi) for half the budget, then phase 2 (train PLM + theta)."""
    ckpt, log1 = finetune_phase1(cfg, init, task)
    ckpt, log2 = finetune_phase2(cfg, ckpt, task)
    return ckpt, TrainLog(log1.records + log2.records)


def finetune_joint(cfg: TrainConfig, init: Checkpoint, task: str) -> tuple[Checkpoint, TrainLog]:
    """Train phi, PLM and theta together on ``L1(O, gt) + L1(pseudo_gt, gt)``.

    The logged ``l1`` is the output term; ``total`` includes the pseudo-GT term.
    """
    ckpt = _begin_finetune(cfg, init, task)
    params = ParameterStore.merge(theta=ckpt.theta, plm=ckpt.plm, phi=ckpt.phi)
    opt = ckpt.optimizers.setdefault("joint", AdamState(lr=cfg.finetune_lr))
    theta, plm, mcfg = ckpt.theta, ckpt.plm, cfg.model
    source = _source(cfg)
    log = TrainLog()
    start = time.perf_counter()
    for it in range(cfg.finetune_iters):
        l1_sum = total_sum = 0.0
        for cor, clean in _finetune_batch(cfg, ckpt, task, source):
            i_cor = Tensor(cor)
            pseudo = _phi_pseudo_gt(ckpt, i_cor)
            prior_input = Tensor(pseudo.data) if cfg.stop_pseudo_gradient else pseudo
            out = backbone_forward(i_cor, plm_forward(prior_input, plm, mcfg), theta, mcfg)
            rec = l1_loss(out, clean)
            total = ops.add(rec, l1_loss(pseudo, clean))
            l1_sum += rec.item()
            total_sum += total.item()
            backward(ops.mul(total, 1.0 / cfg.batch_size), params.values())
        b = cfg.batch_size
        record = dict(iteration=it, task=task, l1=l1_sum / b, contrastive=0.0, total=total_sum / b,
                      seconds=time.perf_counter() - start, stage="joint")
        _finite_or_abort(record)
        adam_step(params, opt)
        log.append(**record)
        ckpt.iteration = it + 1
    ckpt.stage = "finetune_joint"
    return ckpt, log


def finetune(cfg: TrainConfig, init: Checkpoint, task: str, mode: str | None = None) -> tuple[Checkpoint, TrainLog]:
    mode = mode or cfg.finetune_mode
    if mode == "stepwise":
        return finetune_stepwise(cfg, init, task)
    if mode == "joint":
        return finetune_joint(cfg, init, task)
    raise ConfigurationError(f"finetune_mode must be 'stepwise' or 'joint', got {mode!r}")


# --- inference and evaluation --------------------------------------------------------------

def restore_image(ckpt: Checkpoint, image) -> np.ndarray:
    """Restore a degraded ``[3, H, W]`` image; result clipped to ``[0, 1]``.

    With a fine-tuned phi the PLM sees phi's pseudo ground truth; a
    pre-train-only checkpoint feeds the degraded image to the PLM directly.
    """
    mcfg = ckpt.config.model
    x = Tensor(np.asarray(getattr(image, "data", image), dtype=np.float64))
    with no_grad():
        prior_input = _phi_pseudo_gt(ckpt, x) if ckpt.phi is not None else x
        out = backbone_forward(x, plm_forward(prior_input, ckpt.plm, mcfg), ckpt.theta, mcfg)
    return np.clip(out.data, 0.0, 1.0)


def make_eval_set(cfg: TrainConfig, task: str, count: int | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Fixed ``(corrupted, clean)`` pairs for ``task``, independent of training draws."""
    t = cfg.tasks.get(task)
    rng = substream(cfg.seed, f"eval:{task}")
    source = _source(cfg)
    return [make_pair(t, rng, source) for _ in range(count or cfg.eval_size)]


def evaluate_set(ckpt: Checkpoint, pairs, task: str = "") -> EvalReport:
    if not pairs:
        raise ValueError("evaluation set is empty")
    report = EvalReport(task)
    for corrupted, clean in pairs:
        report.add(restore_image(ckpt, corrupted), clean)
    return report


def input_report(pairs, task: str = "") -> EvalReport:
    """Metrics of the unrestored inputs, the do-nothing baseline."""
    report = EvalReport(task)
    for corrupted, clean in pairs:
        report.add(corrupted, clean)
    return report


# --- pre-training ablation -------------------------------------------------------------------

@dataclass
class ComparisonReport:
    task: str
    input_psnr: float
    scratch_psnr: float
    pretrained_psnr: float
    scratch_ssim: float
    pretrained_ssim: float

    @property
    def delta_psnr(self) -> float:
        return self.pretrained_psnr - self.scratch_psnr

    def rows(self) -> list[tuple[str, str]]:
        return [
            ("task", self.task),
            ("input_psnr", repr(self.input_psnr)),
            ("scratch_psnr", repr(self.scratch_psnr)),
            ("pretrained_psnr", repr(self.pretrained_psnr)),
            ("delta_psnr", repr(self.delta_psnr)),
            ("scratch_ssim", repr(self.scratch_ssim)),
            ("pretrained_ssim", repr(self.pretrained_ssim)),
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows([("metric", "value"), *self.rows()])
        return buf.getvalue()

    def table(self) -> str:
        return "\n".join([
            f"task {self.task}",
            f"{'':>12}  {'PSNR (dB)':>10}  {'SSIM':>7}",
            f"{'input':>12}  {self.input_psnr:>10.3f}",
            f"{'scratch':>12}  {self.scratch_psnr:>10.3f}  {self.scratch_ssim:>7.4f}",
            f"{'pretrained':>12}  {self.pretrained_psnr:>10.3f}  {self.pretrained_ssim:>7.4f}",
            f"{'delta':>12}  {self.delta_psnr:>+10.3f}",
        ])


def compare_pretrain_effect(cfg: TrainConfig, task: str, pretrained: Checkpoint | None = None) -> ComparisonReport:
    """Fine-tune a scratch model and a pre-trained model identically; compare on a held-out set.

    Both runs start from the same initial weights (the scratch model *is*
    the pre-training starting point) and see the same fine-tuning data.
    """
    cfg.tasks.get(task)
    if pretrained is None:
        pretrained, _ = pretrain(cfg)
    scratch_ft, _ = finetune(cfg, init_checkpoint(cfg), task)
    pre_ft, _ = finetune(cfg, pretrained, task)
    pairs = make_eval_set(cfg, task)
    base = input_report(pairs, task)
    a = evaluate_set(scratch_ft, pairs, task)
    b = evaluate_set(pre_ft, pairs, task)
    return ComparisonReport(task, base.mean_psnr, a.mean_psnr, b.mean_psnr, a.mean_ssim, b.mean_ssim)


__all__ = [
    "ComparisonReport",
    "TrainLog",
    "compare_pretrain_effect",
    "evaluate_set",
    "finetune",
    "finetune_joint",
    "finetune_phase1",
    "finetune_phase2",
    "finetune_stepwise",
    "init_checkpoint",
    "input_report",
    "make_eval_set",
    "pretrain",
    "restore_image",
    "substream",
]
