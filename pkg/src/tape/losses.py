"""Training objectives: L1 reconstruction and the pixel-wise contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.tensor import Tensor
from .errors import ConfigurationError, DimensionError, UsageError

l1_loss = ops.l1_loss


@dataclass(frozen=True)
class ContrastiveConfig:
    T: int = 256
    m: int = 256
    tau: float = 0.07
    normalize: bool = True

    def __post_init__(self):
        if self.T < 1 or self.m < 1:
            raise ConfigurationError("contrastive T and m must be >= 1")
        if not self.tau > 0:
            raise ConfigurationError("contrastive tau must be > 0")


@dataclass(frozen=True)
class ContrastiveSample:
    """Sampled query rows and, per query, the rows used as negatives."""

    queries: np.ndarray    # (T_eff,)
    negatives: np.ndarray  # (T_eff, m_eff), never containing the query's own row


def sample_contrastive_indices(n: int, cfg: ContrastiveConfig, rng: np.random.Generator) -> ContrastiveSample:
    """Draw ``min(T, n)`` distinct queries and ``min(m, n-1)`` distinct negatives each."""
    if n < 2:
        raise UsageError(f"contrastive loss needs at least 2 tokens, got {n}")
    t_eff = min(cfg.T, n)
    m_eff = min(cfg.m, n - 1)
    queries = rng.choice(n, size=t_eff, replace=False)
    negatives = np.empty((t_eff, m_eff), dtype=np.intp)
    for row, i in enumerate(queries):
        others = rng.choice(n - 1, size=m_eff, replace=False)
        negatives[row] = others + (others >= i)
    return ContrastiveSample(queries, negatives)


def contrastive_loss(
    q_d: Tensor,
    q_gt: Tensor,
    cfg: ContrastiveConfig,
    rng: np.random.Generator | None = None,
    sample: ContrastiveSample | None = None,
) -> Tensor:
    """Sum over sampled positions ``i`` of the InfoNCE term.

    Each degraded-image query ``q_d[i]`` is scored against the clean-image
    query at the same position (positive) and at other positions (negatives)
    with temperature ``tau``. Either ``rng`` or a precomputed ``sample`` is
    required.
    """
    if q_d.shape != q_gt.shape or q_d.ndim != 2:
        raise DimensionError(f"query sets must share shape [N, D]: {q_d.shape} vs {q_gt.shape}")
    if sample is None:
        if rng is None:
            raise UsageError("contrastive_loss needs an rng or a precomputed sample")
        sample = sample_contrastive_indices(q_d.shape[0], cfg, rng)
    elif q_d.shape[0] < 2:
        raise UsageError("contrastive loss needs at least 2 tokens")
    if cfg.normalize:
        q_d, q_gt = ops.l2_normalize(q_d), ops.l2_normalize(q_gt)
    anchor = ops.take(q_d, sample.queries)                     # (T, D)
    candidates = ops.take(q_gt, np.concatenate(                 # (T, 1+m, D); column 0 is positive
        [sample.queries[:, None], sample.negatives], axis=1))
    t_eff, width = candidates.shape[0], candidates.shape[1]
    logits = ops.reshape(
        ops.matmul(candidates, ops.reshape(anchor, (t_eff, anchor.shape[1], 1))), (t_eff, width))
    logp = ops.log_softmax(ops.mul(logits, 1.0 / cfg.tau), axis=-1)
    positive = ops.take(ops.transpose(logp), np.array([0]))
    return ops.mul(ops.sum(positive), -1.0)


def combined_pretrain_loss(
    pred: Tensor,
    target,
    q_d: Tensor,
    q_gt: Tensor,
    lam: float,
    cfg: ContrastiveConfig,
    rng: np.random.Generator | None = None,
    sample: ContrastiveSample | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(total, l1, contrastive)`` with ``total = l1 + lam * contrastive``."""
    rec = l1_loss(pred, target)
    con = contrastive_loss(q_d, q_gt, cfg, rng=rng, sample=sample)
    return ops.add(rec, ops.mul(con, lam)), rec, con
