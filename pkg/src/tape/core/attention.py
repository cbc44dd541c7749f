"""Multi-head scaled dot-product attention."""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from ..errors import ConfigurationError, DimensionError
from . import ops
from .tensor import Tensor


def init_attention(store, prefix: str, dim: int, rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(dim)
    for proj in ("q", "k", "v", "o"):
        store.add(f"{prefix}.w{proj}", rng.uniform(-bound, bound, size=(dim, dim)))
        store.add(f"{prefix}.b{proj}", np.zeros(dim))


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    params: Mapping[str, Tensor],
    scale: float | None = None,
    trace: dict | None = None,
) -> Tensor:
    """Attend from ``q`` to ``k``/``v`` (all ``[N, D]``) with ``heads`` heads.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo``. The default logit
    scale is ``1/sqrt(D/heads)``. If ``trace`` is given it receives copies of
    the value input, the per-head logits and the attention weights.
    """
    if q.ndim != 2 or k.shape != q.shape or v.shape != q.shape:
        raise DimensionError(f"attention inputs must share shape [N, D]: {q.shape}, {k.shape}, {v.shape}")
    n, d = q.shape
    if heads < 1 or d % heads:
        raise ConfigurationError(f"model dim {d} is not divisible by heads={heads}")
    dh = d // heads
    if scale is None:
        scale = 1.0 / np.sqrt(dh)

    def split(x):
        return ops.transpose(ops.reshape(x, (n, heads, dh)), (1, 0, 2))

    qh = split(ops.linear(q, params["wq"], params["bq"]))
    kh = split(ops.linear(k, params["wk"], params["bk"]))
    vh = split(ops.linear(v, params["wv"], params["bv"]))
    logits = ops.mul(ops.matmul(qh, ops.transpose(kh, (0, 2, 1))), scale)
    weights = ops.softmax(logits, axis=-1)
    mixed = ops.matmul(weights, vh)
    merged = ops.reshape(ops.transpose(mixed, (1, 0, 2)), (n, d))
    if trace is not None:
        trace["value"] = v.data.copy()
        trace["logits"] = logits.data.copy()
        trace["weights"] = weights.data.copy()
    return ops.linear(merged, params["wo"], params["bo"])
