"""Finite-difference verification of every differentiable operation.

Each case draws a random small instance, reduces the op output to a scalar
with a fixed random weighting (so no gradient entry is trivially uniform)
and compares analytic against central-difference gradients for every input.
Large parameter tensors are checked on a random subset of entries.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import ops
from .core.attention import init_attention, multi_head_attention
from .core.gradcheck import gradcheck
from .core.params import ParameterStore
from .core.tensor import Tensor
from .losses import ContrastiveConfig, contrastive_loss, sample_contrastive_indices
from .model import ModelConfig, backbone_forward, decoder_block, encoder_block, init_backbone, init_plm, plm_forward

TOLERANCE = 1e-4

Case = tuple[Callable[[], Tensor], list[Tensor], "int | None"]


def _weighted(out: Tensor, r: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, r))


def _randomize(store: ParameterStore, rng, scale: float = 0.5) -> None:
    # perturb every parameter so no gradient is zero merely because of the init
    for t in store.values():
        t.data = t.data + scale * rng.normal(size=t.shape)


def _conv2d(rng) -> Case:
    c_in, c_out = rng.integers(1, 4, size=2)
    h, w = rng.integers(3, 7, size=2)
    k = int(rng.choice([1, 3]))
    x = Tensor(rng.normal(size=(c_in, h, w)))
    kern = Tensor(rng.normal(size=(c_out, c_in, k, k)))
    b = Tensor(rng.normal(size=c_out))
    r = rng.normal(size=(c_out, h, w))
    return (lambda: _weighted(ops.conv2d(x, kern, b, padding=(k - 1) // 2), r)), [x, kern, b], None


def _linear(rng) -> Case:
    n, d_in, d_out = rng.integers(1, 6, size=3)
    x = Tensor(rng.normal(size=(n, d_in)))
    w = Tensor(rng.normal(size=(d_out, d_in)))
    b = Tensor(rng.normal(size=d_out))
    r = rng.normal(size=(n, d_out))
    return (lambda: _weighted(ops.linear(x, w, b), r)), [x, w, b], None


def _layernorm(rng) -> Case:
    n, d = rng.integers(1, 5), rng.integers(2, 8)
    x = Tensor(rng.normal(size=(n, d)))
    gain = Tensor(rng.normal(size=d))
    shift = Tensor(rng.normal(size=d))
    r = rng.normal(size=(n, d))
    return (lambda: _weighted(ops.layernorm(x, gain, shift), r)), [x, gain, shift], None


def _softmax(rng) -> Case:
    x = Tensor(rng.normal(size=(rng.integers(1, 5), rng.integers(2, 8))))
    r = rng.normal(size=x.shape)
    return (lambda: _weighted(ops.softmax(x), r)), [x], None


def _attention(rng) -> Case:
    n, d, heads = 3, 4, 2
    store = ParameterStore()
    init_attention(store, "attn", d, rng)
    _randomize(store, rng)
    q, k, v = (Tensor(rng.normal(size=(n, d))) for _ in range(3))
    r = rng.normal(size=(n, d))
    view = store.scope("attn")
    return (lambda: _weighted(multi_head_attention(q, k, v, heads, view), r)), [q, k, v, *store.values()], None


def _block_store(rng, cfg: ModelConfig) -> ParameterStore:
    store = init_backbone(cfg, rng)
    _randomize(store, rng, 0.2)
    return store


_BLOCK_CFG = ModelConfig(channels=1, patch_size=4, heads=2, max_size=8)  # D = 16


def _encoder_block(rng) -> Case:
    store = _block_store(rng, _BLOCK_CFG)
    view = store.scope("encoder.0")
    x = Tensor(rng.normal(size=(4, 16)))
    r = rng.normal(size=(4, 16))
    params = [store[f"encoder.0.{n}"] for n in view]
    return (lambda: _weighted(encoder_block(x, view, 2), r)), [x, *params], 12


def _decoder_block(rng) -> Case:
    store = _block_store(rng, _BLOCK_CFG)
    view = store.scope("decoder")
    o_e = Tensor(rng.normal(size=(4, 16)))
    q = Tensor(rng.normal(size=(4, 16)))
    r = rng.normal(size=(4, 16))
    params = [store[f"decoder.{n}"] for n in view]
    return (lambda: _weighted(decoder_block(o_e, q, view, 2), r)), [o_e, q, *params], 12


_SMALL = ModelConfig(channels=4, patch_size=4, heads=2, max_size=8)


def _plm(rng) -> Case:
    store = init_plm(_SMALL, rng)
    _randomize(store, rng, 0.1)
    img = Tensor(rng.uniform(size=(3, 8, 8)))
    r = rng.normal(size=(4, _SMALL.dim))
    return (lambda: _weighted(plm_forward(img, store, _SMALL), r)), [img, *store.values()], 12


def _backbone(rng) -> Case:
    store = init_backbone(_SMALL, rng)
    _randomize(store, rng, 0.05)
    img = Tensor(rng.uniform(size=(3, 8, 8)))
    q = Tensor(rng.normal(size=(4, _SMALL.dim)))
    r = rng.normal(size=(3, 8, 8))
    return (lambda: _weighted(backbone_forward(img, q, store, _SMALL), r)), [img, q, *store.values()], 8


def _l1(rng) -> Case:
    pred = Tensor(rng.normal(size=(3, 4, 4)))
    target = Tensor(rng.normal(size=(3, 4, 4)))
    return (lambda: ops.l1_loss(pred, target)), [pred, target], None


def _contrastive(rng) -> Case:
    n, d = 4, 3
    cfg = ContrastiveConfig(T=n, m=n - 1, tau=0.5, normalize=bool(rng.integers(2)))
    q_d = Tensor(rng.normal(size=(n, d)))
    q_gt = Tensor(rng.normal(size=(n, d)))
    sample = sample_contrastive_indices(n, cfg, rng)
    return (lambda: contrastive_loss(q_d, q_gt, cfg, sample=sample)), [q_d, q_gt], None


CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "conv2d": _conv2d,
    "linear": _linear,
    "layernorm": _layernorm,
    "softmax": _softmax,
    "attention": _attention,
    "encoder_block": _encoder_block,
    "decoder_block": _decoder_block,
    "plm": _plm,
    "backbone": _backbone,
    "l1_loss": _l1,
    "contrastive": _contrastive,
}


@dataclass
class GradcheckResult:
    op: str
    instances: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def run_suite(instances: int = 20, seed: int = 0, names=None) -> list[GradcheckResult]:
    results = []
    for name in names or CASES:
        rng = np.random.default_rng([seed, list(CASES).index(name)])
        start = time.perf_counter()
        worst = 0.0
        for _ in range(instances):
            fn, inputs, max_coords = CASES[name](rng)
            errors = gradcheck(fn, inputs, h=1e-5, max_coords=max_coords, rng=rng)
            worst = max(worst, *errors)
        results.append(GradcheckResult(name, instances, worst, time.perf_counter() - start))
    return results
