"""TAPE-Net forward graph: backbone with prior-query decoder, and the PLM.

Data flow of the backbone for an image ``[3, H, W]``::

    cnn_encode -> patchify (+ position encoding) -> encoder_block x n
      -> decoder_block(prior queries) -> unpatchify -> cnn_decode

The prior learning module maps an image to one query per patch: a feature
patch from a small conv extractor plus a learnable per-position vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.attention import init_attention, multi_head_attention
from .core.params import ParameterStore
from .core.tensor import Tensor
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    patch_size: int = 4
    heads: int = 2
    n_blocks: int = 1
    plm_hidden: int = 32
    ffn_mult: int = 2
    max_size: int = 64
    ln_eps: float = 1e-5

    @property
    def dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def grid(self) -> int:
        """Patches per side of the largest supported input."""
        return self.max_size // self.patch_size

    def validate(self) -> None:
        if self.channels < 1 or self.patch_size < 1 or self.n_blocks < 0 or self.plm_hidden < 1:
            raise ConfigurationError("model sizes must be positive")
        if self.dim % self.heads:
            raise ConfigurationError(f"token dim {self.dim} not divisible by heads={self.heads}")
        if self.max_size % self.patch_size:
            raise ConfigurationError("max_size must be a multiple of patch_size")


# --- initialisation ----------------------------------------------------------------

def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_conv(store: ParameterStore, name: str, c_in: int, c_out: int, rng, k: int = 3) -> None:
    store.add(f"{name}.weight", _uniform(rng, (c_out, c_in, k, k), c_in * k * k))
    store.add(f"{name}.bias", np.zeros(c_out))


def _add_norm(store: ParameterStore, name: str, dim: int) -> None:
    store.add(f"{name}.gain", np.ones(dim))
    store.add(f"{name}.shift", np.zeros(dim))


def _add_ffn(store: ParameterStore, name: str, dim: int, hidden: int, rng) -> None:
    store.add(f"{name}.fc1.weight", _uniform(rng, (hidden, dim), dim))
    store.add(f"{name}.fc1.bias", np.zeros(hidden))
    store.add(f"{name}.fc2.weight", _uniform(rng, (dim, hidden), hidden))
    store.add(f"{name}.fc2.bias", np.zeros(dim))


def init_backbone(cfg: ModelConfig, rng: np.random.Generator) -> ParameterStore:
    cfg.validate()
    c, d = cfg.channels, cfg.dim
    hidden = cfg.ffn_mult * d
    store = ParameterStore()
    _add_conv(store, "cnn_enc.conv1", 3, c, rng)
    _add_conv(store, "cnn_enc.conv2", c, c, rng)
    store.add("pos_embed", rng.normal(0.0, 0.02, size=(cfg.grid ** 2, d)))
    for b in range(cfg.n_blocks):
        p = f"encoder.{b}"
        _add_norm(store, f"{p}.norm1", d)
        init_attention(store, f"{p}.attn", d, rng)
        _add_norm(store, f"{p}.norm2", d)
        _add_ffn(store, f"{p}.ffn", d, hidden, rng)
    _add_norm(store, "decoder.norm_enc", d)
    init_attention(store, "decoder.attn1", d, rng)
    _add_norm(store, "decoder.norm1", d)
    init_attention(store, "decoder.attn2", d, rng)
    _add_norm(store, "decoder.norm2", d)
    _add_ffn(store, "decoder.ffn", d, hidden, rng)
    _add_conv(store, "cnn_dec.conv1", c, c, rng)
    _add_conv(store, "cnn_dec.conv2", c, 3, rng)
    return store


def init_plm(cfg: ModelConfig, rng: np.random.Generator) -> ParameterStore:
    cfg.validate()
    store = ParameterStore()
    _add_conv(store, "extractor.conv1", 3, cfg.plm_hidden, rng)
    _add_conv(store, "extractor.conv2", cfg.plm_hidden, cfg.channels, rng)
    _add_conv(store, "extractor.conv3", cfg.channels, cfg.channels, rng)
    store.add("embed", rng.normal(0.0, 0.02, size=(cfg.grid ** 2, cfg.dim)))
    return store


# --- building blocks -----------------------------------------------------------------

def _conv(x: Tensor, params, name: str) -> Tensor:
    return ops.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding=1)


def _norm(x: Tensor, params, name: str, eps: float) -> Tensor:
    return ops.layernorm(x, params[f"{name}.gain"], params[f"{name}.shift"], eps)


def _ffn(x: Tensor, params, name: str) -> Tensor:
    h = ops.relu(ops.linear(x, params[f"{name}.fc1.weight"], params[f"{name}.fc1.bias"]))
    return ops.linear(h, params[f"{name}.fc2.weight"], params[f"{name}.fc2.bias"])


def _check_image(image: Tensor, cfg: ModelConfig) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected an RGB image [3, H, W], got {image.shape}")
    _, h, w = image.shape
    p = cfg.patch_size
    if h < p or w < p or h % p or w % p:
        raise DimensionError(f"image size {h}x{w} is not divisible by patch size {p}")
    if h > cfg.max_size or w > cfg.max_size:
        raise DimensionError(f"image size {h}x{w} exceeds max_size {cfg.max_size}")


def cnn_encode(image: Tensor, params) -> Tensor:
    return _conv(ops.relu(_conv(image, params, "cnn_enc.conv1")), params, "cnn_enc.conv2")


def cnn_decode(features: Tensor, params) -> Tensor:
    return _conv(ops.relu(_conv(features, params, "cnn_dec.conv1")), params, "cnn_dec.conv2")


def patchify(f: Tensor, p: int) -> Tensor:
    """Split ``[C, H, W]`` into raster-ordered ``[N, C*p*p]`` non-overlapping patches."""
    if f.ndim != 3:
        raise DimensionError(f"patchify expects [C, H, W], got {f.shape}")
    c, h, w = f.shape
    if p < 1 or h % p or w % p:
        raise DimensionError(f"patch size {p} does not divide feature size {h}x{w}")
    x = ops.reshape(f, (c, h // p, p, w // p, p))
    x = ops.transpose(x, (1, 3, 0, 2, 4))
    return ops.reshape(x, ((h // p) * (w // p), c * p * p))


def unpatchify(tokens: Tensor, p: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    n, d = tokens.shape
    c = d // (p * p)
    if h % p or w % p or n != (h // p) * (w // p) or c * p * p != d:
        raise DimensionError(f"cannot fold {tokens.shape} tokens into {h}x{w} with patch {p}")
    x = ops.reshape(tokens, (h // p, w // p, c, p, p))
    x = ops.transpose(x, (2, 0, 3, 1, 4))
    return ops.reshape(x, (c, h, w))


def position_index(h: int, w: int, cfg: ModelConfig) -> np.ndarray:
    """Rows of the position tables used by an ``h x w`` input (grid position, raster order)."""
    p = cfg.patch_size
    rows, cols = np.meshgrid(np.arange(h // p), np.arange(w // p), indexing="ij")
    return (rows * cfg.grid + cols).reshape(-1)


def encoder_block(x: Tensor, params, heads: int, eps: float = 1e-5) -> Tensor:
    """Pre-norm transformer block: self-attention then FFN, each with a residual."""
    h = _norm(x, params, "norm1", eps)
    x = ops.add(multi_head_attention(h, h, h, heads, params.scope("attn")), x)
    return ops.add(_ffn(_norm(x, params, "norm2", eps), params, "ffn"), x)


def decoder_block(
    o_e: Tensor,
    queries: Tensor,
    params,
    heads: int,
    eps: float = 1e-5,
    trace: dict | None = None,
) -> Tensor:
    """Decoder block conditioned on prior queries.

    Queries are added to the attention query/key inputs only; the value
    input of both attentions is the normalised encoder output.
    """
    if queries.shape != o_e.shape:
        raise DimensionError(f"prior queries {queries.shape} do not match encoder output {o_e.shape}")
    t1 = t2 = None
    if trace is not None:
        t1, t2 = trace.setdefault("attn1", {}), trace.setdefault("attn2", {})
    enc = _norm(o_e, params, "norm_enc", eps)
    qk = ops.add(enc, queries)
    y = ops.add(multi_head_attention(qk, qk, enc, heads, params.scope("attn1"), trace=t1), o_e)
    q2 = ops.add(_norm(y, params, "norm1", eps), queries)
    y2 = ops.add(multi_head_attention(q2, enc, enc, heads, params.scope("attn2"), trace=t2), y)
    return ops.add(_ffn(_norm(y2, params, "norm2", eps), params, "ffn"), y2)


def plm_forward(image: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Prior queries ``Q[i] = e_i + flatten(patch_i(G(image)))``, shape ``[N, D]``."""
    _check_image(image, cfg)
    f = _conv(image, params, "extractor.conv1")
    f = _conv(ops.relu(f), params, "extractor.conv2")
    f = _conv(ops.relu(f), params, "extractor.conv3")
    _, h, w = image.shape
    embed = ops.take(params["embed"], position_index(h, w, cfg))
    return ops.add(patchify(f, cfg.patch_size), embed)


def backbone_forward(
    image: Tensor,
    queries: Tensor,
    params,
    cfg: ModelConfig,
    trace: dict | None = None,
) -> Tensor:
    """Restore ``image`` ``[3, H, W]`` given prior queries ``[N, D]``; same-shape output."""
    _check_image(image, cfg)
    _, h, w = image.shape
    p = cfg.patch_size
    n = (h // p) * (w // p)
    if queries.shape != (n, cfg.dim):
        raise DimensionError(f"prior queries {queries.shape} != ({n}, {cfg.dim}) for a {h}x{w} input")
    f_e = cnn_encode(image, params)
    x = ops.add(patchify(f_e, p), ops.take(params["pos_embed"], position_index(h, w, cfg)))
    for b in range(cfg.n_blocks):
        x = encoder_block(x, params.scope(f"encoder.{b}"), cfg.heads, cfg.ln_eps)
    o_d = decoder_block(x, queries, params.scope("decoder"), cfg.heads, cfg.ln_eps, trace=trace)
    return cnn_decode(unpatchify(o_d, p, h, w), params)
