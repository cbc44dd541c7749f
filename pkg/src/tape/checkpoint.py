"""Training state and its binary file format.

Layout (all integers little-endian)::

    b"TAPE" | u32 version | u32 header length | JSON header
    then, per tensor: u32 name length | utf-8 name | u32 rank | u64 dims... | f64 payload

The JSON header holds the training config, stage, iteration counter,
optimizer hyperparameters/step counters, RNG states and the tensor count.
Tensors are named ``<store>/<param>`` or ``adam/<optimizer>/{m,v}/<param>``.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .core.adam import AdamState
from .core.params import ParameterStore
from .errors import ConfigurationError, FormatError

MAGIC = b"TAPE"
VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    stores: dict[str, ParameterStore]
    optimizers: dict[str, AdamState] = field(default_factory=dict)
    rngs: dict[str, np.random.Generator] = field(default_factory=dict)
    stage: str = "init"
    iteration: int = 0

    @property
    def theta(self) -> ParameterStore:
        return self.stores["theta"]

    @property
    def plm(self) -> ParameterStore:
        return self.stores["plm"]

    @property
    def phi(self) -> ParameterStore | None:
        return self.stores.get("phi")

    def copy(self) -> Checkpoint:
        """Independent deep copy (round-trips through the serialised form)."""
        return from_bytes(to_bytes(self))


def _rng_state(g: np.random.Generator) -> dict:
    return g.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    name = state.get("bit_generator")
    if name != "PCG64":
        raise ConfigurationError(f"unsupported bit generator {name!r}")
    g = np.random.Generator(np.random.PCG64())
    g.bit_generator.state = state
    return g


def _tensor_block(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", len(encoded)) + encoded + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors: list[tuple[str, np.ndarray]] = []
    for store_name, store in ckpt.stores.items():
        tensors += [(f"{store_name}/{n}", t.data) for n, t in store.items()]
    optimizers = {}
    for opt_name, state in sorted(ckpt.optimizers.items()):  # header keys are sorted too
        optimizers[opt_name] = {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
                                "eps": state.eps, "t": state.t}
        tensors += [(f"adam/{opt_name}/m/{n}", a) for n, a in state.m.items()]
        tensors += [(f"adam/{opt_name}/v/{n}", a) for n, a in state.v.items()]
    header = {
        "config": ckpt.config.to_dict(),
        "stage": ckpt.stage,
        "iteration": ckpt.iteration,
        "stores": list(ckpt.stores),
        "optimizers": optimizers,
        "rng": {k: _rng_state(g) for k, g in ckpt.rngs.items()},
        "tensors": len(tensors),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    parts += [_tensor_block(n, a) for n, a in tensors]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a TAPE checkpoint", 0)
    version_at = r.pos
    version, header_len = r.unpack("<II", "version and header length")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})", version_at)
    header_at = r.pos
    try:
        header = json.loads(r.take(header_len, "header").decode("utf-8"))
        config = TrainConfig.from_dict(header["config"])
        store_names = list(header["stores"])
        optimizers = {k: AdamState(lr=v["lr"], beta1=v["beta1"], beta2=v["beta2"], eps=v["eps"], t=v["t"])
                      for k, v in header["optimizers"].items()}
        rngs = {k: _rng_from_state(s) for k, s in header["rng"].items()}
        count = int(header["tensors"])
        stage, iteration = str(header["stage"]), int(header["iteration"])
    except FormatError:
        raise
    except (ValueError, KeyError, TypeError, AttributeError, ConfigurationError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", header_at) from None

    stores = {name: ParameterStore() for name in store_names}
    for _ in range(count):
        block_at = r.pos
        (name_len,) = r.unpack("<I", "tensor name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not utf-8", block_at) from None
        (rank,) = r.unpack("<I", "tensor rank")
        if rank > 8:
            raise FormatError(f"implausible tensor rank {rank}", block_at)
        dims = r.unpack(f"<{rank}Q", "tensor dims")
        size = math.prod(dims)
        data = np.frombuffer(r.take(8 * size, f"payload of {name}"), dtype="<f8").reshape(dims).astype(np.float64)
        head, _, rest = name.partition("/")
        if head == "adam":
            opt, _, rest = rest.partition("/")
            moment, _, pname = rest.partition("/")
            if opt not in optimizers or moment not in ("m", "v"):
                raise FormatError(f"unexpected optimizer tensor {name!r}", block_at)
            getattr(optimizers[opt], moment)[pname] = data
        elif head in stores and rest not in stores[head]:
            stores[head].add(rest, data)
        else:
            raise FormatError(f"tensor {name!r} is duplicated or belongs to no known store", block_at)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last tensor", r.pos)
    return Checkpoint(config, stores, optimizers, rngs, stage, iteration)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
