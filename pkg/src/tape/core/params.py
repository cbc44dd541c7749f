"""Named collections of trainable tensors."""

from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np

from .tensor import Tensor


class ParameterStore(Mapping[str, Tensor]):
    """An ordered name -> Tensor mapping of trainable parameters.

    Names are dotted paths (``"enc.conv1.weight"``). :meth:`scope` returns a
    prefix view so building blocks can look up ``params["weight"]`` without
    knowing where they sit in the model.
    """

    def __init__(self, tensors: Mapping[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def scope(self, prefix: str) -> ParamView:
        return ParamView(self, prefix)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = np.zeros_like(t.data)

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def copy(self) -> ParameterStore:
        """Deep copy of the values (gradients are not copied)."""
        return ParameterStore({n: Tensor(t.data.copy()) for n, t in self._tensors.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._tensors.items()}

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        if set(arrays) != set(self._tensors):
            missing = set(self._tensors) ^ set(arrays)
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for n, arr in arrays.items():
            if arr.shape != self._tensors[n].shape:
                raise ValueError(f"{n}: shape {arr.shape} != {self._tensors[n].shape}")
            self._tensors[n].data = np.array(arr, dtype=np.float64)

    @staticmethod
    def merge(**stores: ParameterStore) -> ParameterStore:
        """Combine stores under ``<key>/`` prefixes, sharing the tensor objects."""
        merged = ParameterStore()
        for key, store in stores.items():
            for n, t in store.items():
                merged._tensors[f"{key}/{n}"] = t
        return merged


class ParamView(Mapping[str, Tensor]):
    """Read-only view of the parameters under ``prefix.``."""

    def __init__(self, store: ParameterStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def _full(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Tensor:
        return self.store[self._full(name)]

    def __iter__(self) -> Iterator[str]:
        head = self.prefix + "."
        return (n[len(head):] for n in self.store if n.startswith(head))

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def scope(self, prefix: str) -> ParamView:
        return ParamView(self.store, self._full(prefix))
