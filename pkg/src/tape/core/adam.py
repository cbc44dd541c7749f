"""Adam with bias correction over a :class:`ParameterStore`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import UsageError
from .params import ParameterStore


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParameterStore, state: AdamState) -> None:
    """Apply one Adam update to every parameter in ``store`` and zero the grads.

    Raises :class:`UsageError` if any parameter has no gradient.
    """
    missing = [n for n, p in store.items() if p.grad is None]
    if missing:
        raise UsageError(f"no gradient for parameters: {missing[:5]}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    step = state.lr / bc1
    for name, p in store.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += state.eps
        p.data -= step * (m / denom)
        g.fill(0.0)
