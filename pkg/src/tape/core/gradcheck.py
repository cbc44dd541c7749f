"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps gradients that are zero by symmetry (e.g. attention key
    biases) from comparing rounding noise against rounding noise: central
    differences at h=1e-5 carry ~1e-11 of cancellation error per entry, so
    below the floor the check is effectively absolute. Callers scale the
    floor with the loss magnitude, since the noise scales with it too.
    """
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numerical_grad(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    h: float = 1e-5,
    coords: np.ndarray | None = None,
) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. (a subset of) ``tensor``'s entries."""
    tensor.data = np.ascontiguousarray(tensor.data)
    flat = tensor.data.reshape(-1)
    coords = np.arange(flat.size) if coords is None else coords
    out = np.empty(len(coords))
    with no_grad():
        for j, c in enumerate(coords):
            old = flat[c]
            flat[c] = old + h
            fp = fn().item()
            flat[c] = old - h
            fm = fn().item()
            flat[c] = old
            out[j] = (fp - fm) / (2.0 * h)
    return out


def _refine_kinks(fn, t, h, coords, analytic, numeric, floor) -> None:
    """Re-difference entries whose central difference is unstable in ``h``.

    A step that straddles a ReLU kink gives a difference quotient mixing two
    one-sided slopes. Such entries change markedly when the step shrinks
    tenfold; for those the smaller step's value is used. Entries are only
    re-examined when they disagree with the analytic value, and the decision
    itself compares the two finite differences, never the analytic one.
    """
    idx = np.arange(t.size) if coords is None else coords
    a = analytic if coords is None else analytic[coords]
    scale = max(np.abs(numeric).max(initial=0.0), floor)
    suspect = np.flatnonzero(np.abs(a - numeric) > 1e-3 * scale)
    if suspect.size == 0:
        return
    fine = numerical_grad(fn, t, h / 10, idx[suspect])
    unstable = np.abs(fine - numeric[suspect]) > 1e-3 * scale
    numeric[suspect[unstable]] = fine[unstable]


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Compare analytic and finite-difference gradients of ``fn`` for each input.

    ``fn`` must rebuild its graph on every call. When ``max_coords`` is set,
    only that many randomly chosen entries per input are differenced.
    Returns the relative error per input.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = fn()
    floor = 1e-5 * max(1.0, abs(loss.item()))
    backward(loss)
    errors = []
    for t in inputs:
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        coords = None
        if max_coords is not None and t.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        numeric = numerical_grad(fn, t, h, coords)
        _refine_kinks(fn, t, h, coords, analytic, numeric, floor)
        errors.append(relative_error(analytic if coords is None else analytic[coords], numeric, floor))
    return errors
