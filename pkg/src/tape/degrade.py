"""Procedural clean images and synthetic degradations.

Stands in for the paired restoration datasets: every training pair is a
procedurally generated (or PPM-cropped) clean patch and a corrupted copy.
All randomness comes from an explicit ``numpy.random.Generator``, so a
(spec, generator state) pair fully determines the output.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError
from .imageio import read_ppm

# Counts are per 256 pixels so the same spec scales to any patch size.
DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "gaussian_noise": {"sigma_min": 1.0, "sigma_max": 50.0},
    "rain_streaks": {
        "density_min": 3.0, "density_max": 6.0, "length_min": 4.0, "length_max": 9.0,
        "width": 0.8, "angle": 0.3, "angle_jitter": 0.15, "brightness": 0.55,
    },
    "raindrops": {
        "density_min": 1.0, "density_max": 2.0, "radius_min": 2.0, "radius_max": 4.5,
        "blur": 2.0, "alpha": 0.9, "brighten": 0.12,
    },
    "moire": {
        "amplitude_min": 0.1, "amplitude_max": 0.3, "frequency_min": 0.9, "frequency_max": 2.2,
    },
    "snow": {
        "density_min": 3.0, "density_max": 8.0, "radius_min": 0.5, "radius_max": 1.4,
        "brightness": 0.9,
    },
    "shadow": {"factor_min": 0.35, "factor_max": 0.65, "vertices": 5.0, "softness": 0.7},
}
KINDS = tuple(DEFAULT_PARAMS)


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFAULT_PARAMS:
            raise ConfigurationError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ConfigurationError(f"{self.kind}: unknown params {sorted(unknown)}")
        merged = {**DEFAULT_PARAMS[self.kind], **{k: float(v) for k, v in self.params.items()}}
        object.__setattr__(self, "params", merged)
        for key, value in merged.items():
            if not np.isfinite(value) or value < 0:
                raise ConfigurationError(f"{self.kind}.{key} must be finite and >= 0, got {value}")
            if key.endswith("_min") and merged[key[:-4] + "_max"] < value:
                raise ConfigurationError(f"{self.kind}: {key} exceeds {key[:-4]}_max")
        if self.kind == "shadow" and not (merged["factor_max"] < 1.0 and merged["vertices"] >= 3):
            raise ConfigurationError("shadow needs factor_max < 1 and at least 3 vertices")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}


@dataclass(frozen=True)
class Task:
    name: str
    spec: DegradationSpec
    held_out: bool = False


class TaskSet:
    """Ordered degradation tasks, each pretrain-known or held out."""

    def __init__(self, tasks):
        self.tasks = tuple(tasks)
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate task names in {names}")
        if "pretrain" in names:
            raise ConfigurationError("'pretrain' is reserved and cannot name a task")
        if not any(not t.held_out for t in self.tasks):
            raise ConfigurationError("task set needs at least one pretrain-known task")

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)

    def __eq__(self, other):
        return isinstance(other, TaskSet) and self.to_list() == other.to_list()

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tasks]

    @property
    def pretrain_tasks(self) -> tuple[Task, ...]:
        return tuple(t for t in self.tasks if not t.held_out)

    def get(self, name: str) -> Task:
        for t in self.tasks:
            if t.name == name:
                return t
        raise ConfigurationError(f"task {name!r} not in task set {self.names}")

    def to_list(self) -> list[dict]:
        return [{"name": t.name, **t.spec.to_dict(), "held_out": t.held_out} for t in self.tasks]

    @classmethod
    def from_list(cls, items) -> TaskSet:
        tasks = []
        for item in items:
            item = dict(item)
            try:
                name = item.pop("name")
                spec = DegradationSpec(item.pop("kind"), item.pop("params", {}), int(item.pop("seed", 0)))
            except KeyError as exc:
                raise ConfigurationError(f"task entry missing field {exc}") from None
            held_out = bool(item.pop("held_out", False))
            if item:
                raise ConfigurationError(f"task {name!r}: unknown fields {sorted(item)}")
            tasks.append(Task(name, spec, held_out))
        return cls(tasks)

    @classmethod
    def load(cls, path: str | os.PathLike) -> TaskSet:
        """Read a JSON task manifest (a list of task entries)."""
        with open(path) as fh:
            return cls.from_list(json.load(fh))


def default_tasks() -> TaskSet:
    """Five pretrain-known tasks mirroring the mixed pre-training set, plus two held out."""
    return TaskSet([
        Task("noise", DegradationSpec("gaussian_noise")),
        Task("rain_light", DegradationSpec("rain_streaks")),
        Task("rain_heavy", DegradationSpec("rain_streaks", {
            "density_min": 6.0, "density_max": 10.0, "width": 1.1, "brightness": 0.75})),
        Task("raindrop", DegradationSpec("raindrops")),
        Task("moire", DegradationSpec("moire")),
        Task("snow", DegradationSpec("snow"), held_out=True),
        Task("shadow", DegradationSpec("shadow"), held_out=True),
    ])


# --- clean images ------------------------------------------------------------------

def _grid(h: int, w: int, supersample: int = 1) -> tuple[np.ndarray, np.ndarray]:
    s = supersample
    ys = (np.arange(h * s) + 0.5) / s
    xs = (np.arange(w * s) + 0.5) / s
    return np.meshgrid(ys, xs, indexing="ij")


def _downsample(a: np.ndarray, s: int) -> np.ndarray:
    h, w = a.shape[0] // s, a.shape[1] // s
    return a.reshape(h, s, w, s).mean(axis=(1, 3))


def _convex_polygon(rng, center, radius, vertices: int) -> np.ndarray:
    angles = np.sort(rng.uniform(0.0, 2 * np.pi, size=vertices))
    radii = radius * rng.uniform(0.6, 1.0, size=vertices)
    return np.stack([center[0] + radii * np.sin(angles), center[1] + radii * np.cos(angles)], axis=1)


def _inside_convex(yy, xx, poly: np.ndarray) -> np.ndarray:
    centroid = poly.mean(axis=0)
    inside = np.ones(yy.shape, dtype=bool)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        edge_y, edge_x = b[0] - a[0], b[1] - a[1]
        side = edge_x * (centroid[0] - a[0]) - edge_y * (centroid[1] - a[1])
        cross = edge_x * (yy - a[0]) - edge_y * (xx - a[1])
        inside &= cross * np.sign(side) >= 0
    return inside


def _polygon_mask(rng, h: int, w: int, vertices: int, supersample: int = 4) -> np.ndarray:
    """Anti-aliased coverage mask of a random convex polygon."""
    center = rng.uniform([0.15 * h, 0.15 * w], [0.85 * h, 0.85 * w])
    radius = rng.uniform(0.2, 0.55) * min(h, w)
    # angle-sorted points are only star-shaped; the hull makes them convex
    poly = _convex_hull(_convex_polygon(rng, center, radius, vertices))
    yy, xx = _grid(h, w, supersample)
    return _downsample(_inside_convex(yy, xx, poly).astype(np.float64), supersample)


def _convex_hull(points: np.ndarray) -> np.ndarray:
    pts = sorted(map(tuple, points))

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    return hull if len(hull) >= 3 else np.array(pts[:3])


def gen_clean_patch(size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Procedural RGB patch ``[3, H, W]`` in ``[0, 1]``.

    Layers a smooth colour ramp, two low-frequency sinusoids and one to three
    anti-aliased convex polygons.
    """
    h, w = size
    if h < 8 or w < 8:
        raise DimensionError(f"clean patches must be at least 8x8, got {h}x{w}")
    yy, xx = _grid(h, w)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (yy * np.sin(theta) + xx * np.cos(theta))
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    c0, c1 = rng.uniform(0.05, 0.95, size=(2, 3))
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(2):
        freq = rng.uniform(0.15, 0.9)
        phi = rng.uniform(0, 2 * np.pi)
        direction = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.12, size=3)
        wave = np.sin(freq * (xx * np.cos(direction) + yy * np.sin(direction)) + phi)
        img = img + amp[:, None, None] * wave
    for _ in range(int(rng.integers(1, 4))):
        mask = _polygon_mask(rng, h, w, int(rng.integers(3, 7))) * rng.uniform(0.6, 1.0)
        color = rng.uniform(0.0, 1.0, size=3)
        img = img * (1 - mask) + color[:, None, None] * mask
    return np.clip(img, 0.0, 1.0)


def load_clean_patch(path: str | os.PathLike, crop: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Random ``crop`` from a P6 PPM file, scaled to ``[0, 1]``."""
    image = read_ppm(path)
    ch, cw = crop
    _, h, w = image.shape
    if h < ch or w < cw:
        raise DimensionError(f"{path}: image {h}x{w} is smaller than crop {ch}x{cw}")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return image[:, top:top + ch, left:left + cw].copy()


class CleanSource:
    """Clean-patch provider: procedural by default, or crops from a PPM directory."""

    def __init__(self, size: tuple[int, int], directory: str | os.PathLike | None = None):
        self.size = tuple(size)
        self.files: list[Path] = []
        if directory is not None:
            self.files = sorted(Path(directory).glob("*.ppm"))
            if not self.files:
                raise ConfigurationError(f"no .ppm files in {directory}")

    def __call__(self, rng: np.random.Generator) -> np.ndarray:
        if not self.files:
            return gen_clean_patch(self.size, rng)
        path = self.files[int(rng.integers(len(self.files)))]
        return load_clean_patch(path, self.size, rng)


# --- degradations -----------------------------------------------------------------------

def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    radius = max(1, int(np.ceil(3 * sigma)))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    out = img
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect" if out.shape[axis] > radius else "edge")
        acc = np.zeros_like(out)
        n = out.shape[axis]
        for i, t in enumerate(taps):
            acc += t * np.take(padded, np.arange(i, i + n), axis=axis)
        out = acc
    return out


def _count(rng, p: dict, h: int, w: int) -> int:
    return int(round(rng.uniform(p["density_min"], p["density_max"]) * h * w / 256.0))


def _segment_distance(yy, xx, y0, x0, y1, x1) -> np.ndarray:
    dy, dx = y1 - y0, x1 - x0
    length2 = dy * dy + dx * dx
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(length2, 1e-12), 0.0, 1.0)
    return np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))


def _rain_streaks(img, p, rng):
    _, h, w = img.shape
    yy, xx = _grid(h, w)
    layer = np.zeros((h, w))
    base = rng.uniform(-p["angle"], p["angle"])
    for _ in range(_count(rng, p, h, w)):
        angle = base + rng.uniform(-p["angle_jitter"], p["angle_jitter"])
        length = rng.uniform(p["length_min"], p["length_max"])
        y0, x0 = rng.uniform(-2, h), rng.uniform(0, w)
        y1, x1 = y0 + length * np.cos(angle), x0 + length * np.sin(angle)
        d = _segment_distance(yy, xx, y0, x0, y1, x1)
        streak = p["brightness"] * rng.uniform(0.6, 1.0) * np.clip(1.0 - d / max(p["width"], 1e-6), 0, 1)
        layer = np.maximum(layer, streak)
    return img + layer[None]


def _raindrops(img, p, rng):
    _, h, w = img.shape
    yy, xx = _grid(h, w)
    blurred = _gaussian_blur(img, p["blur"]) + p["brighten"]
    out = img
    for _ in range(max(1, _count(rng, p, h, w))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry = rng.uniform(p["radius_min"], p["radius_max"])
        rx = ry * rng.uniform(0.6, 1.0)
        r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        alpha = p["alpha"] * np.clip((1.0 - r) * 3.0, 0.0, 1.0)
        out = out * (1 - alpha) + blurred * alpha
    return out


def _moire(img, p, rng):
    _, h, w = img.shape
    yy, xx = _grid(h, w)
    amp = rng.uniform(p["amplitude_min"], p["amplitude_max"])
    omega = rng.uniform(p["frequency_min"], p["frequency_max"])
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    arg = omega * (xx * np.cos(theta) + yy * np.sin(theta))
    return img * (1.0 + amp * np.sin(arg[None] + phase[:, None, None]))


def _snow(img, p, rng):
    _, h, w = img.shape
    yy, xx = _grid(h, w)
    layer = np.zeros((h, w))
    for _ in range(_count(rng, p, h, w)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(p["radius_min"], p["radius_max"])
        blob = p["brightness"] * np.exp(-0.5 * ((yy - cy) ** 2 + (xx - cx) ** 2) / r ** 2)
        layer = np.maximum(layer, blob)
    return img + (1.0 - img) * layer[None]


def _shadow(img, p, rng):
    _, h, w = img.shape
    mask = _gaussian_blur(_polygon_mask(rng, h, w, int(p["vertices"]))[None], p["softness"])[0]
    factor = rng.uniform(p["factor_min"], p["factor_max"])
    return img * (1.0 - (1.0 - factor) * mask)[None]


def _gaussian_noise(img, p, rng):
    sigma = rng.uniform(p["sigma_min"], p["sigma_max"]) / 255.0
    return img + sigma * rng.standard_normal(img.shape)


_APPLY = {
    "gaussian_noise": _gaussian_noise,
    "rain_streaks": _rain_streaks,
    "raindrops": _raindrops,
    "moire": _moire,
    "snow": _snow,
    "shadow": _shadow,
}


def apply_degradation(clean: np.ndarray, spec: DegradationSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Corrupt ``clean`` (``[3, H, W]`` in ``[0, 1]``) according to ``spec``; output clipped to ``[0, 1]``.

    Without an explicit ``rng`` the spec's own seed is used.
    """
    if spec.kind not in _APPLY:
        raise ConfigurationError(f"unknown degradation kind {spec.kind!r}")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    clean = np.asarray(clean, dtype=np.float64)
    return np.clip(_APPLY[spec.kind](clean, spec.params, rng), 0.0, 1.0)


def sample_pair(
    tasks: TaskSet,
    phase: str,
    rng: np.random.Generator,
    source: CleanSource | None = None,
) -> tuple[np.ndarray, np.ndarray, str]:
    """Draw one ``(corrupted, clean, task_name)`` pair.

    ``phase`` is ``"pretrain"`` (uniform over pretrain-known tasks) or the
    name of the task being fine-tuned.
    """
    task = pick_task(tasks, phase, rng)
    corrupted, clean = make_pair(task, rng, source)
    return corrupted, clean, task.name


def pick_task(tasks: TaskSet, phase: str, rng: np.random.Generator) -> Task:
    if phase == "pretrain":
        pool = tasks.pretrain_tasks
        return pool[int(rng.integers(len(pool)))]
    return tasks.get(phase)


def make_pair(task: Task, rng: np.random.Generator, source: CleanSource | None = None) -> tuple[np.ndarray, np.ndarray]:
    source = source or CleanSource((16, 16))
    clean = source(rng)
    return apply_degradation(clean, task.spec, rng), clean
