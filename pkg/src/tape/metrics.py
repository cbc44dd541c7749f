"""PSNR / SSIM on ``[0, 1]`` float images and evaluation reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with peak value 1; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def ssim(a, b, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over non-overlapping ``window x window`` blocks and channels.

    Trailing rows/columns that do not fill a whole block are ignored.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    _, h, w = a.shape
    if h < window or w < window:
        raise DimensionError(f"image {h}x{w} smaller than SSIM window {window}")
    c1, c2 = k1 ** 2, k2 ** 2
    nh, nw = h // window, w // window

    def blocks(x):
        x = x[:, :nh * window, :nw * window]
        return x.reshape(x.shape[0], nh, window, nw, window).transpose(0, 1, 3, 2, 4).reshape(
            x.shape[0], nh, nw, -1)

    xa, xb = blocks(a), blocks(b)
    mu_a, mu_b = xa.mean(-1), xb.mean(-1)
    da, db = xa - mu_a[..., None], xb - mu_b[..., None]
    var_a, var_b = (da * da).mean(-1), (db * db).mean(-1)
    cov = (da * db).mean(-1)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class EvalReport:
    task: str
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.psnr)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    def add(self, restored, clean) -> None:
        self.psnr.append(psnr(restored, clean))
        self.ssim.append(ssim(restored, clean))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["task", "image", "psnr", "ssim"])
        for i, (p, s) in enumerate(zip(self.psnr, self.ssim)):
            writer.writerow([self.task, i, repr(p), repr(s)])
        writer.writerow([self.task, "mean", repr(self.mean_psnr), repr(self.mean_ssim)])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"task {self.task}: {self.count} images",
                 f"{'image':>6}  {'PSNR (dB)':>10}  {'SSIM':>7}"]
        lines += [f"{i:>6}  {p:>10.3f}  {s:>7.4f}" for i, (p, s) in enumerate(zip(self.psnr, self.ssim))]
        lines.append(f"{'mean':>6}  {self.mean_psnr:>10.3f}  {self.mean_ssim:>7.4f}")
        return "\n".join(lines)
