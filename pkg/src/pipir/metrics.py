"""Full-reference quality metrics (PSNR, single-scale luminance SSIM)."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ContractError, DimensionError

PSNR_CAP = 100.0


def psnr(a, b, max_val: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * math.log10(max_val ** 2 / mse), PSNR_CAP)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def _luminance(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x.mean(axis=0)
    if x.ndim == 2:
        return x
    raise DimensionError(f"expected 3 x H x W or H x W image, got {x.shape}")


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         max_val: float = 1.0) -> float:
    """Gaussian-windowed SSIM on the channel-mean luminance, averaged over valid positions."""
    x, y = _luminance(a), _luminance(b)
    if x.shape != y.shape:
        raise DimensionError(f"ssim shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ContractError(f"image {x.shape} smaller than the {window}x{window} window")
    if np.array_equal(x, y):
        return 1.0
    c1, c2 = (k1 * max_val) ** 2, (k2 * max_val) ** 2
    g = _gaussian_window(window, sigma)
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class QualityReport:
    """Per-task PSNR/SSIM lists plus an ``Average`` row over all tasks."""

    psnr: dict = field(default_factory=dict)
    ssim: dict = field(default_factory=dict)

    def add(self, task: str, p: float, s: float) -> None:
        self.psnr.setdefault(task, []).append(p)
        self.ssim.setdefault(task, []).append(s)

    def rows(self) -> list[tuple[str, float, float]]:
        out = [(t, float(np.mean(self.psnr[t])), float(np.mean(self.ssim[t]))) for t in self.psnr]
        if out:
            out.append(("Average", float(np.mean([r[1] for r in out])), float(np.mean([r[2] for r in out]))))
        return out

    def average_psnr(self) -> float:
        return self.rows()[-1][1]

    def table(self) -> str:
        lines = [f"{'task':<14}{'PSNR':>9}{'SSIM':>9}"]
        lines += [f"{t:<14}{p:>9.3f}{s:>9.4f}" for t, p, s in self.rows()]
        return "\n".join(lines)

    def records(self, **extra) -> list[str]:
        recs = []
        for t, p, s in self.rows():
            for metric, value in (("psnr", p), ("ssim", s)):
                recs.append(json.dumps({**extra, "task": t, "metric": metric, "value": round(value, 6)},
                                       sort_keys=True))
        return recs
