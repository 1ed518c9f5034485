"""Procedural clean images, degradation operators and DMIX.

All images are float32 arrays of shape ``3 x H x W`` with values in [0, 1].
Every generator is a pure function of its arguments and seed.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy import ndimage

NOISE_SIGMAS = (15, 25, 50)


class DegradationKind(IntEnum):
    NOISE = 0
    RAIN = 1
    HAZE = 2
    BLUR = 3
    LOWLIGHT = 4

    @property
    def task(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str) -> "DegradationKind":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown degradation {name!r}; expected one of "
                             f"{[k.task for k in cls]}") from None


ALL_TASKS = tuple(k.task for k in DegradationKind)


@dataclass
class DegradedSample:
    clean: np.ndarray
    degraded: np.ndarray
    label: DegradationKind
    omega: np.ndarray


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _finish(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_clean(seed, H: int = 64, W: int = 64) -> np.ndarray:
    """Smooth colour gradient + random rectangles/ellipses + band-limited texture."""
    if H < 8 or W < 8:
        raise ValueError("synth_clean needs H, W >= 8")
    rng = _rng(seed)
    yy, xx = np.mgrid[0:H, 0:W] / np.array([H - 1, W - 1]).reshape(2, 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t

    for _ in range(rng.integers(3, 8)):
        color = rng.uniform(0.0, 1.0, 3)
        alpha = rng.uniform(0.5, 1.0)
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.08, 0.35, 2)
        if rng.random() < 0.5:
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img = np.where(inside, (1 - alpha) * img + alpha * color[:, None, None], img)

    field = ndimage.gaussian_filter(rng.standard_normal((H, W)), rng.uniform(0.8, 2.5), mode="wrap")
    field /= max(np.abs(field).max(), 1e-12)
    tint = rng.uniform(0.5, 1.0, 3)
    img = img + rng.uniform(0.04, 0.12) * tint[:, None, None] * field
    return _finish(img)


def add_gaussian_noise(img: np.ndarray, sigma: float, seed) -> np.ndarray:
    """``clip(Y + n)`` with ``n ~ N(0, (sigma/255)^2)``; sigma on the 0-255 scale."""
    if sigma == 0:
        return np.array(img, dtype=np.float32)
    n = _rng(seed).normal(0.0, sigma / 255.0, img.shape)
    return _finish(img + n)


def rain_layer(H: int, W: int, seed, count: int | None = None, length_range=(0.15, 0.35),
               angle_range=(-25.0, 25.0), width: float = 1.0) -> np.ndarray:
    """Anti-aliased streak layer in [0, 1], all streaks sharing one dominant angle."""
    rng = _rng(seed)
    if count is None:
        lo = max(H * W // 200, 1)
        count = int(rng.integers(lo, max(H * W // 90, lo + 1)))
    layer = np.zeros((H, W))
    if count == 0:
        return layer
    base = np.radians(rng.uniform(*angle_range))
    for _ in range(count):
        theta = base + np.radians(rng.normal(0, 2.0))
        length = rng.uniform(*length_range) * H
        y0, x0 = rng.uniform(-0.1 * H, H), rng.uniform(0, W)
        intensity = rng.uniform(0.6, 1.0)
        steps = max(int(np.ceil(2 * length)), 2)
        s = np.linspace(0, length, steps)
        ys, xs = y0 + s * np.cos(theta), x0 + s * np.sin(theta)
        fy, fx = np.floor(ys).astype(int), np.floor(xs).astype(int)
        wy, wx = ys - fy, xs - fx
        # bilinear splat for anti-aliasing
        for dy, dx, wt in ((0, 0, (1 - wy) * (1 - wx)), (1, 0, wy * (1 - wx)),
                           (0, 1, (1 - wy) * wx), (1, 1, wy * wx)):
            py, px = fy + dy, fx + dx
            ok = (py >= 0) & (py < H) & (px >= 0) & (px < W)
            np.add.at(layer, (py[ok], px[ok]), intensity * wt[ok] / max(steps / length, 1.0))
    if width > 1.0:
        layer = ndimage.gaussian_filter(layer, (width - 1.0) / 2, mode="nearest")
    return np.clip(layer, 0.0, 1.0)


def add_rain(img: np.ndarray, seed, count: int | None = None, brightness: float | None = None,
             **streak_params) -> np.ndarray:
    """``clip(Y + b * S)`` with S a bright streak layer."""
    rng = _rng(seed)
    if brightness is None:
        brightness = rng.uniform(0.5, 0.9)
    H, W = img.shape[-2:]
    layer = rain_layer(H, W, rng.integers(2**63), count=count, **streak_params)
    return _finish(img + brightness * layer[None])


def haze_model(img: np.ndarray, t, airlight: float) -> np.ndarray:
    """Atmospheric scattering ``I = J t + A (1 - t)``; ``t`` broadcasts over channels."""
    t = np.asarray(t, dtype=np.float64)
    return _finish(img * t + airlight * (1.0 - t))


def transmission_map(H: int, W: int, seed, t_range=(0.35, 0.7)) -> np.ndarray:
    rng = _rng(seed)
    field = ndimage.gaussian_filter(rng.standard_normal((H, W)), max(H, W) / 4, mode="reflect")
    field = (field - field.min()) / max(field.max() - field.min(), 1e-12)
    lo, hi = rng.uniform(*t_range), rng.uniform(*t_range)
    lo, hi = min(lo, hi), max(lo, hi)
    return lo + (hi - lo) * field


def add_haze(img: np.ndarray, seed, t_range=(0.35, 0.7), A_range=(0.75, 1.0)) -> np.ndarray:
    rng = _rng(seed)
    t = transmission_map(*img.shape[-2:], rng.integers(2**63), t_range)
    return haze_model(img, t[None], rng.uniform(*A_range))


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Normalised Gaussian truncated at 4 sigma, reflected borders, per channel."""
    if sigma <= 0:
        return np.array(img, dtype=np.float32)
    out = ndimage.gaussian_filter(np.asarray(img, dtype=np.float64), (0, sigma, sigma),
                                  mode="reflect", truncate=4.0)
    return _finish(out)


def add_blur(img: np.ndarray, seed, sigma_range=(1.0, 2.5)) -> np.ndarray:
    return gaussian_blur(img, _rng(seed).uniform(*sigma_range))


def darken_fixed(img: np.ndarray, gamma: float, scale: float) -> np.ndarray:
    return _finish(scale * np.power(np.asarray(img, dtype=np.float64), gamma))


def darken(img: np.ndarray, seed, gamma_range=(1.5, 3.0), scale_range=(0.1, 0.5)) -> np.ndarray:
    """Low-light model ``scale * Y ** gamma``."""
    rng = _rng(seed)
    return darken_fixed(img, rng.uniform(*gamma_range), rng.uniform(*scale_range))


def degrade(img: np.ndarray, kind: DegradationKind, seed) -> np.ndarray:
    rng = _rng(seed)
    sub = rng.integers(2**63)
    if kind == DegradationKind.NOISE:
        return add_gaussian_noise(img, NOISE_SIGMAS[rng.integers(len(NOISE_SIGMAS))], sub)
    if kind == DegradationKind.RAIN:
        return add_rain(img, sub)
    if kind == DegradationKind.HAZE:
        return add_haze(img, sub)
    if kind == DegradationKind.BLUR:
        return add_blur(img, sub)
    if kind == DegradationKind.LOWLIGHT:
        return darken(img, sub)
    raise ValueError(f"unknown degradation kind {kind!r}")


# Composite order: weather-like layers first, then sensor noise.
COMPOSITES = {
    "rain+noise": (DegradationKind.RAIN, DegradationKind.NOISE),
    "haze+noise": (DegradationKind.HAZE, DegradationKind.NOISE),
}


def degrade_composite(img: np.ndarray, name: str, seed) -> np.ndarray:
    """Apply a composite degradation; the noise stage always uses sigma = 25."""
    rng = _rng(seed)
    out = img
    for kind in COMPOSITES[name]:
        if kind == DegradationKind.NOISE:
            out = add_gaussian_noise(out, 25, rng.integers(2**63))
        else:
            out = degrade(out, kind, rng.integers(2**63))
    return out


def one_hot(index: int, T: int) -> np.ndarray:
    w = np.zeros(T, dtype=np.float32)
    w[index] = 1.0
    return w


def make_sample(seed, kind: DegradationKind, tasks=ALL_TASKS, size: int = 64) -> DegradedSample:
    """One (clean, degraded, label, omega) quadruple; omega is one-hot over ``tasks``."""
    kind = DegradationKind(kind)
    rng = _rng(seed)
    clean = synth_clean(rng.integers(2**63), size, size)
    degraded = degrade(clean, kind, rng.integers(2**63))
    return DegradedSample(clean, degraded, kind, one_hot(list(tasks).index(kind.task), len(tasks)))


def sample_batch(seed, tasks, batch_size: int, size: int = 64) -> list[DegradedSample]:
    """Uniform task sampling; sample i depends only on (seed, i)."""
    out = []
    for i in range(batch_size):
        rng = _rng([*np.atleast_1d(seed).tolist(), i])
        kind = DegradationKind.parse(tasks[rng.integers(len(tasks))])
        out.append(make_sample(rng.integers(2**63), kind, tasks, size))
    return out


def dmix(batch: list[DegradedSample], seed, perm=None, axis: int | None = None) -> list[DegradedSample]:
    """Split every image into two halves and re-pair second halves across the batch.

    Composite i keeps the first half of sample i and takes the second half of
    sample ``perm[i]``; its omega is the mean of both sources' omegas.  Without
    an explicit ``perm`` a random cyclic derangement is used, so every
    composite mixes two different samples.
    """
    n = len(batch)
    if n < 2:
        return list(batch)
    rng = _rng(seed)
    if axis is None:
        axis = int(rng.integers(2))
    if perm is None:
        order = rng.permutation(n)
        perm = np.empty(n, dtype=int)
        perm[order] = np.roll(order, -1)
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError("perm must be a permutation of the batch indices")
    ax = 1 + axis  # 1: rows (top/bottom), 2: columns (left/right)
    cut = batch[0].clean.shape[ax] // 2
    sl_first = [slice(None)] * 3
    sl_first[ax] = slice(0, cut)
    sl_first = tuple(sl_first)
    sl_second = [slice(None)] * 3
    sl_second[ax] = slice(cut, None)
    sl_second = tuple(sl_second)

    out = []
    for i, j in enumerate(perm):
        a, b = batch[i], batch[j]
        clean = np.concatenate([a.clean[sl_first], b.clean[sl_second]], axis=ax)
        degraded = np.concatenate([a.degraded[sl_first], b.degraded[sl_second]], axis=ax)
        omega = (0.5 * a.omega + 0.5 * b.omega).astype(np.float32)
        out.append(DegradedSample(clean, degraded, a.label, omega))
    return out
