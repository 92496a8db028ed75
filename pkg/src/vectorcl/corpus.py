"""Synthetic grayscale corpus with per-image instance masks.

Images are smooth backgrounds with 2-5 ellipses, blobs or ribbons whose
intensity is an offset from the local background, so intensity alone does not
separate foreground from background. Masks are only consumed by the probe.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError

MASK_FRACTION_RANGE = (0.02, 0.60)


@dataclasses.dataclass
class Corpus:
    images: np.ndarray  # (n, H, W) float64 in [0, 1]
    masks: np.ndarray  # (n, H, W) int16 instance labels, 0 = background

    def __len__(self) -> int:
        return len(self.images)

    @property
    def foreground(self) -> np.ndarray:
        return self.masks > 0


def _background(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    field = np.zeros_like(yy)
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    field = (field - field.min()) / max(np.ptp(field), 1e-12)
    lo = rng.uniform(0.1, 0.35)
    return lo + field * rng.uniform(0.2, 0.4)


def _ellipse(rng, yy, xx):
    cy, cx = rng.uniform(0.15, 0.85, size=2)
    ry, rx = rng.uniform(0.06, 0.22, size=2)
    ang = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = np.cos(ang) * dy + np.sin(ang) * dx
    v = -np.sin(ang) * dy + np.cos(ang) * dx
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def _blob(rng, yy, xx):
    field = np.zeros_like(yy)
    cy, cx = rng.uniform(0.2, 0.8, size=2)
    for _ in range(3):
        oy, ox = rng.normal(0, 0.06, size=2)
        s = rng.uniform(0.04, 0.1)
        field += np.exp(-((yy - cy - oy) ** 2 + (xx - cx - ox) ** 2) / (2 * s * s))
    return field > 0.5


def _ribbon(rng, yy, xx):
    amp = rng.uniform(0.05, 0.2)
    freq = rng.uniform(0.5, 2.0)
    offset = rng.uniform(0.25, 0.75)
    width = rng.uniform(0.02, 0.05)
    phase = rng.uniform(0, 2 * np.pi)
    if rng.random() < 0.5:
        yy, xx = xx, yy
    curve = offset + amp * np.sin(2 * np.pi * freq * xx + phase)
    start, stop = np.sort(rng.uniform(0.0, 1.0, size=2))
    return (np.abs(yy - curve) <= width) & (xx >= min(start, 0.4)) & (xx <= max(stop, 0.6))


_SHAPES = (_ellipse, _blob, _ribbon)


def _one_image(rng: np.random.Generator, size: int):
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    for _ in range(100):
        bg = _background(rng, yy, xx)
        labels = np.zeros((size, size), dtype=np.int16)
        img = bg.copy()
        for k in range(int(rng.integers(2, 6))):
            region = _SHAPES[int(rng.integers(len(_SHAPES)))](rng, yy, xx)
            contrast = rng.uniform(0.15, 0.35)
            texture = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), 1.5)
            img = np.where(region, bg + contrast + 0.03 * texture, img)
            labels[region] = k + 1
        frac = float((labels > 0).mean())
        if MASK_FRACTION_RANGE[0] <= frac <= MASK_FRACTION_RANGE[1]:
            img = ndimage.gaussian_filter(img, 0.6, mode="reflect")
            return np.clip(img, 0.0, 1.0), labels
    raise RuntimeError("synthetic shape sampler failed to hit the mask-fraction range")


def make_synthetic_corpus(seed: int, count: int, size: int = 64) -> Corpus:
    """Deterministic corpus: image ``k`` depends only on ``(seed, k, size)``."""
    if count < 1:
        raise ConfigurationError(f"corpus needs at least one image, got count={count}")
    if size < 16 or size % 16:
        raise ConfigurationError(f"image size must be a positive multiple of 16, got {size}")
    children = np.random.SeedSequence(int(seed)).spawn(int(count))
    images = np.empty((count, size, size), dtype=np.float64)
    masks = np.empty((count, size, size), dtype=np.int16)
    for k, child in enumerate(children):
        images[k], masks[k] = _one_image(np.random.default_rng(child), size)
    return Corpus(images, masks)
