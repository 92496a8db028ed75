"""Synthetic view generation: affine DVFs, validity masks, warping, appearance.

Coordinate convention: channel 0 of a displacement field is the row offset
(``x`` in the affine matrix, spanning ``[0, H)``) and channel 1 the column
offset (``y``, spanning ``[0, W)``). Affine maps act about pixel ``(0, 0)``.

Grids are torch tensors shaped ``(B, C, H, W)`` or ``(C, H, W)``; the
appearance transform works on numpy images because it leans on scipy.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional, Tuple

import numpy as np
import torch
from scipy import ndimage

from .errors import MatrixDomainError, ParameterDomainError, ShapeError

Range = Tuple[float, float]


@dataclasses.dataclass(frozen=True)
class AffineParams:
    t_x: float = 0.0
    t_y: float = 0.0
    theta: float = 0.0
    sh_x: float = 0.0
    sh_y: float = 0.0
    s_x: float = 1.0
    s_y: float = 1.0
    dim: int = 2

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls()


@dataclasses.dataclass(frozen=True)
class AffineRanges:
    """Sampling bounds for :func:`sample_affine` (low, high) per parameter."""

    translation: Range = (-0.2, 0.2)
    rotation: Range = (-math.pi / 9, math.pi / 9)
    shear: Range = (-math.pi / 32, math.pi / 32)
    scale: Range = (0.5, 1.5)

    @classmethod
    def identity(cls) -> "AffineRanges":
        return cls((0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (1.0, 1.0))

    def validate(self) -> None:
        for name in ("translation", "rotation", "shear", "scale"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ParameterDomainError(f"{name} range must satisfy low <= high, got ({lo}, {hi})")


@dataclasses.dataclass(frozen=True)
class AppearanceConfig:
    noise_sigma_max: float = 0.02
    blur_sigma_max: float = 0.05
    contrast_range: Range = (0.5, 1.5)
    brightness_sigma_max: float = 0.1
    inpaint_box_count_range: Tuple[int, int] = (1, 3)
    inpaint_box_size_range: Range = (0.05, 0.15)
    apply_probability: float = 0.9

    def validate(self) -> None:
        scalars = (self.noise_sigma_max, self.blur_sigma_max, self.brightness_sigma_max)
        bounds = (*self.contrast_range, *self.inpaint_box_count_range, *self.inpaint_box_size_range)
        if min(scalars + bounds) < 0:
            raise ParameterDomainError("appearance bounds must be nonnegative")
        for lo, hi in (self.contrast_range, self.inpaint_box_count_range, self.inpaint_box_size_range):
            if lo > hi:
                raise ParameterDomainError(f"appearance range ({lo}, {hi}) is inverted")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ParameterDomainError("apply_probability must lie in [0, 1]")

    @classmethod
    def disabled(cls) -> "AppearanceConfig":
        return cls(apply_probability=0.0)


def sample_affine(rng: np.random.Generator, ranges: AffineRanges = AffineRanges()) -> AffineParams:
    """Draw every affine parameter uniformly from its range.

    Draw order is fixed (t_x, t_y, theta, sh_x, sh_y, s_x, s_y) so a seeded
    generator always yields the same parameters.
    """
    ranges.validate()
    t_x, t_y = rng.uniform(*ranges.translation, size=2)
    theta = rng.uniform(*ranges.rotation)
    sh_x, sh_y = rng.uniform(*ranges.shear, size=2)
    s_x, s_y = rng.uniform(*ranges.scale, size=2)
    return AffineParams(float(t_x), float(t_y), float(theta), float(sh_x), float(sh_y), float(s_x), float(s_y))


def affine_matrix(p: AffineParams, H: int, W: int) -> np.ndarray:
    """Homogeneous 3x3 matrix Translation @ Rotation @ Shearing @ Scaling.

    Entries are the expanded product; translation is ``(t_x * H, t_y * W)``.
    """
    c, s = math.cos(p.theta), math.sin(p.theta)
    return np.array(
        [
            [p.s_x * (c - s * p.sh_y), p.s_y * (c * p.sh_x - s), p.t_x * H],
            [p.s_x * (s + c * p.sh_y), p.s_y * (s * p.sh_x + c), p.t_y * W],
            [0.0, 0.0, 1.0],
        ],
        dtype=np.float64,
    )


def pixel_grid(H: int, W: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """Corner-origin coordinates, shape ``(2, H, W)``: rows then columns."""
    rows = torch.arange(H, dtype=dtype, device=device).view(H, 1).expand(H, W)
    cols = torch.arange(W, dtype=dtype, device=device).view(1, W).expand(H, W)
    return torch.stack([rows, cols])


def dvf_from_affine(m: np.ndarray, H: int, W: int, dtype=torch.float64) -> torch.Tensor:
    """Displacement ``m @ p - p`` at every pixel, shape ``(2, H, W)``."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.array_equal(m[2], [0.0, 0.0, 1.0]):
        raise MatrixDomainError(f"expected a 3x3 affine matrix with bottom row (0, 0, 1), got {m.tolist()}")
    p = pixel_grid(H, W, dtype=torch.float64)
    px, py = p[0], p[1]
    vx = (m[0, 0] - 1.0) * px + m[0, 1] * py + m[0, 2]
    vy = m[1, 0] * px + (m[1, 1] - 1.0) * py + m[1, 2]
    return torch.stack([vx, vy]).to(dtype)


def _as_batched(t: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if t.dim() == 3:
        return t.unsqueeze(0), True
    if t.dim() == 4:
        return t, False
    raise ShapeError(f"expected a (C, H, W) or (B, C, H, W) grid, got shape {tuple(t.shape)}")


def bilinear_sample(g: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor, fill: float = 0.0) -> torch.Tensor:
    """Sample ``g`` (B, C, H, W) at fractional positions ``rows``/``cols`` (B, H', W').

    Taps falling outside the grid take the value ``fill``.
    """
    B, C, H, W = g.shape
    out_shape = rows.shape[1:]
    r0 = torch.floor(rows)
    c0 = torch.floor(cols)
    wr = rows - r0
    wc = cols - c0
    r0 = r0.long()
    c0 = c0.long()
    flat = g.reshape(B, C, H * W)
    acc = torch.zeros((B, C) + tuple(out_shape), dtype=g.dtype, device=g.device)
    wsum = torch.zeros((B,) + tuple(out_shape), dtype=g.dtype, device=g.device)
    for dr, dc, w in (
        (0, 0, (1 - wr) * (1 - wc)),
        (1, 0, wr * (1 - wc)),
        (0, 1, (1 - wr) * wc),
        (1, 1, wr * wc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        valid = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
        idx = (rr.clamp(0, H - 1) * W + cc.clamp(0, W - 1)).reshape(B, 1, -1).expand(B, C, -1)
        vals = torch.gather(flat, 2, idx).reshape((B, C) + tuple(out_shape))
        wv = torch.where(valid, w, torch.zeros_like(w))
        acc = acc + wv.unsqueeze(1) * vals
        wsum = wsum + wv
    if fill != 0.0:
        acc = acc + fill * (1 - wsum).unsqueeze(1)
    return acc


def warp(g: torch.Tensor, psi: torch.Tensor, fill: float = 0.0) -> torch.Tensor:
    """Backward-warp ``g`` by ``psi``: ``out(p) = g(p + psi(p))`` (bilinear).

    Differentiable with respect to both ``g`` and ``psi``.
    """
    gb, squeeze = _as_batched(g)
    pb, _ = _as_batched(psi)
    if pb.shape[1] != 2:
        raise ShapeError(f"displacement field needs 2 channels, got {pb.shape[1]}")
    if pb.shape[-2:] != gb.shape[-2:]:
        raise ShapeError(f"grid {tuple(gb.shape[-2:])} and field {tuple(pb.shape[-2:])} differ in size")
    if pb.shape[0] != gb.shape[0]:
        if pb.shape[0] == 1:
            pb = pb.expand(gb.shape[0], -1, -1, -1)
        elif gb.shape[0] == 1:
            gb = gb.expand(pb.shape[0], -1, -1, -1)
        else:
            raise ShapeError(f"batch sizes {gb.shape[0]} and {pb.shape[0]} are incompatible")
    H, W = gb.shape[-2:]
    base = pixel_grid(H, W, dtype=pb.dtype, device=pb.device)
    out = bilinear_sample(gb, base[0] + pb[:, 0], base[1] + pb[:, 1], fill)
    return out[0] if squeeze else out


def validity_mask(psi: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """1 where ``p + psi(p)`` stays inside ``[0, H) x [0, W)``, else 0.

    Returns shape ``(1, H, W)`` or ``(B, 1, H, W)`` matching ``psi``.
    """
    pb, squeeze = _as_batched(psi)
    if pb.shape[1] != 2 or tuple(pb.shape[-2:]) != (H, W):
        raise ShapeError(f"field of shape {tuple(psi.shape)} does not live on a {H}x{W} grid")
    base = pixel_grid(H, W, dtype=pb.dtype, device=pb.device)
    r = base[0] + pb[:, 0]
    c = base[1] + pb[:, 1]
    mask = ((r >= 0) & (r < H) & (c >= 0) & (c < W)).to(pb.dtype).unsqueeze(1)
    return mask[0] if squeeze else mask


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur, kernel radius ceil(3 sigma), reflect padding."""
    radius = int(math.ceil(3.0 * sigma))
    if sigma <= 0 or radius == 0:
        return img.copy()
    return ndimage.gaussian_filter(img, sigma=sigma, mode="reflect", radius=radius)


def appearance_transform(
    img: np.ndarray,
    rng: np.random.Generator,
    cfg: AppearanceConfig = AppearanceConfig(),
    return_params: bool = False,
):
    """Noise, blur, contrast, brightness and in-painting, each toggled independently.

    Each sub-operation fires with probability ``cfg.apply_probability``; the
    result is clamped to ``[0, 1]``. With ``return_params`` the drawn values
    are returned alongside the image.
    """
    cfg.validate()
    x = np.asarray(img, dtype=np.float64)
    squeeze = False
    if x.ndim == 3:
        if x.shape[0] != 1:
            raise ShapeError(f"appearance transform expects one channel, got {x.shape[0]}")
        x, squeeze = x[0], True
    elif x.ndim != 2:
        raise ShapeError(f"expected an (H, W) or (1, H, W) image, got shape {x.shape}")
    x = x.copy()
    H, W = x.shape
    p = cfg.apply_probability
    params: dict = {}

    if rng.random() < p:
        sigma = rng.uniform(0.0, cfg.noise_sigma_max)
        x = x + rng.normal(0.0, 1.0, size=x.shape) * sigma
        params["noise_sigma"] = sigma
    if rng.random() < p:
        sigma = rng.uniform(0.0, cfg.blur_sigma_max)
        x = gaussian_blur(x, sigma)
        params["blur_sigma"] = sigma
    if rng.random() < p:
        gamma = rng.uniform(*cfg.contrast_range)
        mean = x.mean()
        x = (x - mean) * gamma + mean
        params["contrast_gamma"] = gamma
    if rng.random() < p:
        sigma = rng.uniform(0.0, cfg.brightness_sigma_max)
        beta = rng.normal(0.0, sigma) if sigma > 0 else 0.0
        x = x + beta
        params["brightness_beta"] = beta
    if rng.random() < p:
        lo, hi = cfg.inpaint_box_count_range
        boxes = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            bh = max(1, int(round(rng.uniform(*cfg.inpaint_box_size_range) * H)))
            bw = max(1, int(round(rng.uniform(*cfg.inpaint_box_size_range) * W)))
            r = int(rng.integers(0, H - bh + 1))
            c = int(rng.integers(0, W - bw + 1))
            x[r : r + bh, c : c + bw] = rng.uniform(0.0, 1.0, size=(bh, bw))
            boxes.append((r, c, bh, bw))
        params["inpaint_boxes"] = boxes

    x = np.clip(x, 0.0, 1.0)
    if squeeze:
        x = x[None]
    return (x, params) if return_params else x


def make_view_pair(
    img: np.ndarray,
    rng: np.random.Generator,
    appearance: AppearanceConfig = AppearanceConfig(),
    ranges: AffineRanges = AffineRanges(),
    max_retries: int = 8,
    dtype=torch.float64,
) -> Optional[Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]]:
    """Build ``(x_a, x_b, psi, mask)`` from one image; ``None`` if every draw is degenerate.

    ``x_a`` gets the appearance transform, ``x_b`` the spatial one. Affine
    parameters are redrawn (up to ``max_retries`` extra times) while the
    resulting mask is empty.
    """
    H, W = img.shape[-2:]
    x_a = torch.as_tensor(appearance_transform(img, rng, appearance), dtype=dtype).reshape(1, H, W)
    x = torch.as_tensor(np.asarray(img, dtype=np.float64), dtype=dtype).reshape(1, H, W)
    for _ in range(max_retries + 1):
        params = sample_affine(rng, ranges)
        psi = dvf_from_affine(affine_matrix(params, H, W), H, W, dtype=dtype)
        mask = validity_mask(psi, H, W)
        if mask.sum() > 0:
            return x_a, warp(x, psi), psi, mask
    return None
