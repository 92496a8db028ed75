"""Coarse-to-fine chaining of the mixture of vectors across pyramid levels."""

from __future__ import annotations

import dataclasses
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError
from .geometry import warp
from .vectorhead import TauRule, mov


@dataclasses.dataclass(frozen=True)
class HeadConfig:
    """Per-level window side ``N``, group count ``J`` and optional tau override."""

    N: Tuple[int, ...] = (7, 7, 7, 7, 7)
    J: Tuple[int, ...] = (4, 4, 4, 1, 1)
    tau: Optional[float] = None

    def __post_init__(self):
        if len(self.N) != len(self.J):
            raise ConfigurationError(f"N plan {self.N} and J plan {self.J} differ in length")

    @property
    def levels(self) -> int:
        return len(self.N)

    def tau_rule(self) -> TauRule:
        return self.tau


def upsample_double(psi_coarse: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Bilinear (half-pixel centers) upsample to H x W, then double every vector."""
    squeeze = psi_coarse.dim() == 3
    p = psi_coarse.unsqueeze(0) if squeeze else psi_coarse
    h, w = p.shape[-2:]
    if (H, W) != (2 * h, 2 * w):
        raise ShapeError(f"cannot upsample a {h}x{w} field to {H}x{W}; expected {2 * h}x{2 * w}")
    out = 2.0 * F.interpolate(p, size=(H, W), mode="bilinear", align_corners=False)
    return out[0] if squeeze else out


def fuse(psi_fine: torch.Tensor, psi_coarse: torch.Tensor) -> torch.Tensor:
    """``psi_fine + warp(upsample_double(psi_coarse), psi_fine)``."""
    H, W = psi_fine.shape[-2:]
    h, w = psi_coarse.shape[-2:]
    if (H, W) != (2 * h, 2 * w):
        raise ShapeError(f"coarse field {h}x{w} is not one level below fine field {H}x{W}")
    return psi_fine + warp(upsample_double(psi_coarse, H, W), psi_fine)


def vpa(
    F_a: Sequence[torch.Tensor], F_b: Sequence[torch.Tensor], cfg: HeadConfig = HeadConfig()
) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """Chain the mixture of vectors from the coarsest to the finest level.

    Returned fields follow the ``warp`` convention: ``warp(f_a, psi)`` is
    aligned with ``f_b``. Each level therefore queries with the ``f_b`` pixel
    and searches the (pre-aligned) ``f_a`` window, so the residual composes
    exactly with the coarser estimate under :func:`fuse`.
    """
    if len(F_a) != len(F_b):
        raise ShapeError(f"pyramids have {len(F_a)} and {len(F_b)} levels")
    if len(F_a) != cfg.levels:
        raise ConfigurationError(f"head config covers {cfg.levels} levels, pyramid has {len(F_a)}")
    tau = cfg.tau_rule()
    fields: List[torch.Tensor] = []
    psi = mov(F_b[0], F_a[0], cfg.J[0], cfg.N[0], tau)
    fields.append(psi)
    for level in range(1, cfg.levels):
        f_a, f_b = F_a[level], F_b[level]
        H, W = f_a.shape[-2:]
        aligned = warp(f_a, upsample_double(psi, H, W))
        residual = mov(f_b, aligned, cfg.J[level], cfg.N[level], tau)
        psi = fuse(residual, psi)
        fields.append(psi)
    return psi, fields


def receptive_bound(N: Sequence[int]) -> float:
    """Largest vector component the chain can emit, in finest-level pixels."""
    L = len(N) - 1
    return float(sum(2 ** (L - level) * (n // 2) for level, n in enumerate(N)))


def vpa_receptive_field(N: Sequence[int]) -> int:
    """Side of the whole receptive field covered by the chain at the finest level."""
    return int(2 * receptive_bound(N) + 1)
