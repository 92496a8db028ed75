"""Vector regression, feature consistency, and the pixel-wise InfoNCE reference."""

from __future__ import annotations

import dataclasses
from typing import Dict, Sequence

import numpy as np
import torch

from .errors import DegenerateTransformError, ShapeError
from .geometry import warp

EPS_NUM = 1e-8


@dataclasses.dataclass
class LossReport:
    l_vec: torch.Tensor
    l_con: torch.Tensor
    l_total: torch.Tensor
    valid_count: int

    @property
    def finite(self) -> Dict[str, bool]:
        return {k: bool(torch.isfinite(getattr(self, k))) for k in ("l_vec", "l_con", "l_total")}

    def as_record(self) -> Dict[str, float]:
        return {
            "l_vec": self.l_vec.item(),
            "l_con": self.l_con.item(),
            "l_total": self.l_total.item(),
            "valid_count": int(self.valid_count),
        }


def _valid_count(mask: torch.Tensor) -> torch.Tensor:
    count = mask.sum()
    if count <= 0:
        raise DegenerateTransformError(
            "validity mask is empty: the sampled transform moved all content off the grid"
        )
    return count


def vector_loss(psi_gt: torch.Tensor, psi_pred: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over valid pixels of the L1 norm of the vector error."""
    if psi_gt.shape != psi_pred.shape:
        raise ShapeError(f"fields differ in shape: {tuple(psi_gt.shape)} vs {tuple(psi_pred.shape)}")
    count = _valid_count(mask)
    err = (psi_gt - psi_pred).abs().sum(dim=-3, keepdim=True)
    return (err * mask).sum() / count


def cosine_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel cosine over the channel axis, denominators floored at ``EPS_NUM``."""
    dot = (a * b).sum(dim=-3, keepdim=True)
    sq = (a * a).sum(dim=-3, keepdim=True) * (b * b).sum(dim=-3, keepdim=True)
    return dot / torch.sqrt(sq.clamp_min(EPS_NUM**2))


def consistency_loss(
    f4_a: torch.Tensor, f4_b: torch.Tensor, psi_gt: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Negative cosine between ``warp(f4_a, psi_gt)`` and ``f4_b``, averaged over valid pixels."""
    if f4_a.shape != f4_b.shape:
        raise ShapeError(f"feature maps differ in shape: {tuple(f4_a.shape)} vs {tuple(f4_b.shape)}")
    count = _valid_count(mask)
    f_ab = warp(f4_a, psi_gt)
    return -(cosine_map(f_ab, f4_b) * mask).sum() / count


def cover_loss(
    psi_gt: torch.Tensor,
    psi_pred: torch.Tensor,
    f4_a: torch.Tensor,
    f4_b: torch.Tensor,
    mask: torch.Tensor,
) -> LossReport:
    l_vec = vector_loss(psi_gt, psi_pred, mask)
    l_con = consistency_loss(f4_a, f4_b, psi_gt, mask)
    return LossReport(l_vec, l_con, l_con + l_vec, int(mask.sum().item()))


def infonce_pixel_loss(
    f_anchor: torch.Tensor, f_pos: torch.Tensor, f_negs: Sequence[torch.Tensor], tau: float
) -> torch.Tensor:
    """``-log(e^{<a,p>/tau} / (e^{<a,p>/tau} + sum_j e^{<a,n_j>/tau}))`` via log-sum-exp."""
    negs = torch.stack(list(f_negs)) if not torch.is_tensor(f_negs) else f_negs
    if negs.dim() != 2 or negs.shape[0] < 1:
        raise ShapeError("need at least one negative feature vector")
    logits = torch.cat([(f_anchor * f_pos).sum().reshape(1), negs @ f_anchor]) / tau
    return torch.logsumexp(logits, dim=0) - logits[0]


def dense_infonce_loss(
    f4_a: torch.Tensor,
    f4_b: torch.Tensor,
    psi_gt: torch.Tensor,
    mask: torch.Tensor,
    rng: np.random.Generator,
    tau: float,
    num_samples: int = 256,
) -> torch.Tensor:
    """Binary dense contrast: same pixel across views is positive, other sampled pixels negative.

    Anchors are ``warp(f4_a, psi_gt)`` at ``num_samples`` valid pixels drawn
    across the batch; every other sampled ``f4_b`` pixel acts as a negative.
    """
    count = int(_valid_count(mask).item())
    f_ab = warp(f4_a, psi_gt)
    B, C, H, W = f_ab.shape
    valid = torch.nonzero(mask.reshape(-1) > 0).reshape(-1).numpy()
    k = min(num_samples, count)
    pick = torch.as_tensor(np.sort(rng.choice(valid, size=k, replace=False)))
    b_idx, pix = pick // (H * W), pick % (H * W)
    anchors = f_ab.reshape(B, C, H * W)[b_idx, :, pix]
    targets = f4_b.reshape(B, C, H * W)[b_idx, :, pix]
    logits = anchors @ targets.T / tau
    labels = torch.arange(k)
    return torch.nn.functional.cross_entropy(logits, labels)
