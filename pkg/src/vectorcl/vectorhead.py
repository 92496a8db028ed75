"""Attention-to-vector mapping: offset template, VEU, and grouped mixture of vectors."""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericDomainError, ShapeError

TauRule = Union[None, float, Callable[[int], float]]


@dataclasses.dataclass(frozen=True)
class VectorTemplate:
    """``offsets[n, m] = (n - N // 2, m - N // 2)`` as a read-only (N, N, 2) array."""

    N: int
    offsets: np.ndarray

    def as_tensor(self, dtype=torch.float64, device=None) -> torch.Tensor:
        return torch.tensor(self.offsets, dtype=dtype, device=device)

    @property
    def max_offset(self) -> int:
        return self.N // 2


@dataclasses.dataclass(frozen=True)
class AttentionMap:
    weights: torch.Tensor
    tau: float


def make_template(N: int) -> VectorTemplate:
    if not isinstance(N, (int, np.integer)) or N < 3 or N % 2 == 0:
        raise ConfigurationError(f"template side must be an odd integer >= 3, got {N!r}")
    r = N // 2
    grid = np.arange(N) - r
    offsets = np.stack(np.meshgrid(grid, grid, indexing="ij"), axis=-1).astype(np.float64)
    offsets.setflags(write=False)
    return VectorTemplate(int(N), offsets)


def tau_default(c_group: int) -> float:
    if c_group < 1:
        raise ConfigurationError(f"group channel count must be >= 1, got {c_group}")
    return math.sqrt(c_group)


def resolve_tau(tau_rule: TauRule, c_group: int) -> float:
    if tau_rule is None:
        tau = tau_default(c_group)
    elif callable(tau_rule):
        tau = float(tau_rule(c_group))
    else:
        tau = float(tau_rule)
    if not tau > 0:
        raise ConfigurationError(f"scaling factor tau must be positive, got {tau}")
    return tau


def veu(
    center_feat: torch.Tensor, field_feats: torch.Tensor, template: VectorTemplate, tau: float
) -> Tuple[torch.Tensor, AttentionMap]:
    """Vector for one pixel: ``softmax(<center, field> / tau)`` weighted template offsets.

    ``center_feat`` has shape (C,), ``field_feats`` (N, N, C).
    """
    if not tau > 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    N = template.N
    if field_feats.shape[:2] != (N, N) or field_feats.shape[-1] != center_feat.shape[-1]:
        raise ShapeError(f"field {tuple(field_feats.shape)} does not match a {N}x{N} window of C={center_feat.shape[-1]}")
    if torch.isnan(center_feat).any() or torch.isnan(field_feats).any():
        raise NumericDomainError("NaN in features passed to the vector embedding unit")
    logits = (field_feats @ center_feat) / tau
    weights = torch.softmax(logits.reshape(-1), dim=0)
    vec = template_mix(weights, template)
    weights = weights.reshape(N, N)
    return vec, AttentionMap(weights, float(tau))


def template_mix(weights: torch.Tensor, template: VectorTemplate) -> torch.Tensor:
    """``weights @ offsets`` over the last (N * N) axis, returned with a trailing 2-axis.

    Offsets are odd under point reflection (k -> K-1-k), so the sum is taken
    over mirrored pairs ``(w_k - w_mirror) * o_k``. Symmetric weights then
    cancel exactly, and the convex-combination bound ``|v| <= N // 2`` is
    enforced against rounding.
    """
    K = template.N * template.N
    half = K // 2
    offsets = template.as_tensor(weights.dtype, weights.device).reshape(K, 2)[:half]
    diff = weights[..., :half] - weights[..., K - half :].flip(-1)
    r = float(template.max_offset)
    return (diff @ offsets).clamp(-r, r)


def window_dots(center: torch.Tensor, field: torch.Tensor, N: int, J: int = 1) -> torch.Tensor:
    """Grouped dot products between each center pixel and its N x N field window.

    ``center`` and ``field`` are (B, C, H, W); the field is zero-padded. The
    result is (B, J, H, W, N * N), window entries in template (row-major) order.
    """
    B, C, H, W = center.shape
    r = N // 2
    cg = C // J
    xa = center.reshape(B, J, cg, H, W).permute(0, 1, 3, 4, 2)
    padded = F.pad(field, (r, r, r, r)).reshape(B, J, cg, H + 2 * r, W + 2 * r)
    yb = padded.permute(0, 1, 3, 4, 2)
    # one GEMM per window row, then pick the N diagonals that are real offsets
    idx = (torch.arange(W, device=center.device).view(W, 1) + torch.arange(N, device=center.device).view(1, N))
    idx = idx.expand(B, J, H, W, N)
    rows = []
    for n in range(N):
        full = xa @ yb[:, :, n : n + H].transpose(-1, -2)
        rows.append(torch.gather(full, 4, idx))
    return torch.stack(rows, dim=4).reshape(B, J, H, W, N * N)


def mov(
    f_a: torch.Tensor,
    f_b: torch.Tensor,
    J: int,
    N: int,
    tau_rule: TauRule = None,
    return_attention: bool = False,
):
    """Mixture of vectors: grouped VEU at every pixel, averaged over groups.

    ``f_a`` supplies the center features, ``f_b`` the zero-padded N x N field.
    Returns a (B, 2, H, W) field in this level's pixel units (and the
    (B, J, H, W, N * N) attention weights if requested).
    """
    squeeze = f_a.dim() == 3
    if squeeze:
        f_a, f_b = f_a.unsqueeze(0), f_b.unsqueeze(0)
    if f_a.shape != f_b.shape or f_a.dim() != 4:
        raise ShapeError(f"feature maps differ in shape: {tuple(f_a.shape)} vs {tuple(f_b.shape)}")
    B, C, H, W = f_a.shape
    if J < 1 or C % J:
        raise ConfigurationError(f"{C} channels cannot be split into {J} groups")
    template = make_template(N)
    if N // 2 > min(H, W):
        raise ConfigurationError(f"window {N} reaches past a whole {H}x{W} grid on each side")
    if torch.isnan(f_a).any() or torch.isnan(f_b).any():
        raise NumericDomainError("NaN in features passed to the mixture of vectors")
    tau = resolve_tau(tau_rule, C // J)
    weights = torch.softmax(window_dots(f_a, f_b, N, J) / tau, dim=-1)
    vec = template_mix(weights, template)  # B J H W 2
    field = vec.mean(dim=1).permute(0, 3, 1, 2)
    if squeeze:
        field = field[0]
        weights = weights[0]
    return (field, AttentionMap(weights, tau)) if return_attention else field
