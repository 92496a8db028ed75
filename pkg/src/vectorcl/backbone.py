"""Tiny U-Net style encoder-decoder emitting a five-level feature pyramid.

Levels are indexed coarse to fine: ``f[0]`` lives at ``H/16`` and ``f[4]`` at
full resolution. Parameters are a flat name -> tensor mapping so that the
forward pass stays a pure function of ``(params, x)``.
"""

from __future__ import annotations

import dataclasses
from collections import OrderedDict
from typing import Dict, List, Sequence, Tuple

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError

DEFAULT_CHANNEL_PLAN = (8, 16, 16, 32, 32)
DEFAULT_GROUPS = (4, 4, 4, 1, 1)
TINY_CHANNEL_PLAN = (4, 4, 4, 2, 2)  # for gradient checks
NUM_LEVELS = 5


@dataclasses.dataclass
class BackboneParams:
    tensors: "OrderedDict[str, torch.Tensor]"
    channel_plan: Tuple[int, ...]
    seed: int

    @property
    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def parameters(self) -> List[torch.Tensor]:
        return list(self.tensors.values())

    def requires_grad_(self, flag: bool = True) -> "BackboneParams":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def clone(self) -> "BackboneParams":
        return BackboneParams(
            OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items()), self.channel_plan, self.seed
        )

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype


def layer_shapes(channel_plan: Sequence[int]) -> "OrderedDict[str, Tuple[int, ...]]":
    """Weight and bias shapes of every layer, in parameter order."""
    c = list(channel_plan)
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()

    def conv(name, cout, cin, k):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    # encoder, fine to coarse; enc{l} produces level-l resolution
    conv("enc4", c[4], 1, 3)
    conv("enc3", c[3], c[4], 3)
    conv("enc2", c[2], c[3], 3)
    conv("enc1", c[1], c[2], 3)
    conv("enc0", c[0], c[1], 3)
    # decoder: upsampled coarser hidden state concatenated with the skip
    for level in (1, 2, 3):
        conv(f"dec{level}", c[level], c[level - 1] + c[level], 3)
    conv("dec4", c[4], c[3] + c[4], 1)
    for level in range(NUM_LEVELS):
        conv(f"proj{level}", c[level], c[level], 1)
    return shapes


def check_channel_plan(channel_plan: Sequence[int], groups: Sequence[int] = DEFAULT_GROUPS) -> None:
    if len(channel_plan) != NUM_LEVELS:
        raise ConfigurationError(f"channel plan needs {NUM_LEVELS} entries, got {len(channel_plan)}")
    if len(groups) != NUM_LEVELS:
        raise ConfigurationError(f"group plan needs {NUM_LEVELS} entries, got {len(groups)}")
    for level, (c, j) in enumerate(zip(channel_plan, groups)):
        if j < 1 or c < j or c % j:
            raise ConfigurationError(f"level {level}: {c} channels cannot be split into {j} equal groups")


def init_backbone(
    channel_plan: Sequence[int] = DEFAULT_CHANNEL_PLAN,
    seed: int = 0,
    groups: Sequence[int] = DEFAULT_GROUPS,
    dtype: torch.dtype = torch.float64,
) -> BackboneParams:
    """He-normal weights and zero biases drawn from a seeded generator."""
    check_channel_plan(channel_plan, groups)
    gen = torch.Generator().manual_seed(int(seed))
    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for name, shape in layer_shapes(channel_plan).items():
        if name.endswith(".bias"):
            tensors[name] = torch.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            w = torch.randn(shape, generator=gen, dtype=torch.float64) * (2.0 / fan_in) ** 0.5
            tensors[name] = w.to(dtype)
    return BackboneParams(tensors, tuple(int(c) for c in channel_plan), int(seed))


def _conv(params: Dict[str, torch.Tensor], name: str, x: torch.Tensor) -> torch.Tensor:
    w = params[f"{name}.weight"]
    return F.conv2d(x, w, params[f"{name}.bias"], padding=w.shape[-1] // 2)


def _up(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def forward(params: BackboneParams, x: torch.Tensor) -> List[torch.Tensor]:
    """Feature pyramid ``[f0, ..., f4]`` for a ``(B, 1, H, W)`` batch."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != 1:
        raise ShapeError(f"backbone expects single-channel (B, 1, H, W) input, got {tuple(x.shape)}")
    H, W = x.shape[-2:]
    if H % 16 or W % 16:
        raise ShapeError(f"input size {H}x{W} is not divisible by 16")
    p = params.tensors
    act = F.silu

    e4 = act(_conv(p, "enc4", x))
    e3 = act(_conv(p, "enc3", F.avg_pool2d(e4, 2)))
    e2 = act(_conv(p, "enc2", F.avg_pool2d(e3, 2)))
    e1 = act(_conv(p, "enc1", F.avg_pool2d(e2, 2)))
    h = act(_conv(p, "enc0", F.avg_pool2d(e1, 2)))

    hidden = [h]
    for level, skip in ((1, e1), (2, e2), (3, e3), (4, e4)):
        h = act(_conv(p, f"dec{level}", torch.cat([_up(h), skip], dim=1)))
        hidden.append(h)
    return [_conv(p, f"proj{level}", hidden[level]) for level in range(NUM_LEVELS)]
