"""Local dispersion of features, FLOP accounting, alignment error and the linear probe."""

from __future__ import annotations

import dataclasses
import math
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import BackboneParams, forward, init_backbone
from .errors import ConfigurationError, DegenerateTransformError, ShapeError
from .geometry import AffineRanges, AppearanceConfig, make_view_pair
from .pyramid import HeadConfig, vpa
from .vectorhead import tau_default


# --- dispersion ------------------------------------------------------------


@dataclasses.dataclass
class DispersionReport:
    delta_per_pixel: torch.Tensor  # (B, H, W) spread of neighbour dot products
    delta_from_alpha: torch.Tensor  # (B, H, W) same spread via tau * log-ratio of softmax weights
    delta_max: float
    alpha_min: float  # may underflow to 0 for very sharp windows; log_alpha_min stays finite
    log_alpha_min: float
    tau: float
    radius: int
    feature_range: float

    @property
    def bound_value(self) -> float:
        """``tau * log(1 / alpha_min)``."""
        return -self.tau * self.log_alpha_min

    @property
    def bound_holds(self) -> bool:
        """``delta_max <= tau * log(1 / alpha_min)``, compared after dividing by tau.

        In that scale both sides come from the same rounded ``delta / tau``, so the
        comparison is exact; multiplying back by tau can lose the last ulp.
        """
        return self.delta_max / self.tau <= -self.log_alpha_min


@dataclasses.dataclass
class BoundRecord:
    delta_max: float
    bound_value: float
    holds: bool
    feature_range: float
    dispersion_ratio: float
    identity_rel_error: float

    def as_record(self) -> Dict[str, float]:
        return dataclasses.asdict(self)


def neighbour_dots(features: torch.Tensor, radius: int):
    """Dots ``<f_i, f_j>`` for every in-grid j with ``|i - j|_inf <= radius``.

    Returns ``(dots, inside)`` of shape (B, H, W, K) with K = (2r+1)^2; entries
    whose neighbour falls off the grid are flagged False in ``inside``.
    """
    B, C, H, W = features.shape
    r = radius
    padded = F.pad(features, (r, r, r, r))
    ones = F.pad(torch.ones(1, 1, H, W, dtype=torch.bool), (r, r, r, r))
    dots, inside = [], []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = padded[:, :, r + dy : r + dy + H, r + dx : r + dx + W]
            dots.append((features * shifted).sum(dim=1))
            inside.append(ones[:, 0, r + dy : r + dy + H, r + dx : r + dx + W].expand(B, H, W))
    return torch.stack(dots, dim=-1), torch.stack(inside, dim=-1)


def dispersion_delta(features: torch.Tensor, radius: int = 3, tau: Optional[float] = None) -> DispersionReport:
    """Per-pixel spread ``max_{j,k} |<f_i,f_j> - <f_i,f_k>|`` over the in-grid neighbourhood.

    ``tau`` defaults to ``sqrt(C)``, the attention temperature of a single-group
    head on these features. The softmax weights are taken over the same
    in-grid neighbourhood.
    """
    if radius < 1:
        raise ConfigurationError(f"neighbourhood radius must be >= 1, got {radius}")
    if features.dim() == 3:
        features = features.unsqueeze(0)
    if features.dim() != 4:
        raise ShapeError(f"expected (C, H, W) or (B, C, H, W) features, got {tuple(features.shape)}")
    features = features.detach().to(torch.float64)
    tau = float(tau) if tau is not None else tau_default(features.shape[1])
    if not tau > 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    dots, inside = neighbour_dots(features, radius)
    big = torch.finfo(dots.dtype).max
    hi = torch.where(inside, dots, torch.full_like(dots, -big)).amax(dim=-1)
    lo = torch.where(inside, dots, torch.full_like(dots, big)).amin(dim=-1)
    delta = hi - lo

    # identity side: log-softmax weights over the in-grid window
    logits = torch.where(inside, dots / tau, torch.full_like(dots, -math.inf))
    log_alpha = torch.log_softmax(logits, dim=-1)
    la_hi = torch.where(inside, log_alpha, torch.full_like(dots, -math.inf)).amax(dim=-1)
    la_lo = torch.where(inside, log_alpha, torch.full_like(dots, math.inf)).amin(dim=-1)
    delta_alpha = tau * (la_hi - la_lo)
    # bound side: -log(alpha_min(i)) = delta(i) / tau + log(sum_j exp((d_j - max d) / tau)); the second
    # term is >= 0 in floating point because the sum contains exp(0) = 1
    shifted = torch.where(inside, (dots - hi.unsqueeze(-1)) / tau, torch.full_like(dots, -math.inf))
    neg_log_alpha_min = delta / tau + torch.log(torch.exp(shifted).sum(dim=-1))
    log_alpha_min = -float(neg_log_alpha_min.max())
    return DispersionReport(
        delta_per_pixel=delta,
        delta_from_alpha=delta_alpha,
        delta_max=float(delta.max()),
        alpha_min=math.exp(log_alpha_min),
        log_alpha_min=log_alpha_min,
        tau=tau,
        radius=radius,
        feature_range=float(dots[inside].max() - dots[inside].min()),
    )


def bound_report(report: DispersionReport) -> BoundRecord:
    """Compare ``delta_max`` with ``tau * log(1 / alpha_min)``; report ``delta_max / Delta``."""
    d, da = report.delta_per_pixel, report.delta_from_alpha
    scale = torch.clamp_min(d.abs(), 1e-300)
    nonzero = d > 0
    rel = float(((d - da).abs() / scale)[nonzero].max()) if nonzero.any() else float((d - da).abs().max())
    ratio = report.delta_max / report.feature_range if report.feature_range > 0 else 0.0
    return BoundRecord(
        delta_max=report.delta_max,
        bound_value=report.bound_value,
        holds=report.bound_holds,
        feature_range=report.feature_range,
        dispersion_ratio=ratio,
        identity_rel_error=rel,
    )


# --- alignment -------------------------------------------------------------


def endpoint_error(psi_pred: torch.Tensor, psi_gt: torch.Tensor, mask: torch.Tensor) -> float:
    """Mean Euclidean norm of ``psi_pred - psi_gt`` over valid pixels."""
    if psi_pred.shape != psi_gt.shape:
        raise ShapeError(f"fields differ in shape: {tuple(psi_pred.shape)} vs {tuple(psi_gt.shape)}")
    count = float(mask.sum())
    if count <= 0:
        raise DegenerateTransformError("endpoint error over an empty mask")
    norm = torch.sqrt(((psi_pred - psi_gt) ** 2).sum(dim=-3, keepdim=True))
    return float((norm * mask).sum() / count)


@dataclasses.dataclass
class AlignmentReport:
    epe_pred: float
    epe_zero: float
    pairs: int


def draw_pairs(images: np.ndarray, count: int, seed: int, appearance=AppearanceConfig(), ranges=AffineRanges(), dtype=torch.float64):
    """``count`` deterministic view pairs from ``images`` (cycled in order)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7E]))
    pairs = []
    for k in range(count):
        pair = make_view_pair(images[k % len(images)], rng, appearance, ranges, dtype=dtype)
        if pair is None:
            raise DegenerateTransformError("could not draw a view pair with a nonempty mask")
        pairs.append(pair)
    return tuple(torch.stack(t) for t in zip(*pairs))


@torch.no_grad()
def predict_field(params: BackboneParams, x_a: torch.Tensor, x_b: torch.Tensor, head: HeadConfig = HeadConfig()):
    dtype = params.dtype
    B = x_a.shape[0]
    feats = forward(params, torch.cat([x_a, x_b]).to(dtype))
    return vpa([f[:B] for f in feats], [f[B:] for f in feats], head)


@torch.no_grad()
def evaluate_alignment(
    params: BackboneParams,
    images: np.ndarray,
    count: int = 32,
    seed: int = 1,
    head: HeadConfig = HeadConfig(),
    appearance=AppearanceConfig(),
    ranges=AffineRanges(),
    chunk: int = 8,
) -> AlignmentReport:
    """Held-out EPE of the predicted field vs the zero-field predictor on the same pairs."""
    x_a, x_b, psi, mask = draw_pairs(images, count, seed, appearance, ranges, params.dtype)
    num_pred = num_zero = den = 0.0
    for s in range(0, count, chunk):
        sl = slice(s, s + chunk)
        pred, _ = predict_field(params, x_a[sl], x_b[sl], head)
        m = mask[sl]
        n = float(m.sum())
        num_pred += endpoint_error(pred, psi[sl], m) * n
        num_zero += endpoint_error(torch.zeros_like(psi[sl]), psi[sl], m) * n
        den += n
    return AlignmentReport(num_pred / den, num_zero / den, count)


# --- FLOPs -----------------------------------------------------------------


@dataclasses.dataclass
class FlopCount:
    mode: str
    per_level: List[int]
    dot_products: int
    weighting: int

    @property
    def total(self) -> int:
        return self.dot_products + self.weighting


def _as_plan(x, levels: int, what: str) -> List[int]:
    if isinstance(x, (int, np.integer)):
        return [int(x)] * levels
    x = [int(v) for v in x]
    if len(x) != levels:
        raise ConfigurationError(f"{what} plan {x} does not cover {levels} levels")
    return x


def flops_estimate(
    mode: str,
    N: Union[int, Sequence[int]] = 7,
    channels: Sequence[int] = (8, 16, 16, 32, 32),
    J: Sequence[int] = (4, 4, 4, 1, 1),
    size: Sequence[int] = (64, 64),
    rf: Optional[int] = None,
) -> FlopCount:
    """Window-attention multiply-adds for one image of ``size``.

    Per pixel and group: ``N^2 * c_group`` for the dot products plus ``2 N^2``
    for weighting the template. ``vpa`` sums over the pyramid (level ``l`` at
    ``size / 2^(L-l)``); ``direct`` runs one full-resolution pass with window
    side ``rf`` (or ``N`` if a single int is given) using the finest level's
    channels and groups.
    """
    channels = [int(c) for c in channels]
    levels = len(channels)
    groups = _as_plan(J, levels, "group")
    H, W = int(size[0]), int(size[1])
    for c, j in zip(channels, groups):
        if j < 1 or c % j:
            raise ConfigurationError(f"{c} channels cannot be split into {j} groups")
    if mode == "vpa":
        Ns = _as_plan(N, levels, "window")
        L = levels - 1
        dots = weight = 0
        per_level = []
        for level, (n, c, j) in enumerate(zip(Ns, channels, groups)):
            f = 2 ** (L - level)
            if H % f or W % f:
                raise ConfigurationError(f"size {H}x{W} is not divisible by {f}")
            pix = (H // f) * (W // f)
            d, w = pix * n * n * c, pix * 2 * n * n * j
            per_level.append(d + w)
            dots += d
            weight += w
        return FlopCount("vpa", per_level, dots, weight)
    if mode == "direct":
        n = rf if rf is not None else (N if isinstance(N, (int, np.integer)) else None)
        if n is None or n < 1:
            raise ConfigurationError("direct mode needs a single window side (rf)")
        c, j = channels[-1], groups[-1]
        d, w = H * W * n * n * c, H * W * 2 * n * n * j
        return FlopCount("direct", [d + w], d, w)
    raise ConfigurationError(f"unknown FLOP mode {mode!r}; expected 'vpa' or 'direct'")


# --- segmentation probe ----------------------------------------------------


def dice(pred, target) -> float:
    """``2|P & T| / (|P| + |T|)`` on boolean maps; 1.0 when both are empty."""
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(target, dtype=bool)
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / denom)


@dataclasses.dataclass
class ProbeConfig:
    steps: int = 300
    learning_rate: float = 1e-2
    train_fraction: float = 0.75
    dice_weight: float = 1.0


@dataclasses.dataclass
class ProbeRow:
    seed: int
    dice_pretrained: float
    dice_random: float


@torch.no_grad()
@torch.no_grad()
def frozen_features(params: BackboneParams, images: np.ndarray, chunk: int = 16) -> torch.Tensor:
    x = torch.as_tensor(images, dtype=params.dtype).unsqueeze(1)
    return torch.cat([forward(params, x[s : s + chunk])[-1] for s in range(0, len(x), chunk)])


def probe_dice(features: torch.Tensor, masks: np.ndarray, seed: int, config: ProbeConfig = ProbeConfig()) -> float:
    """Train a 1x1 linear foreground head on frozen features; mean test-image Dice."""
    if config.steps < 0:
        raise ConfigurationError("probe steps must be >= 0")
    n = features.shape[0]
    n_train = max(1, min(n - 1, int(round(config.train_fraction * n))))
    fg = torch.as_tensor(np.asarray(masks) > 0)
    x_tr, x_te = features[:n_train], features[n_train:]
    mean = x_tr.mean(dim=(0, 2, 3), keepdim=True)
    std = x_tr.std(dim=(0, 2, 3), keepdim=True).clamp_min(1e-8)
    x_tr, x_te = (x_tr - mean) / std, (x_te - mean) / std
    y_tr = fg[:n_train].long()

    gen = torch.Generator().manual_seed(int(seed))
    C = features.shape[1]
    weight = (torch.randn(2, C, generator=gen, dtype=features.dtype) / math.sqrt(C)).requires_grad_(True)
    bias = torch.zeros(2, dtype=features.dtype, requires_grad=True)
    opt = torch.optim.Adam([weight, bias], lr=config.learning_rate, foreach=False)

    def logits(x):
        return torch.einsum("kc,bchw->bkhw", weight, x) + bias.view(1, 2, 1, 1)

    for _ in range(config.steps):
        out = logits(x_tr)
        prob = torch.softmax(out, dim=1)[:, 1]
        target = y_tr.to(prob.dtype)
        soft = 1 - (2 * (prob * target).sum() + 1) / (prob.sum() + target.sum() + 1)
        loss = F.cross_entropy(out, y_tr) + config.dice_weight * soft
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = logits(x_te).argmax(dim=1).numpy().astype(bool)
    truth = fg[n_train:].numpy()
    return float(np.mean([dice(p, t) for p, t in zip(pred, truth)]))


def linear_probe(
    params: BackboneParams,
    images: np.ndarray,
    masks: np.ndarray,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    config: ProbeConfig = ProbeConfig(),
    groups: Sequence[int] = (4, 4, 4, 1, 1),
) -> List[ProbeRow]:
    """Per-seed test Dice of the probe on ``params`` vs a random-init backbone of the same plan.

    The random-init anchor for seed ``s`` is ``init_backbone(plan, seed=s)``;
    both sides share the head initialisation, data split and step budget.
    """
    if len(images) < 2:
        raise ConfigurationError("probe needs at least two images (train and test)")
    trained = frozen_features(params, images)
    rows = []
    for s in seeds:
        random_params = init_backbone(params.channel_plan, int(s), groups, dtype=params.dtype)
        rows.append(
            ProbeRow(
                int(s),
                probe_dice(trained, masks, s, config),
                probe_dice(frozen_features(random_params, images), masks, s, config),
            )
        )
    return rows
