import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vectorcl.analysis import (
    ProbeConfig,
    bound_report,
    dice,
    dispersion_delta,
    endpoint_error,
    flops_estimate,
    linear_probe,
    probe_dice,
)
from vectorcl.backbone import TINY_CHANNEL_PLAN, init_backbone
from vectorcl.corpus import make_synthetic_corpus
from vectorcl.errors import ConfigurationError, DegenerateTransformError


def scalar_delta(f, r):
    C, H, W = f.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            d = [f[:, i, j] @ f[:, ii, jj] for ii in range(max(0, i - r), min(H, i + r + 1))
                 for jj in range(max(0, j - r), min(W, j + r + 1))]
            out[i, j] = max(d) - min(d)
    return out


def test_constant_map_zero():
    rep = dispersion_delta(torch.full((3, 6, 6), 0.4, dtype=torch.float64), radius=2)
    assert torch.count_nonzero(rep.delta_per_pixel) == 0 and rep.delta_max == 0.0


def test_two_region_boundary():
    f = torch.ones(1, 5, 6, dtype=torch.float64)
    f[0, :, 3:] = 3.0
    rep = dispersion_delta(f, radius=1)
    assert rep.delta_per_pixel[0, 2, 2].item() == 2.0
    assert rep.delta_per_pixel[0, 2, 0].item() == 0.0


def test_delta_matches_scalar_loop():
    f = np.random.default_rng(0).normal(size=(3, 7, 6))
    rep = dispersion_delta(torch.tensor(f), radius=2)
    np.testing.assert_allclose(rep.delta_per_pixel[0].numpy(), scalar_delta(f, 2), atol=1e-12, rtol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.floats(0.1, 10.0), st.floats(0.1, 5.0))
def test_log_ratio_identity_and_bound(seed, r, scale, tau):
    gen = torch.Generator().manual_seed(seed)
    f = torch.randn(2, 4, 8, 8, generator=gen, dtype=torch.float64) * scale
    rep = dispersion_delta(f, r, tau)
    b = bound_report(rep)
    assert b.identity_rel_error <= 1e-9
    assert b.holds
    # back in original units the product tau * log(1 / alpha_min) may round by one ulp
    assert rep.delta_max <= rep.bound_value * (1 + 2**-50)
    assert math.isfinite(rep.log_alpha_min) and 0 <= rep.alpha_min <= 1
    assert rep.log_alpha_min <= 0


def test_uniform_weights_bound():
    b = bound_report(dispersion_delta(torch.zeros(2, 4, 4, dtype=torch.float64), 1, tau=0.3))
    assert b.delta_max == 0.0 and b.holds


def test_two_atom_closed_form():
    # 1x2 grid with C=1 features (1, b): each window holds two dots; the widest gap is 1 - b
    gap = math.log(math.e - 1)
    f = torch.tensor([[[1.0, 1.0 - gap]]], dtype=torch.float64)
    rep = dispersion_delta(f, radius=1, tau=1.0)
    assert abs(rep.alpha_min - math.exp(-1)) < 1e-12
    assert abs(rep.bound_value - 1.0) < 1e-12
    assert rep.delta_max <= 1.0 and abs(rep.delta_max - gap) < 1e-12


def test_radius_validation():
    with pytest.raises(ConfigurationError):
        dispersion_delta(torch.zeros(1, 4, 4), radius=0)


def test_epe_values():
    gt = torch.randn(1, 2, 5, 5, dtype=torch.float64)
    m = torch.ones(1, 1, 5, 5, dtype=torch.float64)
    assert endpoint_error(gt, gt, m) == 0.0
    c = torch.stack([torch.full((5, 5), 3.0), torch.full((5, 5), 4.0)]).double()[None]
    assert endpoint_error(torch.zeros_like(c), c, m) == 5.0
    with pytest.raises(DegenerateTransformError):
        endpoint_error(gt, gt, torch.zeros_like(m))


def test_epe_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 6, 6))
    m = (rng.random((1, 6, 6)) > 0.4).astype(float)
    want = sum(math.hypot(a[0, i, j] - b[0, i, j], a[1, i, j] - b[1, i, j])
               for i in range(6) for j in range(6) if m[0, i, j]) / m.sum()
    assert abs(endpoint_error(torch.tensor(a), torch.tensor(b), torch.tensor(m)) - want) <= 1e-9


def test_flops_single_level_modes_agree():
    v = flops_estimate("vpa", [9], [32], [1], (64, 64))
    d = flops_estimate("direct", channels=[32], J=[1], size=(64, 64), rf=9)
    assert v.total == d.total == 64 * 64 * (81 * 32 + 2 * 81)


def test_flops_default_ratio_exact():
    v = flops_estimate("vpa")
    d = flops_estimate("direct", rf=121)
    per_level = [(s * s) * (49 * c + 2 * 49 * j) for s, c, j in zip((4, 8, 16, 32, 64), (8, 16, 16, 32, 32), (4, 4, 4, 1, 1))]
    assert v.per_level == per_level and v.total == sum(per_level)
    assert d.total == 64 * 64 * 121 * 121 * (32 + 2)
    assert d.total / v.total > 50


def test_flops_channel_linearity():
    a = flops_estimate("vpa", 7, (8, 16, 16, 32, 32))
    b = flops_estimate("vpa", 7, (16, 32, 32, 64, 64))
    assert b.dot_products == 2 * a.dot_products and b.weighting == a.weighting


def test_flops_monotone():
    base = flops_estimate("vpa", 5).total
    assert flops_estimate("vpa", 7).total > base
    assert flops_estimate("vpa", 5, (8, 16, 16, 32, 64)).total > base
    assert flops_estimate("vpa", 5, (8, 8, 16, 16, 32, 32), (4, 4, 4, 4, 1, 1)).total > base
    assert flops_estimate("direct", rf=61).total > flops_estimate("direct", rf=31).total
    with pytest.raises(ConfigurationError):
        flops_estimate("sparse")


def test_dice_definition():
    t = np.zeros((4, 4), bool)
    t[1:3, 1:3] = True
    assert dice(t, t) == 1.0
    assert dice(np.zeros_like(t), t) == 0.0
    p = np.zeros_like(t)
    p[1, 1:4] = True
    assert dice(p, t) == dice(t, p) == 2 * 2 / (3 + 4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dice_range_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((5, 5)) > 0.5, rng.random((5, 5)) > 0.7
    assert 0.0 <= dice(a, b) <= 1.0 and dice(a, b) == dice(b, a)


def test_probe_zero_steps_finite():
    c = make_synthetic_corpus(5, 8, 32)
    rows = linear_probe(init_backbone(TINY_CHANNEL_PLAN), c.images, c.masks, seeds=(0,), config=ProbeConfig(steps=0))
    assert math.isfinite(rows[0].dice_pretrained) and math.isfinite(rows[0].dice_random)


def test_probe_learns_on_oracle_features():
    # features that contain the mask itself are linearly separable: the probe must reach Dice ~1
    c = make_synthetic_corpus(6, 12, 32)
    fg = torch.as_tensor(c.foreground, dtype=torch.float64).unsqueeze(1)
    feats = torch.cat([fg, torch.randn_like(fg) * 0.1], dim=1)
    assert probe_dice(feats, c.masks, 0, ProbeConfig(steps=150, learning_rate=5e-2)) > 0.95
