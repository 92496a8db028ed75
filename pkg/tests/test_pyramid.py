import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vectorcl.errors import ConfigurationError, ShapeError
from vectorcl.pyramid import HeadConfig, fuse, receptive_bound, upsample_double, vpa, vpa_receptive_field
from vectorcl.vectorhead import mov


def scalar_upsample(a, H, W):
    """Half-pixel-center bilinear resize with edge clamping, one channel."""
    h, w = a.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            y = max((i + 0.5) * h / H - 0.5, 0.0)
            x = max((j + 0.5) * w / W - 0.5, 0.0)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            dy, dx = y - y0, x - x0
            out[i, j] = (a[y0, x0] * (1 - dy) * (1 - dx) + a[y1, x0] * dy * (1 - dx)
                         + a[y0, x1] * (1 - dy) * dx + a[y1, x1] * dy * dx)
    return out


def test_upsample_zero():
    assert torch.count_nonzero(upsample_double(torch.zeros(2, 4, 4), 8, 8)) == 0


def test_upsample_constant():
    psi = torch.zeros(2, 4, 4, dtype=torch.float64)
    psi[0] = 1.0
    out = upsample_double(psi, 8, 8)
    assert torch.all(out[0] == 2.0) and torch.all(out[1] == 0.0)


def test_upsample_ramp_matches_oracle():
    rows = np.arange(5.0).reshape(5, 1) * np.ones((1, 3))
    cols = np.ones((5, 1)) * np.arange(3.0).reshape(1, 3) * 0.7
    psi = torch.tensor(np.stack([rows, cols]))
    out = upsample_double(psi, 10, 6).numpy()
    for c in range(2):
        np.testing.assert_allclose(out[c], 2 * scalar_upsample(psi[c].numpy(), 10, 6), atol=1e-9, rtol=0)


def test_upsample_shape_error():
    with pytest.raises(ShapeError):
        upsample_double(torch.zeros(2, 4, 4), 9, 8)


def test_fuse_zero_coarse_exact():
    fine = torch.randn(1, 2, 8, 8, dtype=torch.float64)
    assert torch.equal(fuse(fine, torch.zeros(1, 2, 4, 4, dtype=torch.float64)), fine)


def test_fuse_zero_fine_exact():
    coarse = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    assert torch.equal(fuse(torch.zeros(1, 2, 8, 8, dtype=torch.float64), coarse), upsample_double(coarse, 8, 8))


def test_fuse_constant_translations():
    a = torch.tensor([1.25, -0.5], dtype=torch.float64)
    b = torch.tensor([0.75, 1.5], dtype=torch.float64)
    fine = a.view(1, 2, 1, 1).expand(1, 2, 16, 16).clone()
    coarse = b.view(1, 2, 1, 1).expand(1, 2, 8, 8).clone()
    out = fuse(fine, coarse)
    want = (a + 2 * b).view(2, 1, 1)
    # interior: sample points p + a stay inside the grid
    assert torch.allclose(out[0, :, 1:13, 1:14], want.expand(2, 12, 13), atol=1e-9, rtol=0)


def test_fuse_level_mismatch():
    with pytest.raises(ShapeError):
        fuse(torch.zeros(2, 8, 8), torch.zeros(2, 8, 8))


def pyramid(gen, B=1, sizes=(4, 8, 16), C=(4, 4, 2), scale=1.0):
    return [torch.randn(B, c, s, s, generator=gen, dtype=torch.float64) * scale for s, c in zip(sizes, C)]


LEVELS = tuple(zip((4, 8, 16, 32, 64), (8, 16, 16, 32, 32)))


def test_vpa_zero_features_zero_field():
    F = [torch.zeros(1, c, s, s, dtype=torch.float64) for s, c in LEVELS]
    final, fields = vpa(F, F, HeadConfig())
    assert torch.count_nonzero(final) == 0 and len(fields) == 5


def test_vpa_constant_features_antisymmetric():
    # zero-padded border windows pull vectors inward, so a nonzero constant map gives a
    # field that is odd under point reflection of the grid (zero only on average)
    F = [torch.full((1, c, s, s), 0.3, dtype=torch.float64) for s, c in LEVELS]
    final, _ = vpa(F, F, HeadConfig())
    assert torch.allclose(final, -final.flip(-1, -2), atol=1e-9, rtol=0)
    assert final.mean().abs() < 1e-9


def test_vpa_single_level_is_mov():
    gen = torch.Generator().manual_seed(0)
    a = torch.randn(1, 4, 8, 8, generator=gen, dtype=torch.float64)
    b = torch.randn(1, 4, 8, 8, generator=gen, dtype=torch.float64)
    final, fields = vpa([a], [b], HeadConfig(N=(5,), J=(2,)))
    assert torch.equal(final, mov(b, a, 2, 5)) and len(fields) == 1


def unit_features(gen, C, s, scale):
    f = torch.randn(1, C, s, s, generator=gen, dtype=torch.float64)
    return f / f.norm(dim=1, keepdim=True) * scale


def test_vpa_recovers_shift_through_chain():
    # x_b(p) = x_a(p - s): the coarse level sees s / 2, the fine level must add nothing
    gen = torch.Generator().manual_seed(1)
    coarse, fine = unit_features(gen, 8, 8, 3.0), unit_features(gen, 8, 16, 3.0)
    F_a = [coarse, fine]
    F_b = [torch.roll(coarse, (1, -1), (2, 3)), torch.roll(fine, (2, -2), (2, 3))]
    final, fields = vpa(F_a, F_b, HeadConfig(N=(3, 3), J=(1, 1), tau=0.01))
    assert torch.allclose(fields[0][0, 0, 2:-2, 2:-2], torch.full((4, 4), -1.0, dtype=torch.float64), atol=1e-9)
    inner = final[0, :, 6:-6, 6:-6]
    assert torch.allclose(inner[0], torch.full_like(inner[0], -2.0), atol=1e-9)
    assert torch.allclose(inner[1], torch.full_like(inner[1], 2.0), atol=1e-9)


def test_receptive_bound_values():
    assert receptive_bound([7] * 5) == 93.0
    assert vpa_receptive_field([7] * 5) == 187
    assert receptive_bound([3]) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([(3, 3, 3), (5, 3, 3), (3, 5, 7)]), st.floats(0.1, 30.0))
def test_vpa_receptive_bound_property(seed, N, scale):
    gen = torch.Generator().manual_seed(seed)
    cfg = HeadConfig(N=N, J=(2, 2, 1))
    final, _ = vpa(pyramid(gen, scale=scale), pyramid(gen, scale=scale), cfg)
    assert torch.isfinite(final).all()
    assert final.abs().max() <= receptive_bound(N)


def test_vpa_gradcheck():
    gen = torch.Generator().manual_seed(2)
    A = [t.requires_grad_(True) for t in pyramid(gen, sizes=(2, 4, 8))]
    B = [t.requires_grad_(True) for t in pyramid(gen, sizes=(2, 4, 8))]
    cfg = HeadConfig(N=(3, 3, 3), J=(2, 2, 1))

    def fn(*ts):
        return vpa(ts[:3], ts[3:], cfg)[0]

    assert torch.autograd.gradcheck(fn, tuple(A + B), eps=1e-6, atol=1e-7, rtol=1e-4)


def test_vpa_config_errors():
    gen = torch.Generator().manual_seed(0)
    with pytest.raises(ConfigurationError):
        vpa(pyramid(gen), pyramid(gen), HeadConfig())
    with pytest.raises(ConfigurationError):
        HeadConfig(N=(7, 7), J=(1,))
