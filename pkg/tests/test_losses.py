import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vectorcl.errors import DegenerateTransformError
from vectorcl.geometry import warp
from vectorcl.losses import (
    EPS_NUM,
    consistency_loss,
    cover_loss,
    dense_infonce_loss,
    infonce_pixel_loss,
    vector_loss,
)


def t(a):
    return torch.tensor(a, dtype=torch.float64)


def test_vector_loss_zero_on_match():
    psi = torch.randn(1, 2, 5, 5, dtype=torch.float64)
    assert vector_loss(psi, psi, torch.ones(1, 1, 5, 5, dtype=torch.float64)) == 0


def test_vector_loss_arithmetic():
    gt = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
    assert vector_loss(gt, torch.ones_like(gt), torch.ones(1, 1, 4, 4, dtype=torch.float64)) == 2.0


def test_vector_loss_half_mask_oracle():
    rng = np.random.default_rng(0)
    gt, pred = rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 6, 6))
    mask = np.zeros((1, 6, 6))
    mask[:, :3] = 1
    want = sum(abs(gt[0, i, j] - pred[0, i, j]) + abs(gt[1, i, j] - pred[1, i, j])
               for i in range(3) for j in range(6)) / 18
    assert abs(float(vector_loss(t(gt), t(pred), t(mask))) - want) <= 1e-9


def test_vector_loss_empty_mask():
    z = torch.zeros(2, 3, 3)
    with pytest.raises(DegenerateTransformError):
        vector_loss(z, z, torch.zeros(1, 3, 3))


def test_consistency_self_is_minus_one():
    f = torch.randn(1, 4, 5, 5, dtype=torch.float64)
    loss = consistency_loss(f, f, torch.zeros(1, 2, 5, 5, dtype=torch.float64), torch.ones(1, 1, 5, 5, dtype=torch.float64))
    assert abs(float(loss) + 1.0) < 1e-14


def test_consistency_orthogonal_is_zero():
    a = torch.zeros(1, 2, 3, 3, dtype=torch.float64)
    b = torch.zeros_like(a)
    a[:, 0], b[:, 1] = 1.0, 2.0
    loss = consistency_loss(a, b, torch.zeros(1, 2, 3, 3, dtype=torch.float64), torch.ones(1, 1, 3, 3, dtype=torch.float64))
    assert float(loss) == 0.0


def test_consistency_scalar_oracle():
    rng = np.random.default_rng(1)
    fa, fb = rng.normal(size=(1, 3, 5, 5)), rng.normal(size=(1, 3, 5, 5))
    psi = rng.normal(0, 0.7, size=(1, 2, 5, 5))
    mask = (rng.random((1, 1, 5, 5)) > 0.3).astype(float)
    fab = warp(t(fa), t(psi)).numpy()
    total = 0.0
    for i in range(5):
        for j in range(5):
            if mask[0, 0, i, j]:
                u, v = fab[0, :, i, j], fb[0, :, i, j]
                total += -(u @ v) / math.sqrt(max((u @ u) * (v @ v), EPS_NUM**2))
    want = total / mask.sum()
    assert abs(float(consistency_loss(t(fa), t(fb), t(psi), t(mask))) - want) <= 1e-8


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_consistency_range(seed):
    gen = torch.Generator().manual_seed(seed)
    a = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    b = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    psi = torch.randn(1, 2, 4, 4, generator=gen, dtype=torch.float64)
    v = float(consistency_loss(a, b, psi, torch.ones(1, 1, 4, 4, dtype=torch.float64)))
    assert -1 - 1e-12 <= v <= 1 + 1e-12


def test_cover_loss_perfect():
    f = torch.randn(1, 4, 5, 5, dtype=torch.float64)
    psi = torch.zeros(1, 2, 5, 5, dtype=torch.float64)
    rep = cover_loss(psi, psi, f, f, torch.ones(1, 1, 5, 5, dtype=torch.float64))
    assert abs(float(rep.l_total) + 1.0) < 1e-14
    assert rep.valid_count == 25 and all(rep.finite.values())


def test_cover_loss_total_is_sum():
    gen = torch.Generator().manual_seed(0)
    f_a, f_b = (torch.randn(1, 4, 6, 6, generator=gen, dtype=torch.float64) for _ in range(2))
    gt, pred = (torch.randn(1, 2, 6, 6, generator=gen, dtype=torch.float64) for _ in range(2))
    rep = cover_loss(gt, pred, f_a, f_b, torch.ones(1, 1, 6, 6, dtype=torch.float64))
    assert rep.l_total == rep.l_con + rep.l_vec


def test_infonce_symmetric_is_log2():
    a = t([1.0, 2.0])
    assert abs(float(infonce_pixel_loss(a, t([0.5, 0.0]), [t([0.5, 0.0])], 0.7)) - math.log(2)) < 1e-15


def test_infonce_limit_zero():
    a = t([1.0, 0.0])
    assert float(infonce_pixel_loss(a, t([1e4, 0.0]), [t([0.0, 1.0])], 1.0)) < 1e-12


def test_infonce_scalar_oracle():
    rng = np.random.default_rng(2)
    a, p = rng.normal(size=8), rng.normal(size=8)
    negs = [rng.normal(size=8) for _ in range(5)]
    tau = 0.9
    num = math.exp(a @ p / tau)
    want = -math.log(num / (num + sum(math.exp(a @ n / tau) for n in negs)))
    got = float(infonce_pixel_loss(t(a), t(p), [t(n) for n in negs], tau))
    assert abs(got - want) <= 1e-9


def test_infonce_shift_invariant():
    # extra channel: anchor 1, positive and negatives all k; every dot shifts by k
    rng = np.random.default_rng(3)
    a, p = rng.normal(size=4), rng.normal(size=4)
    negs = rng.normal(size=(3, 4))
    base = infonce_pixel_loss(t(a), t(p), t(negs), 1.3)
    k = 5.0
    shifted = infonce_pixel_loss(t(np.append(a, 1.0)), t(np.append(p, k)),
                                 t(np.hstack([negs, np.full((3, 1), k)])), 1.3)
    assert abs(float(base) - float(shifted)) < 1e-12


def test_dense_infonce_matches_pixel_loss():
    gen = torch.Generator().manual_seed(4)
    f_a = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    f_b = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    psi = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
    mask = torch.ones(1, 1, 4, 4, dtype=torch.float64)
    got = dense_infonce_loss(f_a, f_b, psi, mask, np.random.default_rng(0), 2.0, num_samples=16)
    a = f_a.reshape(3, 16).T
    b = f_b.reshape(3, 16).T
    want = sum(float(infonce_pixel_loss(a[i], b[i], torch.cat([b[:i], b[i + 1 :]]), 2.0)) for i in range(16)) / 16
    assert abs(float(got) - want) < 1e-12
