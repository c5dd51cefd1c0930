import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from igs.diffcore import DTYPE, ParamStore, fd_check
from igs.errors import ConfigError, ValidationError
from igs.losses import SSIM_C1, LossWeights, group_norm, loss_full, loss_sparsity, ssim


def ssim_oracle(a, b):
    """Direct per-pixel SSIM with the window cropped to the image and renormalized."""
    H, W, C = a.shape
    x = np.arange(11) - 5
    g1 = np.exp(-x ** 2 / (2 * 1.5 ** 2))
    g1 /= g1.sum()
    total = 0.0
    for i in range(H):
        for j in range(W):
            ys = [i + d for d in x if 0 <= i + d < H]
            xs = [j + d for d in x if 0 <= j + d < W]
            w = np.outer(g1[[d + 5 for d in x if 0 <= i + d < H]], g1[[d + 5 for d in x if 0 <= j + d < W]])
            w /= w.sum()
            for c in range(C):
                pa = a[np.ix_(ys, xs)][..., c]
                pb = b[np.ix_(ys, xs)][..., c]
                ma, mb = (w * pa).sum(), (w * pb).sum()
                va = (w * pa * pa).sum() - ma * ma
                vb = (w * pb * pb).sum() - mb * mb
                cov = (w * pa * pb).sum() - ma * mb
                c1, c2 = 0.01 ** 2, 0.03 ** 2
                total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return total / (H * W * C)


def test_ssim_identical_is_one(rng):
    a = torch.as_tensor(rng.uniform(0, 1, (9, 7, 3)))
    assert ssim(a, a).item() == pytest.approx(1.0, abs=1e-12)


def test_ssim_zero_vs_one():
    a = torch.zeros(12, 12, 3, dtype=DTYPE)
    b = torch.ones(12, 12, 3, dtype=DTYPE)
    assert ssim(a, b).item() == pytest.approx(SSIM_C1 / (1 + SSIM_C1), rel=1e-9)
    assert ssim(a, b).item() == pytest.approx(9.999e-5, rel=1e-4)


def test_ssim_matches_oracle(rng):
    for shape in ((4, 4, 3), (13, 9, 3), (16, 16, 3)):
        a = rng.uniform(0, 1, shape)
        b = np.clip(a + rng.normal(0, 0.2, shape), 0, 1)
        assert ssim(torch.as_tensor(a), torch.as_tensor(b)).item() == pytest.approx(ssim_oracle(a, b), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_ssim_symmetric(seed):
    r = np.random.default_rng(seed)
    a = torch.as_tensor(r.uniform(0, 1, (6, 5, 3)))
    b = torch.as_tensor(r.uniform(0, 1, (6, 5, 3)))
    assert ssim(a, b).item() == pytest.approx(ssim(b, a).item(), abs=1e-14)
    assert -1 <= ssim(a, b).item() <= 1


def test_ssim_shape_mismatch():
    with pytest.raises(ValidationError):
        ssim(torch.zeros(4, 4, 3), torch.zeros(4, 5, 3))


def test_loss_full_examples():
    img = torch.rand(5, 5, 3, dtype=DTYPE)
    w = LossWeights()
    assert loss_full(img, img, torch.zeros(3, 3, dtype=DTYPE), w).item() == pytest.approx(0.0, abs=1e-15)
    one = torch.full((1, 3), 0.1, dtype=DTYPE)
    assert loss_full(img, img, one, w).item() == pytest.approx(1e-6, rel=1e-9, abs=1e-15)


def test_loss_full_matches_scalar_formula(rng):
    a = rng.uniform(0, 1, (4, 4, 3))
    b = rng.uniform(0, 1, (4, 4, 3))
    s = rng.uniform(0.01, 0.2, (6, 3))
    expected = 0.8 * np.abs(a - b).mean() + 0.2 * (1 - ssim_oracle(a, b)) / 2 + 0.001 * np.prod(s, axis=1).sum()
    got = loss_full(torch.as_tensor(a), torch.as_tensor(b), torch.as_tensor(s), LossWeights()).item()
    assert got == pytest.approx(expected, abs=1e-12)


def test_loss_full_reports_parts(rng):
    a = torch.as_tensor(rng.uniform(0, 1, (6, 6, 3)))
    parts = {}
    loss_full(a, a * 0.5, torch.ones(2, 3, dtype=DTYPE), LossWeights(), parts)
    assert set(parts) == {"l1", "dssim", "vol"} and parts["vol"] == 2.0


def test_loss_full_nonnegative(rng):
    for _ in range(10):
        a = torch.as_tensor(rng.uniform(0, 1, (5, 6, 3)))
        b = torch.as_tensor(rng.uniform(0, 1, (5, 6, 3)))
        assert loss_full(a, b, torch.as_tensor(rng.uniform(0, 1, (3, 3))), LossWeights()).item() >= 0


def test_loss_full_gradients(rng):
    s = ParamStore()
    img = s.add("img", rng.uniform(0.1, 0.9, (6, 6, 3)))
    sc = s.add("scales", rng.uniform(0.05, 0.5, (4, 3)))
    gt = torch.as_tensor(rng.uniform(0, 1, (6, 6, 3)))
    assert fd_check(lambda: loss_full(img, gt, sc, LossWeights()), s, sample=64) < 1e-6


def test_sparsity_examples():
    assert loss_sparsity(torch.zeros(1, 4, dtype=DTYPE), 0.01).item() == pytest.approx(2.01, abs=1e-15)
    assert loss_sparsity(torch.full((3, 4), -1e4, dtype=DTYPE), 0.01).item() == 0.0
    m = torch.randn(5, 4, dtype=DTYPE)
    assert loss_sparsity(m, 0.0).item() == torch.sigmoid(m).sum().item()


def test_sparsity_valid_slots():
    m = torch.zeros(2, 2, dtype=DTYPE)
    valid = torch.tensor([[True, False], [False, False]])
    assert loss_sparsity(m, 0.5, valid).item() == pytest.approx(0.5 + 0.5 * 0.5)


def test_sparsity_monotone(rng):
    m = torch.as_tensor(rng.normal(size=(4, 3)))
    base = loss_sparsity(m, 0.01).item()
    for i in range(4):
        for j in range(3):
            bumped = m.clone()
            bumped[i, j] += 0.5
            assert loss_sparsity(bumped, 0.01).item() >= base


def test_sparsity_gradients(rng):
    s = ParamStore()
    m = s.add("m", rng.normal(size=(6, 4)))
    assert fd_check(lambda: loss_sparsity(m, 0.01), s, sample=24) < 1e-6


def test_group_gradient_formula(rng):
    m = torch.as_tensor(rng.normal(size=(3, 4))).requires_grad_()
    lam = 0.01
    (g,) = torch.autograd.grad(lam * group_norm(torch.sigmoid(m)).sum(), m)
    s = torch.sigmoid(m.detach())
    expected = lam * s * (1 - s) * s / torch.linalg.vector_norm(s, dim=1, keepdim=True)
    assert torch.allclose(g, expected, atol=1e-15)


def test_group_norm_zero_subgradient():
    x = torch.zeros(2, 4, dtype=DTYPE, requires_grad=True)
    (g,) = torch.autograd.grad(group_norm(x).sum(), x)
    assert torch.count_nonzero(g) == 0


def test_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(ssim=1.5).validate()
    with pytest.raises(ConfigError):
        LossWeights(vol=-1).validate()
    LossWeights().validate()
