"""Training objectives: L1, D-SSIM, volume regularization, mask sparsity."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F

from .diffcore import DTYPE
from .errors import ConfigError, ValidationError

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    ssim: float = 0.2
    vol: float = 0.001
    group: float = 0.01
    mask: float = 5e-4

    def validate(self):
        for name in ("ssim", "vol", "group", "mask"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be non-negative")
        if self.ssim > 1:
            raise ConfigError("lambda_ssim must not exceed 1")


@lru_cache(maxsize=4)
def _gauss_1d(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=DTYPE) - (size - 1) / 2
    g = torch.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _window_mean(x: torch.Tensor, norm: torch.Tensor) -> torch.Tensor:
    # separable Gaussian blur with zero padding, renormalized by the in-image weight
    g = _gauss_1d()
    k = g.numel()
    c = x.shape[1]
    x = F.conv2d(x, g.reshape(1, 1, 1, k).expand(c, 1, 1, k), padding=(0, k // 2), groups=c)
    x = F.conv2d(x, g.reshape(1, 1, k, 1).expand(c, 1, k, 1), padding=(k // 2, 0), groups=c)
    return x / norm


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM of two (H, W, 3) images in [0, 1].

    11x11 Gaussian window (sigma 1.5); near the border the window is cropped
    to the image and renormalized.
    """
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]
    ones = torch.ones_like(x[:, :1])
    norm = _window_mean(ones, 1.0)
    mx = _window_mean(x, norm)
    my = _window_mean(y, norm)
    sxx = _window_mean(x * x, norm) - mx * mx
    syy = _window_mean(y * y, norm) - my * my
    sxy = _window_mean(x * y, norm) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def volume(scales: torch.Tensor) -> torch.Tensor:
    return torch.prod(scales, dim=-1).sum()


def loss_full(render, gt, scales, w: LossWeights, parts: dict | None = None) -> torch.Tensor:
    """(1 - l_ssim) * L1 + l_ssim * (1 - SSIM) / 2 + l_vol * sum_i prod_d s_id."""
    if render.shape != gt.shape:
        raise ValidationError(f"image shapes differ: {tuple(render.shape)} vs {tuple(gt.shape)}")
    l1_term = l1(render, gt)
    dssim = (1 - ssim(render, gt)) / 2
    vol = volume(scales) if scales.numel() else torch.zeros((), dtype=DTYPE)
    total = (1 - w.ssim) * l1_term + w.ssim * dssim + w.vol * vol
    if parts is not None:
        parts.update(l1=float(l1_term.detach()), dssim=float(dssim.detach()), vol=float(vol.detach()))
    return total


class _GroupNorm(torch.autograd.Function):
    """Row L2 norm whose gradient at an all-zero row is the zero subgradient."""

    @staticmethod
    def forward(ctx, x):
        n = torch.linalg.vector_norm(x, dim=-1)
        ctx.save_for_backward(x, n)
        return n

    @staticmethod
    def backward(ctx, grad):
        x, n = ctx.saved_tensors
        safe = torch.where(n > 0, n, torch.ones_like(n))
        g = x / safe[..., None]
        g = torch.where((n > 0)[..., None], g, torch.zeros_like(g))
        return grad[..., None] * g


def group_norm(x: torch.Tensor) -> torch.Tensor:
    return _GroupNorm.apply(x)


def loss_sparsity(logits: torch.Tensor, lambda_group: float, valid: torch.Tensor | None = None) -> torch.Tensor:
    """sum sigmoid(m) + lambda_group * sum_j ||sigmoid(m_j)||_2 over (anchors, K) logits.

    ``valid`` marks slots that take part; the rest count as fully pruned.
    """
    s = torch.sigmoid(logits)
    if valid is not None:
        s = torch.where(valid, s, torch.zeros_like(s))
    total = s.sum()
    if lambda_group:
        total = total + lambda_group * group_norm(s).sum()
    return total
