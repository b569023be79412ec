"""Differentiable torch versions of the grid operations, for batched ``(B, C, X, Y, Z)`` tensors.

Conventions match :mod:`ddflow.volume` and :mod:`ddflow.losses` exactly:
sampling at ``x + u(x)`` with border clamp, centre-aligned pyramids, NCC over
border-truncated windows.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .losses import LossConfig


def _base_grid(dims, device, dtype):
    axes = [torch.arange(n, device=device, dtype=dtype) for n in dims]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def warp(img: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Trilinear resampling of ``img`` (B, C, X, Y, Z) at ``x + u`` (u: B, 3, X, Y, Z)."""
    dims = img.shape[2:]
    coords = _base_grid(dims, img.device, img.dtype)[None] + u
    norm = []
    for a, n in enumerate(dims):
        norm.append(2.0 * coords[:, a] / max(n - 1, 1) - 1.0)
    # grid_sample wants (x, y, z) ordered as (W, H, D) = our (z, y, x)
    grid = torch.stack(norm[::-1], dim=-1)
    return F.grid_sample(img, grid, mode="bilinear", padding_mode="border", align_corners=True)


def downsample(u: torch.Tensor, factor: int) -> torch.Tensor:
    if factor == 1:
        return u
    return F.avg_pool3d(u, kernel_size=factor) / factor


def upsample(u: torch.Tensor, factor: int) -> torch.Tensor:
    if factor == 1:
        return u
    return F.interpolate(u, scale_factor=factor, mode="trilinear", align_corners=False) * factor


def upsample_features(h: torch.Tensor, factor: int = 2) -> torch.Tensor:
    return F.interpolate(h, scale_factor=factor, mode="trilinear", align_corners=False)


def box_sum(x: torch.Tensor, window: int) -> torch.Tensor:
    """Border-truncated cubic window sums via prefix sums; matches ``losses.box_sum``."""
    r = window // 2
    out = x
    for axis in range(2, 5):
        n = out.shape[axis]
        pad = [0] * 6
        pad[2 * (4 - axis)] = r + 1
        pad[2 * (4 - axis) + 1] = r
        c = torch.cumsum(F.pad(out, pad), dim=axis)
        out = c.narrow(axis, window, n) - c.narrow(axis, 0, n)
    return out


def ncc(warped: torch.Tensor, fixed: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Per-sample negated mean local NCC, shape (B,)."""
    w = cfg.ncc_window
    n = box_sum(torch.ones_like(fixed[:1, :1]), w)
    s_f = box_sum(fixed, w)
    s_w = box_sum(warped, w)
    cross = box_sum(fixed * warped, w) - s_f * s_w / n
    var_f = torch.clamp(box_sum(fixed * fixed, w) - s_f * s_f / n, min=0.0)
    var_w = torch.clamp(box_sum(warped * warped, w) - s_w * s_w / n, min=0.0)
    denom = var_f * var_w + cfg.eps
    cc = cross * cross / denom if cfg.squared else cross / torch.sqrt(denom)
    return -cc.flatten(1).mean(dim=1)


def grad_penalty(u: torch.Tensor) -> torch.Tensor:
    """Per-sample mean squared forward difference, shape (B,)."""
    terms = []
    for a in range(3):
        d = torch.diff(u, dim=2 + a)
        terms.append((d * d).flatten(2).mean(dim=2))
    return torch.cat(terms, dim=1).mean(dim=1)


def reg_loss(moving: torch.Tensor, fixed: torch.Tensor, u: torch.Tensor, cfg: LossConfig = LossConfig()):
    """Batch-mean registration loss."""
    warped = warp(moving, u)
    return (ncc(warped, fixed, cfg) + cfg.grad_weight * grad_penalty(u)).mean()
