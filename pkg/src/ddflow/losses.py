"""Registration loss (local NCC + gradient penalty) and its exact field gradient.

Everything here is float64 numpy. The torch versions used during training
live in :mod:`ddflow.torch_ops` and are checked against these.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .volume import DisplacementField, Volume, _require_same_dims, identity_grid, trilinear_weights


@dataclass(frozen=True)
class LossConfig:
    ncc_window: int = 9
    eps: float = 1e-5
    grad_weight: float = 1.0
    squared: bool = True

    def __post_init__(self):
        if int(self.ncc_window) != self.ncc_window or self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ValueError(f"ncc_window must be an odd integer >= 3, got {self.ncc_window}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not self.grad_weight >= 0:
            raise ValueError(f"grad_weight must be non-negative, got {self.grad_weight}")


def box_sum(a: np.ndarray, window: int) -> np.ndarray:
    """Sum over the cubic window around each voxel, truncated at the grid border."""
    return uniform_filter(a, size=window, mode="constant", cval=0.0) * float(window) ** 3


def _ncc_terms(warped, fixed, cfg):
    w = cfg.ncc_window
    n = box_sum(np.ones_like(fixed), w)
    s_f = box_sum(fixed, w)
    s_w = box_sum(warped, w)
    cross = box_sum(fixed * warped, w) - s_f * s_w / n
    var_f = np.maximum(box_sum(fixed * fixed, w) - s_f * s_f / n, 0.0)
    var_w = np.maximum(box_sum(warped * warped, w) - s_w * s_w / n, 0.0)
    return n, s_f, s_w, cross, var_f, var_w


def ncc_array(warped: np.ndarray, fixed: np.ndarray, cfg: LossConfig = LossConfig()) -> float:
    _, _, _, cross, var_f, var_w = _ncc_terms(warped, fixed, cfg)
    denom = var_f * var_w + cfg.eps
    cc = cross * cross / denom if cfg.squared else cross / np.sqrt(denom)
    return -float(cc.mean())


def ncc_grad_array(warped: np.ndarray, fixed: np.ndarray, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """d ncc_array / d warped."""
    w = cfg.ncc_window
    n, s_f, s_w, cross, var_f, var_w = _ncc_terms(warped, fixed, cfg)
    denom = var_f * var_w + cfg.eps
    if cfg.squared:
        d_cross = 2.0 * cross / denom
        d_varw = -cross * cross * var_f / denom**2
    else:
        root = np.sqrt(denom)
        d_cross = 1.0 / root
        d_varw = -0.5 * cross * var_f / (denom * root)
    mu_f = s_f / n
    mu_w = s_w / n
    # windows are symmetric, so scattering back over windows is another box sum
    g = (
        fixed * box_sum(d_cross, w)
        - box_sum(d_cross * mu_f, w)
        + 2.0 * warped * box_sum(d_varw, w)
        - 2.0 * box_sum(d_varw * mu_w, w)
    )
    return -g / fixed.size


def ncc_loss(warped: Volume, fixed: Volume, cfg: LossConfig = LossConfig()) -> float:
    """Negated mean local NCC; ``-1`` is a perfect match."""
    _require_same_dims(warped, fixed)
    return ncc_array(warped.data, fixed.data, cfg)


def grad_array(u: np.ndarray) -> float:
    if min(u.shape[1:]) < 2:
        raise ValueError("gradient loss requires at least 2 voxels per axis")
    terms = [np.mean(np.diff(u[c], axis=a) ** 2) for c in range(u.shape[0]) for a in range(3)]
    return float(np.mean(terms))


def grad_grad_array(u: np.ndarray) -> np.ndarray:
    out = np.zeros_like(u)
    nterms = u.shape[0] * 3
    for c in range(u.shape[0]):
        for a in range(3):
            d = np.diff(u[c], axis=a)
            scale = 2.0 / (nterms * d.size)
            pad_lo = [(0, 0)] * 3
            pad_hi = [(0, 0)] * 3
            pad_lo[a] = (1, 0)
            pad_hi[a] = (0, 1)
            # u[i] appears as +u[i] in d[i-1] and -u[i] in d[i]
            out[c] += scale * (np.pad(d, pad_lo) - np.pad(d, pad_hi))
    return out


def grad_loss(ddf: DisplacementField) -> float:
    """Mean squared forward difference, averaged per channel/axis pair."""
    return grad_array(ddf.data)


def warp_with_spatial_grad(moving: np.ndarray, u: np.ndarray):
    """Warped image and its derivative with respect to each sampling coordinate."""
    dims = moving.shape
    coords = identity_grid(dims) + u
    (i0, j0, k0), (fx, fy, fz), inside = trilinear_weights(coords, dims)
    i1 = np.minimum(i0 + 1, dims[0] - 1)
    j1 = np.minimum(j0 + 1, dims[1] - 1)
    k1 = np.minimum(k0 + 1, dims[2] - 1)
    c000 = moving[i0, j0, k0]
    c100 = moving[i1, j0, k0]
    c010 = moving[i0, j1, k0]
    c110 = moving[i1, j1, k0]
    c001 = moving[i0, j0, k1]
    c101 = moving[i1, j0, k1]
    c011 = moving[i0, j1, k1]
    c111 = moving[i1, j1, k1]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    # collapse along x first, then y, then z
    c00 = c000 * gx + c100 * fx
    c10 = c010 * gx + c110 * fx
    c01 = c001 * gx + c101 * fx
    c11 = c011 * gx + c111 * fx
    c0 = c00 * gy + c10 * fy
    c1 = c01 * gy + c11 * fy
    warped = c0 * gz + c1 * fz
    dz = c1 - c0
    dy = (c10 - c00) * gz + (c11 - c01) * fz
    dx = ((c100 - c000) * gy + (c110 - c010) * fy) * gz + ((c101 - c001) * gy + (c111 - c011) * fy) * fz
    spatial = np.stack([dx, dy, dz])
    for a in range(3):
        spatial[a] = np.where(inside[a] & (dims[a] > 1), spatial[a], 0.0)
    return warped, spatial


def reg_loss_array(moving, fixed, u, cfg: LossConfig = LossConfig()) -> float:
    warped, _ = warp_with_spatial_grad(moving, u)
    return ncc_array(warped, fixed, cfg) + cfg.grad_weight * grad_array(u)


def reg_loss_grad_array(moving, fixed, u, cfg: LossConfig = LossConfig()) -> np.ndarray:
    warped, spatial = warp_with_spatial_grad(moving, u)
    g_img = ncc_grad_array(warped, fixed, cfg)
    return g_img[None] * spatial + cfg.grad_weight * grad_grad_array(u)


def reg_loss(moving: Volume, fixed: Volume, ddf: DisplacementField, cfg: LossConfig = LossConfig()) -> float:
    """NCC of the warped moving image against ``fixed`` plus the weighted gradient penalty."""
    _require_same_dims(moving, fixed)
    _require_same_dims(moving, ddf)
    return reg_loss_array(moving.data, fixed.data, ddf.data, cfg)


def reg_loss_grad_ddf(
    moving: Volume, fixed: Volume, ddf: DisplacementField, cfg: LossConfig = LossConfig()
) -> DisplacementField:
    _require_same_dims(moving, fixed)
    _require_same_dims(moving, ddf)
    return DisplacementField(reg_loss_grad_array(moving.data, fixed.data, ddf.data, cfg), ddf.spacing)
