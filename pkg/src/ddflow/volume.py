"""Grid containers and the resampling primitives used everywhere else.

Arrays are indexed ``[x, y, z]``; displacement fields carry a leading
channel axis ``(3, nx, ny, nz)`` and are expressed in voxel units. A field
``u`` describes the sampling map ``x -> x + u(x)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

CLASS_NAMES = {0: "background", 1: "rv", 2: "myo", 3: "lv"}
NOISE_SCALE = 5.0


def _check_spacing(spacing) -> tuple:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise ValueError(f"spacing must have 3 components, got {len(spacing)}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be finite and positive, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume:
    """Scalar intensity grid with anisotropic voxel spacing (mm)."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume intensities must be finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class DisplacementField:
    """Three-channel displacement grid in voxel units, shape ``(3, nx, ny, nz)``."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[0] != 3:
            raise ValueError(f"displacement data must have shape (3, nx, ny, nz), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("displacement components must be finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape[1:])

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)) -> "DisplacementField":
        return cls(np.zeros((3,) + tuple(dims)), spacing)


@dataclass(frozen=True)
class LabelMap:
    """Integer segmentation; 0 background, 1 RV, 2 myocardium, 3 LV."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    classes: tuple = field(default=(0, 1, 2, 3))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {data.shape}")
        if data.dtype.kind == "f":
            if not np.all(data == np.round(data)):
                raise ValueError("label data must be integral")
        data = data.astype(np.uint8)
        bad = np.setdiff1d(np.unique(data), self.classes)
        if bad.size:
            raise ValueError(f"labels contain undeclared classes {bad.tolist()}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape)


Grid = Union[Volume, LabelMap]


def _require_same_dims(a, b):
    if tuple(a.dims) != tuple(b.dims):
        raise ValueError(f"dimension mismatch: {tuple(a.dims)} vs {tuple(b.dims)}")


def identity_grid(dims) -> np.ndarray:
    """Voxel coordinates, shape ``(3, nx, ny, nz)``."""
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"))


def trilinear_weights(coords: np.ndarray, dims):
    """Lower corner indices and fractional offsets for clamped trilinear sampling.

    Coordinates are clamped to ``[0, n - 1]``. The lower corner is
    ``min(floor(p), n - 2)`` so a coordinate sitting on the top face is
    handled by the last cell with fraction one.
    """
    lo, frac, inside = [], [], []
    for axis, n in enumerate(dims):
        p = coords[axis]
        pc = np.clip(p, 0.0, n - 1.0)
        if n == 1:
            i0 = np.zeros(p.shape, dtype=np.intp)
            f = np.zeros(p.shape)
        else:
            i0 = np.minimum(np.floor(pc).astype(np.intp), n - 2)
            f = pc - i0
        lo.append(i0)
        frac.append(f)
        inside.append((p >= 0.0) & (p <= n - 1.0))
    return lo, frac, inside


def interpolate_array(arr: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of ``arr`` at ``coords`` (shape ``(3, ...)``), border clamp."""
    dims = arr.shape
    (i0, j0, k0), (fx, fy, fz), _ = trilinear_weights(coords, dims)
    i1 = np.minimum(i0 + 1, dims[0] - 1)
    j1 = np.minimum(j0 + 1, dims[1] - 1)
    k1 = np.minimum(k0 + 1, dims[2] - 1)
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    return (
        arr[i0, j0, k0] * gx * gy * gz
        + arr[i1, j0, k0] * fx * gy * gz
        + arr[i0, j1, k0] * gx * fy * gz
        + arr[i1, j1, k0] * fx * fy * gz
        + arr[i0, j0, k1] * gx * gy * fz
        + arr[i1, j0, k1] * fx * gy * fz
        + arr[i0, j1, k1] * gx * fy * fz
        + arr[i1, j1, k1] * fx * fy * fz
    )


def trilinear_sample(vol: Volume, p: Sequence[float]) -> float:
    p = np.asarray(p, dtype=np.float64).reshape(3, 1)
    if not np.all(np.isfinite(p)):
        raise ValueError("sample coordinate must be finite")
    return float(interpolate_array(vol.data, p)[0])


def warp_array(arr: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Sample ``arr`` at ``x + u(x)``."""
    return interpolate_array(arr, identity_grid(arr.shape) + u)


def warp_image(moving: Volume, ddf: DisplacementField) -> Volume:
    _require_same_dims(moving, ddf)
    return Volume(warp_array(moving.data, ddf.data), moving.spacing)


def warp_label_array(labels: np.ndarray, u: np.ndarray) -> np.ndarray:
    dims = labels.shape
    coords = identity_grid(dims) + u
    idx = tuple(
        np.clip(np.floor(coords[a] + 0.5).astype(np.intp), 0, dims[a] - 1) for a in range(3)
    )
    return labels[idx]


def warp_labels(labels: LabelMap, ddf: DisplacementField) -> LabelMap:
    """Nearest-neighbour label resampling at ``x + u(x)`` with border clamp."""
    _require_same_dims(labels, ddf)
    return LabelMap(warp_label_array(labels.data, ddf.data), labels.spacing, labels.classes)


def jacobian_array(u: np.ndarray) -> np.ndarray:
    if min(u.shape[1:]) < 3:
        raise ValueError("jacobian requires at least 3 voxels per axis")
    # J[c][a] = d u_c / d x_a; central inside, one-sided on faces
    grads = [np.gradient(u[c], axis=(0, 1, 2), edge_order=1) for c in range(3)]
    m = np.empty(u.shape[1:] + (3, 3))
    for c in range(3):
        for a in range(3):
            m[..., c, a] = grads[c][a] + (1.0 if c == a else 0.0)
    return np.linalg.det(m)


def jacobian_map(ddf: DisplacementField) -> Volume:
    """Determinant of ``I + du/dx`` per voxel, in voxel coordinates."""
    return Volume(jacobian_array(ddf.data), ddf.spacing)


def noise_sigmas(spacing) -> np.ndarray:
    s = np.asarray(_check_spacing(spacing))
    return NOISE_SCALE * s.min() / s


def sample_noise_array(dims, spacing, rng: np.random.Generator) -> np.ndarray:
    sig = noise_sigmas(spacing)
    return rng.standard_normal((3,) + tuple(dims)) * sig[:, None, None, None]


def sample_noise_field(dims, spacing, rng: np.random.Generator) -> DisplacementField:
    """Gaussian field with per-axis std ``5 * min(spacing) / spacing[i]`` (voxels)."""
    return DisplacementField(sample_noise_array(dims, spacing, rng), spacing)


def _check_factor(factor: int) -> int:
    factor = int(factor)
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a power of two, got {factor}")
    return factor


def downsample_array(u: np.ndarray, factor: int) -> np.ndarray:
    factor = _check_factor(factor)
    c, nx, ny, nz = u.shape
    if nx % factor or ny % factor or nz % factor:
        raise ValueError(f"dims {(nx, ny, nz)} not divisible by {factor}")
    blocks = u.reshape(c, nx // factor, factor, ny // factor, factor, nz // factor, factor)
    return blocks.mean(axis=(2, 4, 6)) / factor


def upsample_array(u: np.ndarray, factor: int) -> np.ndarray:
    factor = _check_factor(factor)
    dims = u.shape[1:]
    fine = tuple(n * factor for n in dims)
    # fine voxel centre i sits at coarse coordinate (i + 0.5) / f - 0.5
    axes = [(np.arange(n, dtype=np.float64) + 0.5) / factor - 0.5 for n in fine]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    return np.stack([interpolate_array(u[c], coords) for c in range(u.shape[0])]) * factor


def downsample_field(ddf: DisplacementField, factor: int) -> DisplacementField:
    """Block-average pooling followed by rescaling into coarse voxel units."""
    factor = _check_factor(factor)
    sp = tuple(s * factor for s in ddf.spacing)
    return DisplacementField(downsample_array(ddf.data, factor), sp)


def upsample_field(ddf: DisplacementField, factor: int) -> DisplacementField:
    factor = _check_factor(factor)
    sp = tuple(s / factor for s in ddf.spacing)
    return DisplacementField(upsample_array(ddf.data, factor), sp)


def _crop_pad_array(arr: np.ndarray, target, fill) -> np.ndarray:
    out = arr
    for axis, (n, m) in enumerate(zip(arr.shape, target)):
        if m == n:
            continue
        if m < n:
            lo = (n - m) // 2
            out = np.take(out, np.arange(lo, lo + m), axis=axis)
        else:
            lo = (m - n) // 2
            pad = [(0, 0)] * out.ndim
            pad[axis] = (lo, m - n - lo)
            out = np.pad(out, pad, constant_values=fill)
    return out


def center_crop_or_pad(vol: Grid, target) -> Grid:
    """Symmetric crop/pad; the odd voxel goes to the high side.

    Volumes pad with their minimum intensity, label maps with background.
    """
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target dims must be 3 positive integers, got {target}")
    if isinstance(vol, LabelMap):
        return LabelMap(_crop_pad_array(vol.data, target, 0), vol.spacing, vol.classes)
    return Volume(_crop_pad_array(vol.data, target, vol.data.min()), vol.spacing)
