"""Overlap, regularity and cardiac-function metrics for a predicted field.

Registration direction throughout: fixed = ED, moving = ES, and the field
samples the moving frame, so ``warp_labels(es_labels, ddf)`` is the
prediction of the ED labels.
"""
from __future__ import annotations

import csv
import io as _io
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Sequence

import numpy as np

from .volume import DisplacementField, LabelMap, jacobian_array, warp_label_array

RV, MYO, LV = 1, 2, 3


class UndefinedMetricError(ValueError):
    pass


def _labels(x) -> np.ndarray:
    return x.data if isinstance(x, LabelMap) else np.asarray(x)


def dice(a, b, cls: int) -> float:
    """Dice overlap of class ``cls``; 1 when the class is absent from both."""
    ma, mb = _labels(a) == cls, _labels(b) == cls
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def foreground_dice(a, b) -> float:
    la, lb = _labels(a), _labels(b)
    return dice((la > 0).astype(np.uint8), (lb > 0).astype(np.uint8), 1)


def jacobian_stats(ddf: DisplacementField):
    """Percentage of voxels with a non-positive Jacobian determinant, and the determinant's std."""
    det = jacobian_array(ddf.data)
    return float(100.0 * np.mean(det <= 0)), float(np.std(det))


def cavity_volume(labels: LabelMap, cls: int) -> float:
    """Volume in mL."""
    return float(np.count_nonzero(labels.data == cls) * np.prod(labels.spacing) / 1000.0)


def ejection_fraction(ed: LabelMap, es: LabelMap, cls: int) -> float:
    v_ed = cavity_volume(ed, cls)
    if v_ed <= 0:
        raise UndefinedMetricError(f"class {cls} is empty at ED; ejection fraction undefined")
    return 100.0 * (v_ed - cavity_volume(es, cls)) / v_ed


def ef_mae_pair(true_moving: LabelMap, warped_moving: LabelMap, true_fixed: LabelMap, cls: int,
                fixed_is_ed: bool = True) -> float:
    """Absolute EF change when the fixed-frame labels are swapped for the warped moving labels.

    The warped moving segmentation lives on the fixed grid, so it stands in
    for the fixed-frame segmentation while the true moving one is kept.
    """
    if fixed_is_ed:
        return abs(ejection_fraction(true_fixed, true_moving, cls) - ejection_fraction(warped_moving, true_moving, cls))
    return abs(ejection_fraction(true_moving, true_fixed, cls) - ejection_fraction(true_moving, warped_moving, cls))


def _ray_directions(n_rays: int) -> np.ndarray:
    if n_rays < 4 or n_rays % 4:
        raise ValueError(f"n_rays must be a positive multiple of 4, got {n_rays}")
    q = n_rays // 4
    theta = np.arange(q) * (2.0 * np.pi / n_rays)
    base = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    # exact quarter turns keep the ray set invariant under 90 degree rotations
    quads = [base]
    for _ in range(3):
        prev = quads[-1]
        quads.append(np.stack([-prev[:, 1], prev[:, 0]], axis=1))
    return np.concatenate(quads)


def ray_thicknesses(labels: LabelMap, n_rays: int = 64) -> List[float]:
    """Per-ray wall thickness (mm) pooled over every slice with both LV and myocardium."""
    lab = labels.data
    sx, sy = labels.spacing[0], labels.spacing[1]
    nx, ny, nz = lab.shape
    dirs = _ray_directions(n_rays)
    step = 0.0917 * min(sx, sy)
    r_max = math.hypot(nx * sx, ny * sy)
    radii = np.arange(1, int(r_max / step) + 1) * step
    out = []
    for z in range(nz):
        sl = lab[:, :, z]
        cav = np.argwhere(sl == LV)
        if len(cav) == 0 or not np.any(sl == MYO):
            continue
        cx, cy = cav[:, 0].mean() * sx, cav[:, 1].mean() * sy
        px = (cx + radii[None, :] * dirs[:, :1]) / sx
        py = (cy + radii[None, :] * dirs[:, 1:]) / sy
        ix, iy = np.floor(px + 0.5).astype(np.intp), np.floor(py + 0.5).astype(np.intp)
        valid = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        myo = np.zeros(ix.shape, dtype=bool)
        myo[valid] = sl[ix[valid], iy[valid]] == MYO
        for k in range(len(dirs)):
            hits = np.flatnonzero(myo[k])
            if len(hits) == 0:
                continue
            # boundaries sit half a step outside the first and last wall samples
            out.append(float(radii[hits[-1]] - radii[hits[0]] + step))
    return out


def myocardial_thickness(labels: LabelMap, n_rays: int = 64) -> float:
    """Mean outer-minus-inner wall crossing distance along rays cast from the LV centroid, in mm."""
    vals = ray_thicknesses(labels, n_rays)
    if not vals:
        raise UndefinedMetricError("no slice holds both an LV cavity and myocardium")
    return float(np.mean(vals))


@dataclass
class EvalReport:
    dice_rv: float
    dice_myo: float
    dice_lv: float
    dice_mean: float
    dice_fg: float
    pct_negjac: float
    std_jac: float
    lvef_mae: float
    rvef_mae: float
    mt_mae: float
    seconds: float = 0.0

    def __post_init__(self):
        for name in ("dice_rv", "dice_myo", "dice_lv", "dice_mean", "dice_fg"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.pct_negjac <= 100.0:
            raise ValueError("pct_negjac must lie in [0, 100]")

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    def to_csv_row(self) -> str:
        buf = _io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow([repr(float(v)) for v in self.to_dict().values()])
        return buf.getvalue()


def evaluate_pair(fixed_labels: LabelMap, moving_labels: LabelMap, ddf: DisplacementField,
                  seconds: float = 0.0) -> EvalReport:
    warped = LabelMap(warp_label_array(moving_labels.data, ddf.data), fixed_labels.spacing, fixed_labels.classes)
    d = [dice(warped, fixed_labels, c) for c in (RV, MYO, LV)]
    pct, std = jacobian_stats(ddf)
    return EvalReport(
        dice_rv=d[0], dice_myo=d[1], dice_lv=d[2], dice_mean=float(np.mean(d)),
        dice_fg=foreground_dice(warped, fixed_labels),
        pct_negjac=pct, std_jac=std,
        lvef_mae=ef_mae_pair(moving_labels, warped, fixed_labels, LV),
        rvef_mae=ef_mae_pair(moving_labels, warped, fixed_labels, RV),
        mt_mae=abs(myocardial_thickness(fixed_labels) - myocardial_thickness(warped)),
        seconds=float(seconds),
    )


def evaluate_case(case, ddf: DisplacementField, seconds: float = 0.0) -> EvalReport:
    return evaluate_pair(case.ed_labels, case.es_labels, ddf, seconds)


def aggregate(reports: Sequence[EvalReport]) -> Dict[str, Dict[str, float]]:
    """Mean and standard deviation of every report field."""
    if not reports:
        raise ValueError("no reports to aggregate")
    out = {}
    for name in EvalReport.field_names():
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out
