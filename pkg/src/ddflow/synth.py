"""Synthetic short-axis cardiac phantoms with a closed-form ED/ES deformation.

Each slice holds an LV blood pool (class 3) inside a myocardial ring
(class 2), an RV crescent (class 1) hugging the septum, and a static body
outline. The ES frame is the ED scene pushed through an in-plane radial map
about the LV centre,

    phi(p) = C + g(r) / r * (p - C),   r = |p - C|,

with ``g`` monotone: slope ``c`` (the contraction fraction) inside the LV
cavity, an area-preserving stretch across the myocardium (so the wall
thickens at ES), a contracting band across the RV, then a sine-shaped
recovery so that ``g(r) = r`` beyond the support radius. Because the cavity scales by
exactly ``c`` in-plane, LVEF is ``100 * (1 - c**2)``.

The ground-truth field ``gt_ddf`` is ``phi(x) - x`` in voxel units, so
``warp_image(es_image, gt_ddf)`` reproduces the ED image (fixed = ED,
moving = ES).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from . import io
from .volume import DisplacementField, LabelMap, Volume

# scene codes: label classes 0..3 plus non-cardiac tissue
AIR, RV, MYO, LV, BODY = 0, 1, 2, 3, 4


class GeometryError(ValueError):
    """The requested anatomy does not fit inside the grid."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (64, 64, 16)
    spacing: tuple = (1.5, 1.5, 3.15)
    lv_radius: tuple = (12.0, 15.0)         # mm, endocardial radius at the base
    myo_thickness: tuple = (7.5, 9.5)       # mm
    rv_radius: tuple = (14.0, 17.0)         # mm
    rv_shift: tuple = (-1.0, 2.0)           # mm, RV centre beyond the epicardium
    rv_angle: tuple = (150.0, 210.0)        # degrees
    contraction: tuple = (0.55, 0.8)
    taper: tuple = (0.1, 0.25)              # apical shrink of the radii
    support_margin: float = 12.0            # mm beyond the RV where the motion vanishes
    body_radius: tuple = (40.0, 46.0)       # mm
    intensity_jitter: float = 0.05
    blur: float = 0.6                       # voxels, in-plane Gaussian sigma
    noise_std: float = 0.02
    supersample: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        for key in ("lv_radius", "myo_thickness", "rv_radius", "contraction", "taper", "body_radius"):
            lo, hi = getattr(self, key)
            if not lo <= hi:
                raise GeometryError(key, f"range must be ordered, got {(lo, hi)}")
        for key in ("lv_radius", "myo_thickness", "rv_radius", "body_radius"):
            if getattr(self, key)[0] <= 0:
                raise GeometryError(key, "radii and thickness must be positive")
        lo, hi = self.contraction
        if not (0 < lo and hi <= 1):
            raise GeometryError("contraction", f"must lie in (0, 1], got {(lo, hi)}")
        if not (0 <= self.taper[0] and self.taper[1] < 1):
            raise GeometryError("taper", "must lie in [0, 1)")
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise GeometryError("dims", f"need three dims >= 4, got {self.dims}")
        if min(self.spacing) <= 0:
            raise GeometryError("spacing", "must be positive")
        if self.noise_std < 0 or self.blur < 0:
            raise GeometryError("noise_std", "noise and blur must be non-negative")
        if self.supersample < 1:
            raise GeometryError("supersample", "must be >= 1")


@dataclass
class PhantomCase:
    case_id: str
    params: dict
    ed_image: Volume
    ed_labels: LabelMap
    es_image: Volume
    es_labels: LabelMap
    gt_ddf: DisplacementField          # ED grid -> ES sampling positions
    gt_ddf_inverse: DisplacementField  # ES grid -> ED sampling positions
    lvef: float
    rvef: float
    mt_ed: float
    mt_es: float
    seed: Optional[int] = None

    def geometry_hash(self) -> str:
        keys = ("lv_radius", "myo_thickness", "rv_radius", "rv_shift", "rv_angle", "contraction", "taper",
                "center", "drift")
        blob = json.dumps({k: self.params[k] for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


class RadialMap:
    """Monotone in-plane radial profile ``g`` and its inverse for one slice.

    ``g`` is piecewise linear on the knots ``0 < r_endo < r_epi < r_band``
    (cavity, myocardium, RV band) and recovers to the identity on
    ``[r_band, r_support]`` through a half-sine bump in ``g'``.
    """

    def __init__(self, contraction, r_endo, r_epi, r_band, r_support, band_slope):
        c = contraction
        # the myocardial ring keeps its area
        g_epi = np.sqrt(r_epi**2 - (1.0 - c**2) * r_endo**2)
        g_band = g_epi + band_slope * (r_band - r_epi)
        self.c = c
        self.knots_r = np.array([0.0, r_endo, r_epi, r_band])
        self.knots_g = np.array([0.0, c * r_endo, g_epi, g_band])
        self.r_band = r_band
        self.g_band = g_band
        self.r_support = r_support
        width = r_support - r_band
        self.width = width
        self.amp = np.pi * (r_band - g_band) / (2.0 * width) if width > 0 else 0.0
        table_r = np.linspace(r_band, r_support, 4001)
        self._table_r = table_r
        self._table_g = self._recover(table_r)

    def _recover(self, r):
        q = np.clip((r - self.r_band) / self.width, 0.0, 1.0)
        return self.g_band + (r - self.r_band) + self.amp * self.width * (1.0 - np.cos(np.pi * q)) / np.pi

    def g(self, r):
        r = np.asarray(r, dtype=np.float64)
        inner = np.interp(r, self.knots_r, self.knots_g)
        out = np.where(r <= self.r_band, inner, self._recover(r))
        return np.where(r >= self.r_support, r, out)

    def g_inv(self, rho):
        rho = np.asarray(rho, dtype=np.float64)
        inner = np.interp(rho, self.knots_g, self.knots_r)
        outer = np.interp(rho, self._table_g, self._table_r)
        out = np.where(rho <= self.g_band, inner, outer)
        return np.where(rho >= self.r_support, rho, out)


def _draw(rng, bounds):
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _draw_params(cfg: PhantomConfig, rng: np.random.Generator) -> dict:
    p = {
        "lv_radius": _draw(rng, cfg.lv_radius),
        "myo_thickness": _draw(rng, cfg.myo_thickness),
        "rv_radius": _draw(rng, cfg.rv_radius),
        "rv_shift": _draw(rng, cfg.rv_shift),
        "rv_angle": _draw(rng, cfg.rv_angle),
        "contraction": _draw(rng, cfg.contraction),
        "taper": _draw(rng, cfg.taper),
        "body_radius": _draw(rng, cfg.body_radius),
        "drift": [float(v) for v in rng.uniform(-1.5, 1.5, size=2)],
        "jitter": [float(v) for v in rng.uniform(-1.0, 1.0, size=2)],
        "levels": {},
    }
    base = {AIR: 0.05, BODY: 0.45, MYO: 0.3, LV: 0.9, RV: 0.85}
    for code, level in base.items():
        p["levels"][str(code)] = level + float(rng.uniform(-1, 1)) * cfg.intensity_jitter
    return p


def _slice_geometry(cfg, p, z):
    nz = cfg.dims[2]
    frac = z / max(nz - 1, 1)
    shrink = 1.0 - p["taper"] * frac**2
    r_endo = p["lv_radius"] * shrink
    r_epi = r_endo + p["myo_thickness"]
    r_rv = p["rv_radius"] * shrink
    theta = np.deg2rad(p["rv_angle"])
    direction = np.array([np.cos(theta), np.sin(theta)])
    d_rv = r_epi + p["rv_shift"]
    center = np.asarray(p["center"]) + np.asarray(p["drift"]) * (frac - 0.5)
    rv_center = center + d_rv * direction
    r_band = d_rv + r_rv + 1.0
    return {
        "center": center,
        "r_endo": r_endo,
        "r_epi": r_epi,
        "rv_center": rv_center,
        "r_rv": r_rv,
        "r_band": r_band,
    }


def _place_heart(cfg, p):
    """Centre the heart's bounding extent in the grid, or raise if it cannot fit."""
    fov = np.array(cfg.dims[:2]) * np.array(cfg.spacing[:2])
    theta = np.deg2rad(p["rv_angle"])
    direction = np.array([np.cos(theta), np.sin(theta)])
    r_epi = p["lv_radius"] + p["myo_thickness"]
    reach = r_epi + p["rv_shift"] + p["rv_radius"]
    center = fov / 2.0 - 0.5 * (reach - r_epi) * direction + np.asarray(p["jitter"])
    margin = 2.0 * max(cfg.spacing[:2]) + 1.5
    pts = [center + r_epi * np.array([np.cos(a), np.sin(a)]) for a in np.linspace(0, 2 * np.pi, 33)]
    pts.append(center + reach * direction)
    pts = np.array(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    if np.any(lo < margin) or np.any(hi > fov - margin):
        raise GeometryError("lv_radius", f"heart extent {lo.round(1)}..{hi.round(1)} mm does not fit the "
                            f"{fov.round(1)} mm field of view")
    if np.linalg.norm(pts - fov / 2.0, axis=1).max() > p["body_radius"] - 1.0:
        raise GeometryError("body_radius", "body outline must enclose the heart")
    return center


def _scene(cfg, p, g, xy):
    """Tissue codes at in-plane physical points ``xy`` (..., 2) on one slice."""
    body_center = np.array(cfg.dims[:2]) * np.array(cfg.spacing[:2]) / 2.0
    codes = np.full(xy.shape[:-1], AIR, dtype=np.uint8)
    codes[np.hypot(xy[..., 0] - body_center[0], xy[..., 1] - body_center[1]) < p["body_radius"]] = BODY
    r_lv = np.hypot(xy[..., 0] - g["center"][0], xy[..., 1] - g["center"][1])
    r_rv = np.hypot(xy[..., 0] - g["rv_center"][0], xy[..., 1] - g["rv_center"][1])
    codes[(r_rv < g["r_rv"]) & (r_lv >= g["r_epi"])] = RV
    codes[(r_lv >= g["r_endo"]) & (r_lv < g["r_epi"])] = MYO
    codes[r_lv < g["r_endo"]] = LV
    return codes


def _radial(cfg, p, g):
    support = g["r_band"] + cfg.support_margin
    band_slope = 0.5 * (1.0 + p["contraction"])
    return RadialMap(p["contraction"], g["r_endo"], g["r_epi"], g["r_band"], support, band_slope)


def _map_points(xy, center, fn):
    d = xy - center
    r = np.hypot(d[..., 0], d[..., 1])
    safe = np.where(r > 0, r, 1.0)
    scale = np.where(r > 0, fn(r) / safe, 1.0)
    return center + d * scale[..., None]


def _render(cfg, p, codes_fn):
    """Supersampled label rendering, returns (labels at centres, mean intensity)."""
    nx, ny, nz = cfg.dims
    sx, sy, _ = cfg.spacing
    ss = cfg.supersample
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    fx = (np.arange(nx)[:, None] + offs[None, :]).ravel() * sx
    fy = (np.arange(ny)[:, None] + offs[None, :]).ravel() * sy
    fine = np.stack(np.meshgrid(fx, fy, indexing="ij"), axis=-1)
    cx = np.arange(nx) * sx
    cy = np.arange(ny) * sy
    centres = np.stack(np.meshgrid(cx, cy, indexing="ij"), axis=-1)
    lut = np.zeros(5)
    for code, level in p["levels"].items():
        lut[int(code)] = level
    labels = np.zeros(cfg.dims, dtype=np.uint8)
    image = np.zeros(cfg.dims)
    for z in range(nz):
        codes = codes_fn(z, centres)
        labels[:, :, z] = np.where(codes == BODY, AIR, codes)
        fine_codes = codes_fn(z, fine)
        image[:, :, z] = lut[fine_codes].reshape(nx, ss, ny, ss).mean(axis=(1, 3))
    return labels, image


def _finish_image(cfg, image, rng):
    if cfg.blur > 0:
        image = gaussian_filter(image, sigma=(cfg.blur, cfg.blur, 0.0), mode="nearest")
    if cfg.noise_std > 0:
        image = image + rng.normal(0.0, cfg.noise_std, size=image.shape)
    return image


def analytic_lvef(contraction: float) -> float:
    return 100.0 * (1.0 - contraction**2)


def generate_case(cfg: PhantomConfig = PhantomConfig(), rng: Optional[np.random.Generator] = None,
                  case_id: str = "case0000", seed: Optional[int] = None) -> PhantomCase:
    """Draw one ED/ES phantom pair with its exact deformation."""
    if rng is None:
        seed = cfg.seed if seed is None else seed
        rng = np.random.default_rng(seed)
    p = _draw_params(cfg, rng)
    p["center"] = [float(v) for v in _place_heart(cfg, p)]
    nx, ny, nz = cfg.dims
    sx, sy, _ = cfg.spacing
    geoms = [_slice_geometry(cfg, p, z) for z in range(nz)]
    maps = [_radial(cfg, p, g) for g in geoms]

    def ed_codes(z, xy):
        return _scene(cfg, p, geoms[z], xy)

    def es_codes(z, xy):
        src = _map_points(xy, geoms[z]["center"], maps[z].g_inv)
        return _scene(cfg, p, geoms[z], src)

    ed_labels, ed_img = _render(cfg, p, ed_codes)
    es_labels, es_img = _render(cfg, p, es_codes)
    ed_img = _finish_image(cfg, ed_img, rng)
    es_img = _finish_image(cfg, es_img, rng)

    grid = np.stack(np.meshgrid(np.arange(nx) * sx, np.arange(ny) * sy, indexing="ij"), axis=-1)
    fwd = np.zeros((3,) + cfg.dims)
    inv = np.zeros((3,) + cfg.dims)
    for z in range(nz):
        c = geoms[z]["center"]
        to_es = _map_points(grid, c, maps[z].g) - grid
        to_ed = _map_points(grid, c, maps[z].g_inv) - grid
        fwd[0, :, :, z], fwd[1, :, :, z] = to_es[..., 0] / sx, to_es[..., 1] / sy
        inv[0, :, :, z], inv[1, :, :, z] = to_ed[..., 0] / sx, to_ed[..., 1] / sy

    c = p["contraction"]
    mt_ed = p["myo_thickness"]
    mt_es = float(np.mean([m.g(g["r_epi"]) - c * g["r_endo"] for m, g in zip(maps, geoms)]))
    rvef = _reference_rvef(cfg, p, geoms, maps)
    return PhantomCase(
        case_id=case_id,
        params=p,
        ed_image=Volume(ed_img, cfg.spacing),
        ed_labels=LabelMap(ed_labels, cfg.spacing),
        es_image=Volume(es_img, cfg.spacing),
        es_labels=LabelMap(es_labels, cfg.spacing),
        gt_ddf=DisplacementField(fwd, cfg.spacing),
        gt_ddf_inverse=DisplacementField(inv, cfg.spacing),
        lvef=analytic_lvef(c),
        rvef=rvef,
        mt_ed=float(mt_ed),
        mt_es=mt_es,
        seed=seed,
    )


def _reference_rvef(cfg, p, geoms, maps, n_angles=4096):
    """RV ejection fraction from the polar area integral of the crescent.

    Along each ray from the LV centre the RV occupies ``[max(r_lo, r_epi), r_hi]``
    (the chord through the RV disc). Areas are ``1/2 * int r^2 dtheta`` at ED
    and ``1/2 * int g(r)^2 dtheta`` at ES since the map is radial.
    """
    theta = (np.arange(n_angles) + 0.5) * (2.0 * np.pi / n_angles)
    dirs = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    ed_area = es_area = 0.0
    for g, m in zip(geoms, maps):
        d = g["rv_center"] - g["center"]
        b = dirs @ d
        disc = b * b - (d @ d - g["r_rv"] ** 2)
        root = np.sqrt(np.maximum(disc, 0.0))
        r_hi = b + root
        r_lo = np.maximum(b - root, g["r_epi"])
        hit = (disc > 0) & (r_hi > r_lo)
        r_hi, r_lo = r_hi[hit], r_lo[hit]
        ed_area += 0.5 * np.sum(r_hi**2 - r_lo**2)
        es_area += 0.5 * np.sum(m.g(r_hi) ** 2 - m.g(r_lo) ** 2)
    return float(100.0 * (ed_area - es_area) / ed_area) if ed_area else 0.0


def generate_dataset(cfg: PhantomConfig, n_cases: int, rng: Optional[np.random.Generator] = None) -> List[PhantomCase]:
    """``n_cases`` independent phantoms, each seeded from ``rng`` (or ``cfg.seed``)."""
    if n_cases < 0:
        raise ValueError("n_cases must be non-negative")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    seeds = rng.integers(0, 2**31 - 1, size=n_cases)
    return [generate_case(cfg, case_id=f"case{i:04d}", seed=int(s)) for i, s in enumerate(seeds)]


def split_indices(n: int, fractions=(0.8, 0.1, 0.1)):
    """Deterministic contiguous train/val/test index ranges."""
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return range(0, n_train), range(n_train, n_train + n_val), range(n_train + n_val, n)


CASE_FILES = {
    "ed_image": "ed_image.fvol",
    "ed_labels": "ed_labels.fvol",
    "es_image": "es_image.fvol",
    "es_labels": "es_labels.fvol",
    "gt_ddf": "gt_ddf.fvol",
    "gt_ddf_inverse": "gt_ddf_inverse.fvol",
}


def save_case(case: PhantomCase, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for attr, name in CASE_FILES.items():
        io.write_fvol(directory / name, getattr(case, attr))
    io.write_manifest(directory / "manifest.txt", {
        "case_id": case.case_id,
        "seed": case.seed,
        "lvef": repr(case.lvef),
        "rvef": repr(case.rvef),
        "mt_ed": repr(case.mt_ed),
        "mt_es": repr(case.mt_es),
        "params": json.dumps(case.params, sort_keys=True),
    })
    return directory


def load_case(directory) -> PhantomCase:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"case directory not found: {directory}")
    meta = io.read_manifest(directory / "manifest.txt")
    arrays = {attr: io.read_fvol(directory / name) for attr, name in CASE_FILES.items()}
    seed = meta.get("seed")
    return PhantomCase(
        case_id=meta["case_id"],
        params=json.loads(meta["params"]),
        lvef=float(meta["lvef"]),
        rvef=float(meta["rvef"]),
        mt_ed=float(meta["mt_ed"]),
        mt_es=float(meta["mt_es"]),
        seed=None if seed in (None, "None") else int(seed),
        **arrays,
    )


def save_dataset(cases, directory, cfg: Optional[PhantomConfig] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for case in cases:
        save_case(case, directory / case.case_id)
    meta = {"n_cases": len(cases), "case_ids": [c.case_id for c in cases]}
    if cfg is not None:
        meta["config"] = json.dumps(asdict(cfg), sort_keys=True)
    io.write_manifest(directory / "manifest.txt", meta)
    return directory


def load_dataset(directory) -> List[PhantomCase]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    meta = io.read_manifest(directory / "manifest.txt")
    ids = [s for s in meta.get("case_ids", "").split(",") if s]
    return [load_case(directory / cid) for cid in ids]
