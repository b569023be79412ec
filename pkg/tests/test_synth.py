import time

import numpy as np
import pytest

from ddflow import io
from ddflow.metrics import LV, MYO, RV, dice, ejection_fraction
from ddflow.synth import (
    GeometryError, PhantomConfig, analytic_lvef, generate_case, generate_dataset, load_dataset, save_dataset,
    split_indices,
)
from ddflow.volume import jacobian_map, warp_image, warp_labels

SMALL = PhantomConfig(dims=(32, 32, 8), lv_radius=(8.0, 9.0), myo_thickness=(4.0, 5.0), rv_radius=(7.0, 8.0),
                      body_radius=(20.0, 22.0), support_margin=4.0)


def case_bytes(case):
    return b"".join(io.encode_fvol(getattr(case, k)) for k in
                    ("ed_image", "ed_labels", "es_image", "es_labels", "gt_ddf", "gt_ddf_inverse"))


def test_unit_contraction_is_identity():
    c = generate_case(PhantomConfig(contraction=(1.0, 1.0)), seed=3)
    assert np.count_nonzero(c.gt_ddf.data) == 0
    assert np.array_equal(c.ed_labels.data, c.es_labels.data)
    assert c.lvef == 0.0


def test_analytic_lvef():
    assert analytic_lvef(0.7) == pytest.approx(51.0)
    assert analytic_lvef(1.0) == 0.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_lvef_matches_voxel_count(seed):
    c = generate_case(PhantomConfig(contraction=(0.7, 0.7)), seed=seed)
    assert c.lvef == pytest.approx(51.0)
    assert ejection_fraction(c.ed_labels, c.es_labels, LV) == pytest.approx(51.0, abs=2.0)


def test_rvef_matches_voxel_count(small_cases):
    for c in small_cases:
        assert ejection_fraction(c.ed_labels, c.es_labels, RV) == pytest.approx(c.rvef, abs=2.0)


def test_seed_determinism():
    a, b = generate_case(SMALL, seed=5), generate_case(SMALL, seed=5)
    assert case_bytes(a) == case_bytes(b)
    assert case_bytes(a) != case_bytes(generate_case(SMALL, seed=6))


def test_dataset_hashes_unique():
    cases = generate_dataset(SMALL, 12, np.random.default_rng(1))
    assert len({c.geometry_hash() for c in cases}) == 12
    assert [c.case_id for c in cases[:2]] == ["case0000", "case0001"]


def test_empty_dataset():
    assert generate_dataset(SMALL, 0) == []
    with pytest.raises(ValueError):
        generate_dataset(SMALL, -1)


def test_classes_present(small_cases):
    for c in small_cases:
        for lab in (c.ed_labels, c.es_labels):
            assert set(np.unique(lab.data)) == {0, RV, MYO, LV}


def test_ground_truth_warp_quality(small_cases):
    for c in small_cases:
        warped = warp_labels(c.es_labels, c.gt_ddf)
        for cls in (RV, MYO, LV):
            assert dice(warped, c.ed_labels, cls) >= 0.93
        err = np.mean(np.abs(warp_image(c.es_image, c.gt_ddf).data - c.ed_image.data))
        assert err < 3 * PhantomConfig().noise_std


def test_inverse_field_maps_back(small_cases):
    c = small_cases[0]
    warped = warp_labels(c.ed_labels, c.gt_ddf_inverse)
    assert dice(warped, c.es_labels, LV) >= 0.93


def test_jacobian_positive(small_cases):
    for c in small_cases:
        assert jacobian_map(c.gt_ddf).data.min() > 0
        assert jacobian_map(c.gt_ddf_inverse).data.min() > 0


def test_motion_has_compact_support(small_cases):
    from ddflow.synth import _radial, _slice_geometry

    cfg = PhantomConfig()
    sx, sy = cfg.spacing[:2]
    gx, gy = np.meshgrid(np.arange(cfg.dims[0]) * sx, np.arange(cfg.dims[1]) * sy, indexing="ij")
    for c in small_cases:
        u = c.gt_ddf.data
        assert np.abs(u[2]).max() == 0
        for z in (0, cfg.dims[2] // 2, cfg.dims[2] - 1):
            g = _slice_geometry(cfg, c.params, z)
            r = np.hypot(gx - g["center"][0], gy - g["center"][1])
            outside = r >= _radial(cfg, c.params, g).r_support
            assert outside.any() and np.abs(u[:2, :, :, z][:, outside]).max() < 1e-9


def test_wall_thickens(small_cases):
    for c in small_cases:
        assert c.mt_es > c.mt_ed


@pytest.mark.parametrize("kw, key", [
    ({"lv_radius": (30.0, 35.0), "myo_thickness": (10.0, 12.0)}, "lv_radius"),
    ({"contraction": (0.0, 0.5)}, "contraction"),
    ({"lv_radius": (10.0, 8.0)}, "lv_radius"),
    ({"myo_thickness": (-1.0, 2.0)}, "myo_thickness"),
])
def test_geometry_errors_name_key(kw, key):
    with pytest.raises(GeometryError) as info:
        generate_case(PhantomConfig(**kw), seed=0)
    assert info.value.key == key


def test_split_indices():
    tr, va, te = split_indices(200)
    assert (len(tr), len(va), len(te)) == (160, 20, 20)
    assert tr.stop == va.start and va.stop == te.start
    assert [len(r) for r in split_indices(0)] == [0, 0, 0]


def test_save_load_round_trip(tmp_path):
    cases = generate_dataset(SMALL, 2, np.random.default_rng(4))
    save_dataset(cases, tmp_path / "ds", SMALL)
    back = load_dataset(tmp_path / "ds")
    assert [c.case_id for c in back] == ["case0000", "case0001"]
    for a, b in zip(cases, back):
        assert case_bytes(a) == case_bytes(b)
        assert (a.lvef, a.rvef, a.seed, a.params) == (b.lvef, b.rvef, b.seed, b.params)


def test_load_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope")


@pytest.mark.slow
def test_generation_budget():
    t0 = time.perf_counter()
    generate_dataset(PhantomConfig(), 200, np.random.default_rng(0))
    assert time.perf_counter() - t0 < 60.0
