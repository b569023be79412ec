import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddflow.volume import (
    DisplacementField, LabelMap, Volume, center_crop_or_pad, downsample_field, identity_grid, jacobian_map,
    noise_sigmas, sample_noise_field, trilinear_sample, upsample_field, warp_image, warp_labels,
)

SP = (1.5, 1.5, 3.15)


def ramp(dims, axis=0, spacing=(1.0, 1.0, 1.0)):
    return Volume(identity_grid(dims)[axis].copy(), spacing)


class TestTypes:
    def test_volume_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Volume(np.full((2, 2, 2), np.nan))

    def test_volume_rejects_bad_spacing(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))

    def test_field_needs_three_channels(self):
        with pytest.raises(ValueError):
            DisplacementField(np.zeros((2, 4, 4, 4)))

    def test_labels_outside_class_set(self):
        with pytest.raises(ValueError):
            LabelMap(np.full((2, 2, 2), 7, dtype=np.uint8))


class TestSampling:
    def test_integer_coordinate_returns_voxel(self, rng):
        vol = Volume(rng.standard_normal((4, 5, 6)))
        assert trilinear_sample(vol, (1, 2, 3)) == vol.data[1, 2, 3]

    def test_linear_ramp_midpoint(self):
        assert trilinear_sample(ramp((4, 3, 3)), (1.5, 0, 0)) == pytest.approx(1.5, abs=1e-15)

    def test_border_clamp(self, rng):
        vol = Volume(rng.standard_normal((4, 4, 4)))
        assert trilinear_sample(vol, (-5, 0, 0)) == vol.data[0, 0, 0]

    @given(st.tuples(*[st.floats(0.0, 5.0)] * 3), st.tuples(*[st.floats(-2, 2)] * 4))
    def test_affine_functions_reproduced(self, p, coef):
        g = identity_grid((6, 6, 6))
        vol = Volume(coef[0] * g[0] + coef[1] * g[1] + coef[2] * g[2] + coef[3])
        expected = coef[0] * p[0] + coef[1] * p[1] + coef[2] * p[2] + coef[3]
        assert trilinear_sample(vol, p) == pytest.approx(expected, abs=1e-9)


class TestWarp:
    def test_zero_field_is_bitwise_identity(self, rng):
        vol = Volume(rng.standard_normal((5, 6, 4)))
        out = warp_image(vol, DisplacementField.zeros(vol.dims))
        assert np.array_equal(out.data, vol.data)

    def test_unit_shift_of_ramp(self):
        vol = ramp((6, 4, 4))
        u = np.zeros((3, 6, 4, 4))
        u[0] = 1.0
        out = warp_image(vol, DisplacementField(u))
        np.testing.assert_allclose(out.data[:-1], vol.data[:-1] + 1.0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            warp_image(Volume(np.zeros((4, 4, 4))), DisplacementField.zeros((4, 4, 5)))

    def test_phantom_ground_truth_reproduces_ed(self, small_cases):
        case = small_cases[0]
        warped = warp_image(case.es_image, case.gt_ddf)
        # blur + noise dominate; interpolation adds little on top
        assert np.mean(np.abs(warped.data - case.ed_image.data)) < 3 * 0.02


class TestWarpLabels:
    def test_zero_field_identity(self, rng):
        lab = LabelMap(rng.integers(0, 4, (4, 4, 4)).astype(np.uint8))
        assert np.array_equal(warp_labels(lab, DisplacementField.zeros(lab.dims)).data, lab.data)

    def test_single_voxel_moves_one_step(self):
        data = np.zeros((5, 5, 5), dtype=np.uint8)
        data[2, 2, 2] = 3
        u = np.zeros((3, 5, 5, 5))
        u[0] = -1.0
        out = warp_labels(LabelMap(data), DisplacementField(u)).data
        assert out[3, 2, 2] == 3 and out.sum() == 3

    @given(arrays(np.uint8, (4, 4, 3), elements=st.sampled_from([0, 2])),
           arrays(np.float64, (3, 4, 4, 3), elements=st.floats(-3, 3)))
    def test_output_classes_subset(self, labels, u):
        out = warp_labels(LabelMap(labels), DisplacementField(u)).data
        assert set(np.unique(out)) <= set(np.unique(labels))


class TestJacobian:
    def test_zero_field_all_ones(self):
        assert np.array_equal(jacobian_map(DisplacementField.zeros((4, 5, 6))).data, np.ones((4, 5, 6)))

    def test_affine_field_determinant(self, rng):
        a = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
        g = identity_grid((6, 7, 5))
        u = np.einsum("ij,j...->i...", a, g) - g
        det = jacobian_map(DisplacementField(u)).data
        np.testing.assert_allclose(det[1:-1, 1:-1, 1:-1], np.linalg.det(a), atol=1e-10)

    def test_phantom_field_positive(self, small_cases):
        for case in small_cases:
            assert jacobian_map(case.gt_ddf).data.min() > 0

    def test_phantom_field_matches_radial_map(self, small_cases):
        """Compare against a finite-difference Jacobian of the analytic map evaluated off-grid."""
        from ddflow.synth import PhantomConfig, _radial, _slice_geometry

        case = small_cases[1]
        cfg = PhantomConfig()
        z = 6
        g = _slice_geometry(cfg, case.params, z)
        m = _radial(cfg, case.params, g)
        sx, sy = cfg.spacing[:2]
        det = jacobian_map(case.gt_ddf).data[:, :, z]
        c = np.asarray(g["center"])
        h = 1e-4
        errs = []
        for i, j in [(20, 30), (30, 40), (40, 25), (35, 35), (25, 22)]:
            p = np.array([i * sx, j * sy])

            def phi(q):
                d = q - c
                r = np.hypot(*d)
                return c + m.g(r) / r * d

            jac = np.stack([(phi(p + h * e) - phi(p - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
            if np.isfinite(jac).all():
                errs.append(abs(np.linalg.det(jac) - det[i, j]))
        # central differences on the grid smooth the kinks of the piecewise map
        assert np.median(errs) < 1e-2


class TestNoise:
    def test_sigmas_anisotropic(self):
        np.testing.assert_allclose(noise_sigmas(SP), [5.0, 5.0, 5 * 1.5 / 3.15], rtol=1e-12)
        assert noise_sigmas(SP)[2] == pytest.approx(2.3810, abs=1e-4)

    def test_sigmas_isotropic(self):
        np.testing.assert_allclose(noise_sigmas((1, 1, 1)), [5, 5, 5])

    def test_empirical_std(self):
        f = sample_noise_field((100, 100, 100), (1, 1, 2), np.random.default_rng(0))
        stds = f.data.reshape(3, -1).std(axis=1)
        np.testing.assert_allclose(stds, [5, 5, 2.5], rtol=0.01)

    def test_seeded(self):
        a = sample_noise_field((4, 4, 4), SP, np.random.default_rng(3))
        b = sample_noise_field((4, 4, 4), SP, np.random.default_rng(3))
        assert np.array_equal(a.data, b.data)


class TestPyramid:
    def test_constant_downsample(self):
        u = np.zeros((3, 16, 16, 8))
        u[0] = 8.0
        out = downsample_field(DisplacementField(u), 8)
        np.testing.assert_allclose(out.data[0], 1.0)
        np.testing.assert_allclose(out.data[1:], 0.0)

    def test_constant_upsample(self):
        u = np.zeros((3, 2, 2, 2))
        u[0] = 1.0
        np.testing.assert_allclose(upsample_field(DisplacementField(u), 2).data[0], 2.0)

    @given(st.sampled_from([2, 4, 8]), st.tuples(*[st.floats(-3, 3)] * 3))
    def test_constant_round_trip(self, f, c):
        u = np.broadcast_to(np.array(c)[:, None, None, None], (3, 16, 16, 8)).copy()
        back = upsample_field(downsample_field(DisplacementField(u), f), f)
        np.testing.assert_allclose(back.data, u, atol=1e-12)

    def test_linear_field_upsample_interior(self):
        # coarse u = x_coarse along x; fine grid sees u_fine(i) = f * ((i + .5)/f - .5) = i + .5 - f/2
        g = identity_grid((6, 6, 6))
        u = np.stack([g[0], np.zeros_like(g[0]), np.zeros_like(g[0])])
        up = upsample_field(DisplacementField(u), 2).data
        i = np.arange(12)
        expected = (i + 0.5 - 1.0)[:, None, None]
        np.testing.assert_allclose(up[0, 1:-1], np.broadcast_to(expected, (12, 12, 12))[1:-1], atol=1e-12)

    def test_smooth_round_trip_error(self, small_cases):
        from scipy.ndimage import gaussian_filter

        # low-pass the phantom motion at the pooling scale first: its radial profile has kinks at
        # tissue boundaries. The outer half block is excluded since upsampling clamps there.
        smooth = np.stack([gaussian_filter(c, 8.0, mode="nearest") for c in small_cases[0].gt_ddf.data])
        u = DisplacementField(smooth)
        back = upsample_field(downsample_field(u, 8), 8)
        inner = (slice(None),) + (slice(4, -4),) * 3
        rel = np.linalg.norm((back.data - u.data)[inner]) / np.linalg.norm(u.data[inner])
        assert rel < 0.1

    def test_spacing_tracks_factor(self):
        d = downsample_field(DisplacementField.zeros((8, 8, 8), (1.0, 2.0, 3.0)), 2)
        assert d.spacing == (2.0, 4.0, 6.0)

    def test_non_power_of_two(self):
        with pytest.raises(ValueError):
            downsample_field(DisplacementField.zeros((6, 6, 6)), 3)

    def test_not_divisible(self):
        with pytest.raises(ValueError):
            downsample_field(DisplacementField.zeros((6, 6, 6)), 4)


class TestCropPad:
    def test_identity(self, rng):
        vol = Volume(rng.standard_normal((4, 5, 6)))
        assert np.array_equal(center_crop_or_pad(vol, (4, 5, 6)).data, vol.data)

    def test_crop_marked_voxel(self):
        data = np.zeros((6, 1, 1))
        data[3] = 1.0
        out = center_crop_or_pad(Volume(data), (4, 1, 1))
        assert out.data[2, 0, 0] == 1.0

    def test_pad_constant(self):
        out = center_crop_or_pad(Volume(np.full((4, 4, 4), 2.5)), (6, 6, 6))
        np.testing.assert_array_equal(out.data, 2.5)

    def test_pad_labels_background_high_side(self):
        lab = LabelMap(np.full((2, 1, 1), 3, dtype=np.uint8))
        out = center_crop_or_pad(lab, (5, 1, 1)).data[:, 0, 0]
        assert list(out) == [0, 3, 3, 0, 0]
