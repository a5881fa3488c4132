import numpy as np
import pytest

from oxyfield.calib import (PRIORITY_RANGE_NM, BandGrid, CalibrationError,
                            calibration_at_distance, calibration_from_dict,
                            calibration_to_dict, get_profile, load_calibration,
                            s5_profile, save_calibration,
                            synthesize_default_calibration, x20_profile)

from conftest import tiny_profile


class TestBandGrid:
    def test_count_and_bounds(self):
        g = BandGrid(np.array([450.0, 458.0, 466.0]))
        assert g.count == 3
        assert g.min_nm == 450.0 and g.max_nm == 466.0

    def test_rejects_non_increasing(self):
        with pytest.raises(CalibrationError):
            BandGrid(np.array([450.0, 450.0, 466.0]))
        with pytest.raises(CalibrationError):
            BandGrid(np.array([470.0, 460.0]))

    def test_rejects_single_band(self):
        with pytest.raises(CalibrationError):
            BandGrid(np.array([500.0]))

    def test_local_spacing_uniform_grid(self):
        g = BandGrid(np.linspace(400.0, 480.0, 11))
        assert np.allclose(g.local_spacing(), 8.0)

    def test_local_spacing_positive_on_irregular_grid(self):
        g = BandGrid(np.array([400.0, 410.0, 440.0, 441.0]))
        assert np.all(g.local_spacing() > 0)


class TestProfiles:
    def test_s5_shape(self):
        p = s5_profile()
        assert p.subimage_width == 290 and p.subimage_height == 275
        assert p.band_grid.count == 51
        assert p.lens_count == 42
        assert p.bit_depth == 12 and p.max_dn == 4095
        assert p.max_fps == 15.0

    def test_x20_shape(self):
        p = x20_profile()
        assert p.subimage_width == 410 and p.subimage_height == 410
        assert p.band_grid.count == 164
        assert p.lens_count == 66

    def test_lookup(self):
        assert get_profile("s5").name == "s5"
        with pytest.raises(CalibrationError):
            get_profile("nope")

    def test_subimages_must_fit_sensor(self):
        from oxyfield.calib import CameraProfile
        with pytest.raises(CalibrationError):
            CameraProfile("s5", lens_count=100, subimage_width=24,
                          subimage_height=20, sensor_width=96, sensor_height=100,
                          bit_depth=12, max_fps=15.0,
                          band_grid=BandGrid(np.linspace(460.0, 610.0, 16)),
                          fov_deg=30.0)


class TestLayout:
    def test_overlapping_regions_rejected(self):
        regions = np.array([[0, 0, 10, 10], [5, 5, 10, 10]])
        with pytest.raises(CalibrationError):
            from oxyfield.calib import MicrolensLayout
            MicrolensLayout(regions, 64, 64)

    def test_out_of_sensor_rejected(self):
        regions = np.array([[0, 0, 10, 10], [60, 60, 10, 10]])
        with pytest.raises(CalibrationError):
            from oxyfield.calib import MicrolensLayout
            MicrolensLayout(regions, 64, 64)


class TestResolution:
    def test_exact_distance_is_bitwise(self, tiny_calib):
        r = calibration_at_distance(tiny_calib, 56.0)
        assert np.array_equal(r.homographies, tiny_calib.homographies.matrices[0])
        assert not r.extrapolated

    def test_midpoint_blend_is_linear(self):
        calib = synthesize_default_calibration(tiny_profile(), [40.0, 80.0])
        lo = calibration_at_distance(calib, 40.0)
        hi = calibration_at_distance(calib, 80.0)
        mid = calibration_at_distance(calib, 60.0)
        assert np.allclose(mid.homographies,
                           0.5 * (lo.homographies + hi.homographies))
        assert np.allclose(mid.dispersion_coeffs,
                           0.5 * (lo.dispersion_coeffs + hi.dispersion_coeffs))
        assert not mid.extrapolated

    def test_outside_range_clamps_and_flags(self, tiny_calib):
        near = calibration_at_distance(tiny_calib, 10.0)
        assert near.extrapolated
        assert np.array_equal(near.homographies,
                              tiny_calib.homographies.matrices[0])

    def test_rejects_nonpositive_distance(self, tiny_calib):
        with pytest.raises(CalibrationError):
            calibration_at_distance(tiny_calib, 0.0)


class TestSynthesis:
    def test_reference_distance_homographies_are_identity(self, tiny_calib):
        h = tiny_calib.homographies.matrices[0]
        assert np.array_equal(h, np.broadcast_to(np.eye(3), h.shape))

    def test_dispersion_centers_cover_priority_bands(self):
        profile = s5_profile()
        calib = synthesize_default_calibration(profile, [56.0])
        wl = profile.band_grid.wavelengths_nm
        priority = wl[(wl >= PRIORITY_RANGE_NM[0]) & (wl <= PRIORITY_RANGE_NM[1])]
        coeffs = calib.dispersion.coeffs[0]
        w = profile.subimage_width
        centers = coeffs[:, 0] + coeffs[:, 1] * (w - 1) / 2.0
        # every priority band wavelength has a lens centered on it
        for lam in priority:
            assert np.min(np.abs(centers - lam)) < 1e-6

    def test_dispersion_stays_within_grid_bounds(self, tiny_calib):
        grid = tiny_calib.profile.band_grid
        for lens in range(tiny_calib.profile.lens_count):
            wlmap = tiny_calib.dispersion.wavelength_map(
                0, lens, tiny_calib.profile.subimage_width,
                tiny_calib.profile.subimage_height)
            assert wlmap.min() >= grid.min_nm - 50
            assert wlmap.max() <= grid.max_nm + 50

    def test_deterministic(self):
        a = synthesize_default_calibration(tiny_profile(), [56.0])
        b = synthesize_default_calibration(tiny_profile(), [56.0])
        assert np.array_equal(a.homographies.matrices, b.homographies.matrices)
        assert np.array_equal(a.dispersion.coeffs, b.dispersion.coeffs)


class TestSerialization:
    def test_dict_round_trip_bitwise(self, tiny_calib):
        doc = calibration_to_dict(tiny_calib)
        back = calibration_from_dict(doc)
        assert np.array_equal(back.homographies.matrices,
                              tiny_calib.homographies.matrices)
        assert np.array_equal(back.dispersion.coeffs, tiny_calib.dispersion.coeffs)
        assert np.array_equal(back.layout.regions, tiny_calib.layout.regions)
        assert np.array_equal(back.profile.band_grid.wavelengths_nm,
                              tiny_calib.profile.band_grid.wavelengths_nm)

    def test_file_round_trip_bitwise(self, tiny_calib, tmp_path):
        path = tmp_path / "tiny.calib"
        save_calibration(tiny_calib, path)
        back = load_calibration(path)
        assert np.array_equal(back.homographies.matrices,
                              tiny_calib.homographies.matrices)
        assert np.array_equal(back.homographies.distances_cm,
                              tiny_calib.homographies.distances_cm)
        assert np.array_equal(back.dispersion.coeffs, tiny_calib.dispersion.coeffs)
