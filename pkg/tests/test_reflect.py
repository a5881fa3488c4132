import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oxyfield.cube import STAGE_RAW, STAGE_UNIFORM, SpectralCube
from oxyfield.reflect import (EPS_WHITE, MIN_VALID_FRACTION, RegionOfInterest,
                              WhiteReferenceError, extract_white_reference,
                              normalize_reflectance)


def uniform_cube(values, valid=None, wl=None):
    values = np.asarray(values, dtype=np.float32)
    if valid is None:
        valid = np.ones_like(values, dtype=bool)
    if wl is None:
        wl = np.linspace(450, 850, values.shape[0]).astype(np.float32)
    return SpectralCube(values, valid, STAGE_UNIFORM, wl)


class TestRoi:
    def test_rejects_small_area(self):
        with pytest.raises(ValueError):
            RegionOfInterest(0, 0, 3, 3)

    def test_rejects_nonpositive_sides(self):
        with pytest.raises(ValueError):
            RegionOfInterest(0, 0, 0, 20)

    def test_within(self):
        roi = RegionOfInterest(10, 10, 8, 8)
        assert roi.within(18, 18)
        assert not roi.within(17, 18)


class TestExtract:
    def test_median_oracle(self):
        rng = np.random.default_rng(3)
        cube = uniform_cube(100.0 * rng.random((6, 20, 20)) + 50.0)
        roi = RegionOfInterest(4, 5, 10, 8)
        white = extract_white_reference(cube, roi)
        for b in range(6):
            patch = cube.values[b, 5:13, 4:14]
            assert white.values[b] == pytest.approx(np.median(patch), rel=1e-6)
        assert white.valid.all()

    def test_gauze_factor_divides(self):
        cube = uniform_cube(np.full((6, 20, 20), 80.0))
        roi = RegionOfInterest(0, 0, 8, 8)
        white = extract_white_reference(cube, roi, gauze_reflectance_factor=0.8)
        assert np.allclose(white.values, 100.0)

    def test_median_robust_to_minority_outliers(self):
        vals = np.full((4, 16, 16), 50.0, dtype=np.float32)
        vals[:, :3, :] = 4000.0  # specular glint rows inside the roi
        cube = uniform_cube(vals)
        white = extract_white_reference(cube, RegionOfInterest(0, 0, 16, 16))
        assert np.allclose(white.values, 50.0)

    def test_band_invalid_below_valid_fraction(self):
        vals = np.full((4, 16, 16), 50.0, dtype=np.float32)
        valid = np.ones_like(vals, dtype=bool)
        valid[1, :, :] = False
        valid[1, :2, :2] = True  # 4/256 valid, below the 25% floor
        cube = uniform_cube(vals, valid)
        white = extract_white_reference(cube, RegionOfInterest(0, 0, 16, 16))
        assert not white.valid[1]
        assert white.valid[[0, 2, 3]].all()

    def test_band_invalid_when_median_at_floor(self):
        vals = np.full((4, 16, 16), 50.0, dtype=np.float32)
        vals[2] = EPS_WHITE  # dark band: no usable reference signal
        cube = uniform_cube(vals)
        white = extract_white_reference(cube, RegionOfInterest(0, 0, 16, 16))
        assert not white.valid[2]

    def test_all_bands_dark_raises(self):
        cube = uniform_cube(np.zeros((4, 16, 16), dtype=np.float32))
        with pytest.raises(WhiteReferenceError):
            extract_white_reference(cube, RegionOfInterest(0, 0, 16, 16))

    def test_requires_uniform_stage(self):
        vals = np.ones((4, 16, 16), dtype=np.float32)
        cube = SpectralCube(vals, np.ones_like(vals, dtype=bool), STAGE_RAW,
                            np.full(4, np.nan, dtype=np.float32))
        with pytest.raises(WhiteReferenceError):
            extract_white_reference(cube, RegionOfInterest(0, 0, 16, 16))

    def test_roi_outside_scene_raises(self):
        cube = uniform_cube(np.ones((4, 16, 16)))
        with pytest.raises(WhiteReferenceError):
            extract_white_reference(cube, RegionOfInterest(10, 10, 8, 8))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_median_unchanged_while_outliers_minority(self, seed):
        rng = np.random.default_rng(seed)
        vals = np.full((2, 16, 16), 100.0, dtype=np.float32)
        n_out = rng.integers(0, 127)  # strictly fewer than half of 256
        idx = rng.choice(256, size=n_out, replace=False)
        flat = vals.reshape(2, -1)
        flat[:, idx] = rng.uniform(500, 4000, size=(2, n_out))
        cube = uniform_cube(flat.reshape(2, 16, 16))
        white = extract_white_reference(cube, RegionOfInterest(0, 0, 16, 16),
                                        gauze_reflectance_factor=1.0)
        assert np.allclose(white.values, 100.0)


class TestNormalize:
    def test_white_roi_self_normalizes_to_unity(self):
        rng = np.random.default_rng(11)
        spectrum = rng.uniform(40, 400, 6).astype(np.float32)
        cube = uniform_cube(np.tile(spectrum[:, None, None], (1, 20, 20)))
        roi = RegionOfInterest(2, 2, 10, 10)
        white = extract_white_reference(cube, roi)
        refl = normalize_reflectance(cube, white)
        patch = refl.values[:, 2:12, 2:12]
        assert np.all(np.abs(patch - 1.0) <= 1e-6)

    def test_invalid_white_band_propagates(self):
        vals = np.full((4, 16, 16), 60.0, dtype=np.float32)
        vals[3] = 0.0
        cube = uniform_cube(vals)
        white = extract_white_reference(cube, RegionOfInterest(0, 0, 16, 16))
        refl = normalize_reflectance(cube, white)
        assert not refl.valid[3].any()
        assert np.all(refl.values[3] == 0.0)

    def test_invalid_cube_pixels_stay_invalid(self):
        vals = np.full((4, 16, 16), 60.0, dtype=np.float32)
        valid = np.ones_like(vals, dtype=bool)
        valid[0, 5, 5] = False
        cube = uniform_cube(vals, valid)
        white = extract_white_reference(cube, RegionOfInterest(0, 0, 16, 16))
        refl = normalize_reflectance(cube, white)
        assert not refl.valid[0, 5, 5]
        assert refl.valid[0, 4, 4]
