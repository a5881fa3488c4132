import numpy as np
import pytest

from oxyfield.cube import extract_raw_cube
from oxyfield.oxy import build_synthetic_library
from oxyfield.sim import (GAUZE_STRIP_ROWS, NoiseModel, ScenePhantom,
                          SimulatedSource, gauze_roi, make_props_phantom,
                          make_resection_phantom, make_wedge_phantom,
                          surgical_light)

from conftest import tiny_profile


class TestIlluminant:
    def test_full_power_inside_surgical_band(self):
        light = surgical_light()
        lam = np.arange(450.0, 701.0, 2.0)
        assert np.allclose(light.at(lam), light.at(np.array([575.0])))

    def test_zero_outside_emission_range(self):
        light = surgical_light()
        assert light.at(np.array([350.0]))[0] == 0.0
        assert light.at(np.array([900.0]))[0] == 0.0

    def test_scaled(self):
        light = surgical_light()
        lam = np.array([500.0, 600.0])
        assert np.allclose(light.scaled(2.5).at(lam), 2.5 * light.at(lam))


class TestPhantoms:
    def test_wedge_uses_exact_library_levels(self):
        ph = make_wedge_phantom(48, 40, levels=12)
        levels = np.linspace(0.0, 1.0, 12)
        tissue_vals = np.unique(ph.so2[ph.tissue])
        assert np.all(np.isin(tissue_vals, levels))
        assert tissue_vals.size > 1

    def test_wedge_gauze_strip_on_top(self):
        ph = make_wedge_phantom(48, 40, levels=12)
        assert not ph.tissue[:GAUZE_STRIP_ROWS // 2].any()
        assert (ph.material[0] == ph.material_names.index("gauze")).all()

    def test_resection_halves(self):
        ph = make_resection_phantom(60, 50)
        col = ph.boundary_col(0)
        row = ph.so2[GAUZE_STRIP_ROWS + 5]
        assert np.all(row[:col] == 31.0 / 35.0)
        assert np.all(row[col:] == 4.0 / 35.0)

    def test_resection_drift_script(self):
        ph = make_resection_phantom(60, 50, drift_px_per_frame=2.0)
        assert ph.boundary_col(5) == ph.boundary_col(0) + 10
        so2_later = ph.so2_at(5)
        row = so2_later[GAUZE_STRIP_ROWS + 5]
        assert np.all(row[:ph.boundary_col(5)] == 31.0 / 35.0)

    def test_so2_outside_tissue_rejected(self):
        so2 = np.full((8, 8), 0.5)  # so2 present on non-tissue pixels
        tissue = np.zeros((8, 8), dtype=bool)
        with pytest.raises(ValueError):
            ScenePhantom("bad", 8, 8, so2, tissue,
                         np.zeros((8, 8), dtype=np.int16), ["gauze"])

    def test_gauze_roi_lies_on_gauze(self):
        ph = make_props_phantom(60, 50)
        roi = gauze_roi(ph)
        region = ph.material[roi.y:roi.y + roi.height, roi.x:roi.x + roi.width]
        assert np.all(region == ph.material_names.index("gauze"))


class TestRendering:
    @pytest.fixture(scope="class")
    def source(self, tiny_calib, tiny_library):
        ph = make_wedge_phantom(tiny_calib.profile.subimage_width,
                                tiny_calib.profile.subimage_height, levels=12,
                                gauze_rows=6)
        return SimulatedSource(ph, tiny_library, tiny_calib,
                               integration_time_ms=5.0)

    def test_noise_free_render_is_deterministic(self, source):
        a = source.frame(0)
        b = source.frame(0)
        assert np.array_equal(a.pixels, b.pixels)

    def test_seeded_noise_is_reproducible_per_frame(self, tiny_calib, tiny_library):
        ph = make_wedge_phantom(tiny_calib.profile.subimage_width,
                                tiny_calib.profile.subimage_height, levels=12,
                                gauze_rows=6)
        noisy = SimulatedSource(ph, tiny_library, tiny_calib,
                                integration_time_ms=5.0,
                                noise=NoiseModel(read_sigma_dn=4.0, seed=42))
        again = SimulatedSource(ph, tiny_library, tiny_calib,
                                integration_time_ms=5.0,
                                noise=NoiseModel(read_sigma_dn=4.0, seed=42))
        assert np.array_equal(noisy.frame(0).pixels, again.frame(0).pixels)
        assert not np.array_equal(noisy.frame(0).pixels, noisy.frame(1).pixels)

    def test_long_integration_saturates(self, tiny_calib, tiny_library, source):
        ph = source.phantom
        hot = SimulatedSource(ph, tiny_library, tiny_calib,
                              integration_time_ms=500.0)
        frame = hot.frame(0)
        assert (frame.pixels == tiny_calib.profile.max_dn).mean() > 0.2
        cube = extract_raw_cube(frame, tiny_calib.layout)
        sat = frame.pixels == tiny_calib.profile.max_dn
        for i, (x0, y0, w, h) in enumerate(tiny_calib.layout.regions):
            assert not cube.valid[i][sat[y0:y0 + h, x0:x0 + w]].any()

    def test_illuminant_scaling_scales_dn(self, tiny_calib, tiny_library, source):
        bright = SimulatedSource(source.phantom, tiny_library, tiny_calib,
                                 integration_time_ms=5.0,
                                 illuminant=surgical_light().scaled(2.0))
        a = source.frame(0).pixels.astype(np.float64)
        b = bright.frame(0).pixels.astype(np.float64)
        lit = a > 20
        ratio = b[lit] / a[lit]
        sat = b >= tiny_calib.profile.max_dn
        assert np.median(ratio[~sat[lit]]) == pytest.approx(2.0, rel=0.05)

    def test_iterator_respects_frame_count(self, tiny_calib, tiny_library, source):
        limited = SimulatedSource(source.phantom, tiny_library, tiny_calib,
                                  integration_time_ms=5.0, frame_count=3)
        frames = list(limited)
        assert [f.frame_id for f in frames] == [0, 1, 2]
