import numpy as np
import pytest

from oxyfield.calib import (BandGrid, CameraProfile, calibration_at_distance,
                            synthesize_default_calibration)
from oxyfield.oxy import build_synthetic_library
from oxyfield.pipeline import make_demo_pipeline


def tiny_profile(bands: int = 16, lenses: int = 16, sub_w: int = 24,
                 sub_h: int = 20) -> CameraProfile:
    """Small camera description for fast unit tests (4x4 lens grid)."""
    return CameraProfile(
        name="s5",  # reuse a known profile name so configs validate
        lens_count=lenses,
        subimage_width=sub_w,
        subimage_height=sub_h,
        sensor_width=4 * sub_w,
        sensor_height=(lenses // 4) * sub_h,
        bit_depth=12,
        max_fps=15.0,
        band_grid=BandGrid(np.linspace(460.0, 610.0, bands)),
        fov_deg=30.0,
    )


@pytest.fixture(scope="session")
def tiny_calib():
    return synthesize_default_calibration(tiny_profile(), [56.0])


@pytest.fixture(scope="session")
def tiny_resolved(tiny_calib):
    return calibration_at_distance(tiny_calib, 56.0)


@pytest.fixture(scope="session")
def tiny_library(tiny_calib):
    return build_synthetic_library(12, grid=tiny_calib.profile.band_grid)


@pytest.fixture(scope="session")
def s5_wedge():
    """Full-size s5 wedge scenario with one rendered noise-free frame."""
    pipeline, source, phantom = make_demo_pipeline("s5", 36, "wedge")
    frame = source.frame(0)
    return pipeline, source, phantom, frame
