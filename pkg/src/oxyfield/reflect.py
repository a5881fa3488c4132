"""Scene-dependent white reference and reflectance normalization."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cube import STAGE_REFLECTANCE, STAGE_UNIFORM, SpectralCube

EPS_WHITE = 1.0  # DN-equivalent floor below which a reference band is unusable
MIN_VALID_FRACTION = 0.25


class WhiteReferenceError(ValueError):
    pass


@dataclass(frozen=True)
class RegionOfInterest:
    x: int
    y: int
    width: int
    height: int
    frame_id: int = -1

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("roi dimensions must be positive")
        if self.width * self.height < 16:
            raise ValueError("roi area must be at least 16 pixels")

    def within(self, scene_width: int, scene_height: int) -> bool:
        return (self.x >= 0 and self.y >= 0
                and self.x + self.width <= scene_width
                and self.y + self.height <= scene_height)


@dataclass(frozen=True)
class WhiteReferenceCube:
    """Per-band reference spectrum (broadcast spatially) with band validity."""

    values: np.ndarray  # (bands,) float32
    valid: np.ndarray  # (bands,) bool
    wavelengths_nm: np.ndarray
    gauze_reflectance_factor: float
    frame_id: int
    timestamp: float = field(default_factory=time.monotonic)

    def __post_init__(self):
        if not 0.0 < self.gauze_reflectance_factor <= 1.0:
            raise WhiteReferenceError("gauze reflectance factor must be in (0, 1]")
        if np.any(self.values[self.valid] <= 0):
            raise WhiteReferenceError("valid reference bands must be positive")

    def age_s(self, now: float | None = None) -> float:
        return (time.monotonic() if now is None else now) - self.timestamp


def extract_white_reference(cube: SpectralCube, roi: RegionOfInterest,
                            gauze_reflectance_factor: float = 1.0) -> WhiteReferenceCube:
    """Per-band median over the roi, divided by the gauze reflectance factor.

    A band is invalid when fewer than 25% of its roi pixels are valid or the
    median falls at or below the reference floor.
    """
    if cube.stage != STAGE_UNIFORM:
        raise WhiteReferenceError("white reference requires a uniform-stage cube")
    if not roi.within(cube.width, cube.height):
        raise WhiteReferenceError(
            f"roi {roi} outside scene {cube.width}x{cube.height}")
    sl = (slice(None), slice(roi.y, roi.y + roi.height), slice(roi.x, roi.x + roi.width))
    vals = cube.values[sl].reshape(cube.plane_count, -1)
    mask = cube.valid[sl].reshape(cube.plane_count, -1)
    npix = vals.shape[1]
    counts = mask.sum(axis=1)
    medians = np.zeros(cube.plane_count, dtype=np.float64)
    for b in range(cube.plane_count):
        if counts[b]:
            medians[b] = np.median(vals[b][mask[b]])
    valid = (counts >= MIN_VALID_FRACTION * npix) & (medians > EPS_WHITE)
    if not valid.any():
        raise WhiteReferenceError("no usable reference band in roi (unusable white reference)")
    ref = (medians / gauze_reflectance_factor).astype(np.float32)
    ref[~valid] = 0.0
    return WhiteReferenceCube(
        values=ref,
        valid=valid,
        wavelengths_nm=cube.wavelengths_nm.copy(),
        gauze_reflectance_factor=float(gauze_reflectance_factor),
        frame_id=roi.frame_id,
    )


def normalize_reflectance(cube: SpectralCube, white: WhiteReferenceCube) -> SpectralCube:
    """Divide the uniform cube by the white reference, band by band."""
    if cube.stage != STAGE_UNIFORM:
        raise WhiteReferenceError("normalization requires a uniform-stage cube")
    if cube.plane_count != white.values.size or not np.array_equal(
            cube.wavelengths_nm, white.wavelengths_nm):
        raise WhiteReferenceError("cube and white reference band grids differ")
    denom = np.where(white.valid, white.values, 1.0).astype(np.float32)
    valid = cube.valid & white.valid[:, None, None]
    values = (cube.values / denom[:, None, None]) * valid
    return SpectralCube(values, valid, STAGE_REFLECTANCE, cube.wavelengths_nm.copy())
