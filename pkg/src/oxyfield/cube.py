"""Raw frame to uniform hyperspectral cube: extraction, warping, resampling."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .calib import BandGrid, MicrolensLayout, ResolvedCalibration

STAGE_RAW = "raw"
STAGE_TRANSFORMED = "transformed"
STAGE_UNIFORM = "uniform"
STAGE_REFLECTANCE = "reflectance"

STAGE_TAGS = {STAGE_RAW: 0, STAGE_TRANSFORMED: 1, STAGE_UNIFORM: 2, STAGE_REFLECTANCE: 3}
TAG_STAGES = {v: k for k, v in STAGE_TAGS.items()}


@dataclass(frozen=True)
class RawSensorFrame:
    pixels: np.ndarray  # (sensor_height, sensor_width) uint16 digital numbers
    bit_depth: int
    integration_time_ms: float
    frame_id: int
    timestamp: float = field(default_factory=time.monotonic)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint16:
            raise ValueError("raw frame pixels must be uint16")
        if px.ndim != 2:
            raise ValueError("raw frame pixels must be 2D")
        if px.max(initial=0) >= (1 << self.bit_depth):
            raise ValueError(f"pixel values exceed {self.bit_depth}-bit range")

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def max_dn(self) -> int:
        return (1 << self.bit_depth) - 1


@dataclass
class SpectralCube:
    """Stack of aligned 2D planes with a per-pixel-per-plane validity mask.

    Planes are lens sub-images for the raw/transformed stages and spectral
    bands for the uniform/reflectance stages; `wavelengths_nm[i]` is NaN for
    lens-indexed planes.
    """

    values: np.ndarray  # (planes, height, width) float32
    valid: np.ndarray  # (planes, height, width) bool
    stage: str
    wavelengths_nm: np.ndarray  # (planes,) float32, NaN on lens-indexed stages

    def __post_init__(self):
        if self.values.shape != self.valid.shape:
            raise ValueError("validity mask shape must match values")
        if self.values.ndim != 3:
            raise ValueError("cube values must be (planes, height, width)")
        if self.wavelengths_nm.shape != (self.values.shape[0],):
            raise ValueError("one wavelength entry per plane required")
        if self.stage not in STAGE_TAGS:
            raise ValueError(f"unknown stage {self.stage!r}")

    @property
    def plane_count(self) -> int:
        return int(self.values.shape[0])

    @property
    def height(self) -> int:
        return int(self.values.shape[1])

    @property
    def width(self) -> int:
        return int(self.values.shape[2])


def extract_raw_cube(frame: RawSensorFrame, layout: MicrolensLayout) -> SpectralCube:
    """Cut the sensor frame into per-lens planes; saturated pixels go invalid."""
    if frame.width != layout.sensor_width or frame.height != layout.sensor_height:
        raise ValueError(
            f"frame {frame.width}x{frame.height} does not match sensor "
            f"{layout.sensor_width}x{layout.sensor_height}")
    n = layout.lens_count
    w = int(layout.regions[0, 2])
    h = int(layout.regions[0, 3])
    values = np.empty((n, h, w), dtype=np.float32)
    valid = np.empty((n, h, w), dtype=bool)
    for i, (x0, y0, rw, rh) in enumerate(layout.regions):
        tile = frame.pixels[y0:y0 + rh, x0:x0 + rw]
        values[i] = tile
        valid[i] = tile < frame.max_dn
    return SpectralCube(values, valid, STAGE_RAW, np.full(n, np.nan, dtype=np.float32))


def _warp_plan(resolved: ResolvedCalibration):
    """Bilinear gather tables for warping each lens plane into the scene frame.

    Returns (i0, j0, fx, fy, inbounds): integer top-left source coords, the
    fractional parts, and an in-bounds flag, each (lens, H, W).
    """
    key = "warp_plan"
    if key in resolved._cache:
        return resolved._cache[key]
    h, w = resolved.scene_height, resolved.scene_width
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    ones = np.ones_like(xs)
    scene = np.stack([xs, ys, ones]).reshape(3, -1)
    n = resolved.lens_count
    i0 = np.empty((n, h, w), dtype=np.int32)
    j0 = np.empty((n, h, w), dtype=np.int32)
    fx = np.empty((n, h, w), dtype=np.float32)
    fy = np.empty((n, h, w), dtype=np.float32)
    inb = np.empty((n, h, w), dtype=bool)
    for lens in range(n):
        hinv = np.linalg.inv(resolved.homographies[lens])
        src = hinv @ scene
        sx = (src[0] / src[2]).reshape(h, w)
        sy = (src[1] / src[2]).reshape(h, w)
        jf = np.floor(sx)
        iy = np.floor(sy)
        fxl = sx - jf
        fyl = sy - iy
        # a zero fractional part needs no right/bottom neighbor
        inb[lens] = ((jf >= 0) & (iy >= 0)
                     & (jf + (fxl > 0) <= w - 1) & (iy + (fyl > 0) <= h - 1))
        jc = np.clip(jf, 0, w - 2 if w > 1 else 0)
        ic = np.clip(iy, 0, h - 2 if h > 1 else 0)
        j0[lens] = jc.astype(np.int32)
        i0[lens] = ic.astype(np.int32)
        # fractions relative to the clipped base: an exact hit on the far
        # edge becomes weight 1 on the (w-1, h-1) neighbor, staying exact
        fx[lens] = sx - jc
        fy[lens] = sy - ic
    plan = (i0, j0, fx, fy, inb)
    resolved._cache[key] = plan
    return plan


def _translation_plan(resolved: ResolvedCalibration):
    """Per-lens (tx, ty) when every inverse homography is a pure translation,
    else None.  Translations admit a gather-table-free warp kernel."""
    key = "translation_plan"
    if key in resolved._cache:
        return resolved._cache[key]
    n = resolved.lens_count
    t = np.empty((n, 2), dtype=np.float64)
    plan = t
    for lens in range(n):
        hinv = np.linalg.inv(resolved.homographies[lens])
        if not (hinv[0, 0] == 1.0 and hinv[1, 1] == 1.0 and hinv[2, 2] == 1.0
                and hinv[0, 1] == 0.0 and hinv[1, 0] == 0.0
                and hinv[2, 0] == 0.0 and hinv[2, 1] == 0.0):
            plan = None
            break
        t[lens, 0] = hinv[0, 2]
        t[lens, 1] = hinv[1, 2]
    resolved._cache[key] = plan
    return plan


def warp_cube(raw: SpectralCube, resolved: ResolvedCalibration) -> SpectralCube:
    """Resample each lens plane through its homography into the scene frame.

    Bilinear interpolation; a target pixel is invalid if its source falls
    outside the sub-image or any source pixel with nonzero weight is invalid.
    """
    if raw.plane_count != resolved.lens_count:
        raise ValueError("plane count does not match lens count")
    values = np.empty_like(raw.values)
    valid = np.empty_like(raw.valid)
    shifts = _translation_plan(resolved)
    if shifts is not None:
        _warp_kernel_shift(raw.values, raw.valid, shifts, values, valid)
    else:
        i0, j0, fx, fy, inb = _warp_plan(resolved)
        _warp_kernel(raw.values, raw.valid, i0, j0, fx, fy, inb, values, valid)
    return SpectralCube(values, valid, STAGE_TRANSFORMED, raw.wavelengths_nm.copy())


@njit(parallel=True, cache=True)
def _warp_kernel(v, m, i0, j0, fx, fy, inb, out, out_valid):
    n, h, w = v.shape
    for lens in prange(n):
        for y in range(h):
            for x in range(w):
                if not inb[lens, y, x]:
                    out[lens, y, x] = 0.0
                    out_valid[lens, y, x] = False
                    continue
                ii = i0[lens, y, x]
                jj = j0[lens, y, x]
                gx = fx[lens, y, x]
                gy = fy[lens, y, x]
                i1 = min(ii + 1, h - 1)
                j1 = min(jj + 1, w - 1)
                w00 = (1.0 - gx) * (1.0 - gy)
                w01 = gx * (1.0 - gy)
                w10 = (1.0 - gx) * gy
                w11 = gx * gy
                acc = (w00 * v[lens, ii, jj] + w01 * v[lens, ii, j1]
                       + w10 * v[lens, i1, jj] + w11 * v[lens, i1, j1])
                ok = True
                if w00 > 0 and not m[lens, ii, jj]:
                    ok = False
                elif w01 > 0 and not m[lens, ii, j1]:
                    ok = False
                elif w10 > 0 and not m[lens, i1, jj]:
                    ok = False
                elif w11 > 0 and not m[lens, i1, j1]:
                    ok = False
                out[lens, y, x] = np.float32(acc)
                out_valid[lens, y, x] = ok


@njit(parallel=True, cache=True)
def _warp_kernel_shift(v, m, shifts, out, out_valid):
    """Translation-only warp; reproduces the generic kernel's arithmetic
    without the per-pixel gather tables."""
    n, h, w = v.shape
    jmax = w - 2 if w > 1 else 0
    imax = h - 2 if h > 1 else 0
    for lens in prange(n):
        tx = shifts[lens, 0]
        ty = shifts[lens, 1]
        for y in range(h):
            sy = y + ty
            iy = np.floor(sy)
            fyl = sy - iy
            ic = min(max(iy, 0.0), float(imax))
            gy = np.float32(sy - ic)
            ii = int(ic)
            i1 = min(ii + 1, h - 1)
            row_ok = (iy >= 0) and (iy + (fyl > 0) <= h - 1)
            for x in range(w):
                sx = x + tx
                jf = np.floor(sx)
                fxl = sx - jf
                if not (row_ok and jf >= 0 and jf + (fxl > 0) <= w - 1):
                    out[lens, y, x] = 0.0
                    out_valid[lens, y, x] = False
                    continue
                jc = min(max(jf, 0.0), float(jmax))
                gx = np.float32(sx - jc)
                jj = int(jc)
                j1 = min(jj + 1, w - 1)
                w00 = (1.0 - gx) * (1.0 - gy)
                w01 = gx * (1.0 - gy)
                w10 = (1.0 - gx) * gy
                w11 = gx * gy
                acc = (w00 * v[lens, ii, jj] + w01 * v[lens, ii, j1]
                       + w10 * v[lens, i1, jj] + w11 * v[lens, i1, j1])
                ok = True
                if w00 > 0 and not m[lens, ii, jj]:
                    ok = False
                elif w01 > 0 and not m[lens, ii, j1]:
                    ok = False
                elif w10 > 0 and not m[lens, i1, jj]:
                    ok = False
                elif w11 > 0 and not m[lens, i1, j1]:
                    ok = False
                out[lens, y, x] = np.float32(acc)
                out_valid[lens, y, x] = ok


def scene_wavelengths(resolved: ResolvedCalibration) -> np.ndarray:
    """Wavelength sampled at each scene pixel through each lens, (lens, H, W).

    Each lens's dispersion is evaluated at the sub-image position its
    homography pulls the scene pixel from.
    """
    key = "scene_wavelengths"
    if key in resolved._cache:
        return resolved._cache[key]
    i0, j0, fx, fy, inb = _warp_plan(resolved)
    sx = j0 + fx
    sy = i0 + fy
    c = resolved.dispersion_coeffs
    wl = (c[:, 0, None, None] + c[:, 1, None, None] * sx + c[:, 2, None, None] * sy).astype(np.float32)
    resolved._cache[key] = wl
    return wl


@njit(parallel=True, cache=True)
def _resample_kernel(values, valid, wl, order, bands, max_gap, out, out_valid):
    nplanes, h, w = values.shape
    nb = bands.size
    for y in prange(h):
        # per-row scratch keeps allocation out of the hot pixel loop
        swl = np.empty(nplanes, dtype=np.float64)
        sv = np.empty(nplanes, dtype=np.float64)
        for x in range(w):
            _resample_pixel(values, valid, wl, order, bands, max_gap, out,
                            out_valid, swl, sv, y, x, nplanes, nb)


@njit(cache=True)
def _resample_pixel(values, valid, wl, order, bands, max_gap, out, out_valid,
                    swl, sv, y, x, nplanes, nb):
    # gather valid samples, insertion-sorted by wavelength; visiting planes
    # in roughly ascending wavelength order keeps the sort near O(n)
    cnt = 0
    for oi in range(nplanes):
        p = order[oi]
        if valid[p, y, x]:
            lam = wl[p, y, x]
            v = values[p, y, x]
            k = cnt
            while k > 0 and swl[k - 1] > lam:
                swl[k] = swl[k - 1]
                sv[k] = sv[k - 1]
                k -= 1
            swl[k] = lam
            sv[k] = v
            cnt += 1
    if cnt == 0:
        for b in range(nb):
            out[b, y, x] = 0.0
            out_valid[b, y, x] = False
        return
    j = 0
    for b in range(nb):
        lam = bands[b]
        while j + 1 < cnt and swl[j + 1] <= lam:
            j += 1
        # swl[j] <= lam < swl[j+1] (or boundary)
        if swl[j] > lam or j + 1 >= cnt:
            if swl[j] == lam and cnt >= 1:
                out[b, y, x] = np.float32(sv[j])
                out_valid[b, y, x] = True
            else:
                out[b, y, x] = 0.0
                out_valid[b, y, x] = False
            continue
        lo, hi = swl[j], swl[j + 1]
        if lam == lo:
            out[b, y, x] = np.float32(sv[j])
            out_valid[b, y, x] = True
            continue
        if lam - lo > max_gap[b] or hi - lam > max_gap[b]:
            out[b, y, x] = 0.0
            out_valid[b, y, x] = False
            continue
        if hi == lo:
            out[b, y, x] = np.float32(sv[j])
        else:
            t = (lam - lo) / (hi - lo)
            out[b, y, x] = np.float32(sv[j] * (1.0 - t) + sv[j + 1] * t)
        out_valid[b, y, x] = True


def resample_uniform(transformed: SpectralCube, resolved: ResolvedCalibration,
                     grid: BandGrid) -> SpectralCube:
    """Per-pixel linear interpolation of dispersion-tagged samples onto the grid.

    A band is valid only when bracketed by valid samples each within twice the
    local band spacing; no extrapolation beyond the outermost samples.
    """
    if transformed.plane_count != resolved.lens_count:
        raise ValueError("plane count does not match lens count")
    wl = scene_wavelengths(resolved)
    order = np.argsort(wl[:, wl.shape[1] // 2, wl.shape[2] // 2],
                       kind="stable").astype(np.int64)
    bands = grid.wavelengths_nm.astype(np.float64)
    max_gap = 2.0 * grid.local_spacing()
    out = np.empty((grid.count, transformed.height, transformed.width), dtype=np.float32)
    out_valid = np.empty(out.shape, dtype=bool)
    _resample_kernel(transformed.values, transformed.valid, wl, order, bands, max_gap,
                     out, out_valid)
    return SpectralCube(out, out_valid, STAGE_UNIFORM, bands.astype(np.float32))
