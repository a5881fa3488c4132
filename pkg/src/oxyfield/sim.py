"""Forward camera simulator: phantom scenes rendered through illuminant,
optics, dispersion, and quantization into raw sensor frames.

The projection is the adjoint of the reconstruction chain and shares its
calibration data, so noise-free round trips isolate pipeline bugs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .calib import CalibrationSet, ResolvedCalibration, calibration_at_distance
from .cube import RawSensorFrame
from .oxy import ReferenceLibrary

EXPOSURE_DN_PER_MS = 700.0  # DN per ms integration at unit radiance


# --- illuminant ---------------------------------------------------------------

@dataclass(frozen=True)
class Illuminant:
    """Relative spectral power on a dense grid; zero outside the emission range."""

    wavelengths_nm: np.ndarray
    power: np.ndarray

    def __post_init__(self):
        wl = np.asarray(self.wavelengths_nm, dtype=np.float64)
        p = np.asarray(self.power, dtype=np.float64)
        object.__setattr__(self, "wavelengths_nm", wl)
        object.__setattr__(self, "power", p)
        if np.any(p < 0):
            raise ValueError("illuminant power must be non-negative")

    def at(self, lam) -> np.ndarray:
        return np.interp(np.asarray(lam, dtype=np.float64),
                         self.wavelengths_nm, self.power, left=0.0, right=0.0)

    def scaled(self, alpha: float) -> "Illuminant":
        return Illuminant(self.wavelengths_nm.copy(), alpha * self.power)


def surgical_light(min_nm: float = 448.0, max_nm: float = 702.0,
                   edge_nm: float = 2.0) -> Illuminant:
    """Flat-topped emission over [min, max] nm with short raised-cosine edges."""
    wl = np.arange(min_nm - 2.0, max_nm + 2.0 + 1e-9, 1.0)
    p = np.ones_like(wl)
    rising = wl < min_nm + edge_nm
    falling = wl > max_nm - edge_nm
    p[rising] = 0.5 - 0.5 * np.cos(np.pi * (wl[rising] - min_nm) / edge_nm)
    p[falling] = 0.5 - 0.5 * np.cos(np.pi * (max_nm - wl[falling]) / edge_nm)
    p[(wl < min_nm) | (wl > max_nm)] = 0.0
    return Illuminant(wl, p)


# --- phantoms -----------------------------------------------------------------

def _flat(level):
    return lambda lam: np.full_like(np.asarray(lam, dtype=np.float64), level)


def _glove_reflectance(lam):
    lam = np.asarray(lam, dtype=np.float64)
    return 0.12 + 0.45 * np.exp(-0.5 * ((lam - 470.0) / 55.0) ** 2)


MATERIAL_SPECTRA = {
    "gauze": _flat(1.0),
    "gray_table": _flat(0.30),
    "glove": _glove_reflectance,
    "dark": _flat(0.05),
}


@dataclass
class ScenePhantom:
    """Scene with per-pixel ground-truth SO2 and material labels.

    `so2` holds NaN on non-tissue pixels; `material` indexes `material_names`
    (ignored on tissue pixels).  `script` optionally evolves the SO2 field
    with the frame index.
    """

    name: str
    width: int
    height: int
    so2: np.ndarray  # (H, W) float64, NaN outside tissue
    tissue: np.ndarray  # (H, W) bool
    material: np.ndarray  # (H, W) int16
    material_names: list[str]
    script: dict | None = None

    def __post_init__(self):
        with np.errstate(invalid="ignore"):
            if np.any((self.so2 < 0) | (self.so2 > 1)):
                raise ValueError("so2 must lie in [0, 1]")
        if np.any(np.isnan(self.so2[self.tissue])):
            raise ValueError("tissue pixels must carry an so2 value")
        if np.any(~np.isnan(self.so2[~self.tissue])):
            raise ValueError("non-tissue pixels must not carry so2")

    def so2_at(self, frame_index: int) -> np.ndarray:
        if not self.script:
            return self.so2
        if self.script["type"] == "boundary_drift":
            # vertical perfusion boundary moving right with the frame index
            col = self.boundary_col(frame_index)
            so2 = self.so2.copy()
            hi = float(self.script["so2_left"])
            lo = float(self.script["so2_right"])
            cols = np.arange(self.width)
            so2[self.tissue & (cols[None, :] < col)] = hi
            so2[self.tissue & (cols[None, :] >= col)] = lo
            return so2
        raise ValueError(f"unknown script type {self.script['type']!r}")

    def boundary_col(self, frame_index: int) -> int:
        if not self.script or self.script["type"] != "boundary_drift":
            raise ValueError("phantom has no boundary script")
        col = self.script["start_col"] + self.script["rate_px_per_frame"] * frame_index
        return int(np.clip(round(col), 0, self.width))

    def tissue_at(self, frame_index: int) -> np.ndarray:
        return self.tissue


GAUZE_STRIP_ROWS = 24


def make_wedge_phantom(width: int, height: int, levels: int = 36,
                       gauze_rows: int = GAUZE_STRIP_ROWS) -> ScenePhantom:
    """Gauze strip on top, below a left-to-right staircase of SO2 levels."""
    so2 = np.full((height, width), np.nan)
    tissue = np.zeros((height, width), dtype=bool)
    material = np.zeros((height, width), dtype=np.int16)  # gauze
    material_names = ["gauze", "gray_table"]
    material[gauze_rows:, :] = 1
    lv = np.linspace(0.0, 1.0, levels)
    col_idx = np.minimum((np.arange(width) * levels) // width, levels - 1)
    so2[gauze_rows:, :] = lv[col_idx][None, :]
    tissue[gauze_rows:, :] = True
    material[tissue] = 1
    return ScenePhantom("wedge", width, height, so2, tissue, material, material_names)


def make_resection_phantom(width: int, height: int, so2_left: float = 31.0 / 35.0,
                           so2_right: float = 4.0 / 35.0, boundary_col: int | None = None,
                           drift_px_per_frame: float = 0.0,
                           gauze_rows: int = GAUZE_STRIP_ROWS) -> ScenePhantom:
    """Perfused/devascularized halves with a sharp vertical boundary."""
    if boundary_col is None:
        boundary_col = width // 2
    so2 = np.full((height, width), np.nan)
    tissue = np.zeros((height, width), dtype=bool)
    material = np.zeros((height, width), dtype=np.int16)
    material_names = ["gauze", "gray_table"]
    tissue[gauze_rows:, :] = True
    material[gauze_rows:, :] = 1
    cols = np.arange(width)
    so2[gauze_rows:, :] = np.where(cols[None, :] < boundary_col, so2_left, so2_right)
    script = {
        "type": "boundary_drift",
        "start_col": int(boundary_col),
        "rate_px_per_frame": float(drift_px_per_frame),
        "so2_left": float(so2_left),
        "so2_right": float(so2_right),
    }
    return ScenePhantom("resection", width, height, so2, tissue, material,
                        material_names, script=script)


def make_props_phantom(width: int, height: int) -> ScenePhantom:
    """Gray table with a gauze patch, a glove patch, and a tissue block."""
    so2 = np.full((height, width), np.nan)
    tissue = np.zeros((height, width), dtype=bool)
    material = np.full((height, width), 1, dtype=np.int16)  # gray table
    material_names = ["gauze", "gray_table", "glove"]
    gw, gh = max(width // 5, 8), max(height // 5, 8)
    material[2:2 + gh, 2:2 + gw] = 0  # gauze patch, top-left
    material[2:2 + gh, width - 2 - gw:width - 2] = 2  # glove patch, top-right
    ty0, tx0 = height // 3, width // 6
    tissue[ty0:ty0 + height // 2, tx0:tx0 + 2 * width // 3] = True
    so2[tissue] = 0.8
    return ScenePhantom("props", width, height, so2, tissue, material, material_names)


def gauze_roi(phantom: ScenePhantom):
    """Bounding rectangle of the phantom's gauze material region."""
    from .reflect import RegionOfInterest
    ys, xs = np.nonzero((phantom.material == phantom.material_names.index("gauze"))
                        & ~phantom.tissue)
    if ys.size == 0:
        raise ValueError("phantom has no gauze region")
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    # inset by one pixel so warp blur at the patch edge stays outside the roi
    if x1 - x0 > 4 and y1 - y0 > 4:
        x0, x1, y0, y1 = x0 + 1, x1 - 1, y0 + 1, y1 - 1
    return RegionOfInterest(x0, y0, x1 - x0 + 1, y1 - y0 + 1)


# --- noise --------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    shot_scale: float = 0.0  # variance per DN (Poisson-equivalent)
    read_sigma_dn: float = 0.0
    seed: int = 0

    @property
    def enabled(self) -> bool:
        return self.shot_scale > 0 or self.read_sigma_dn > 0


# --- radiance rendering -------------------------------------------------------

@dataclass
class SceneRadiance:
    """Per-pixel continuous spectra, evaluated lazily at arbitrary wavelengths."""

    phantom: ScenePhantom
    library: ReferenceLibrary
    illuminant: Illuminant
    frame_index: int
    so2: np.ndarray = field(init=False)

    def __post_init__(self):
        self.so2 = self.phantom.so2_at(self.frame_index)

    def _library_reflectance(self, so2, lam):
        """Library spectrum at arbitrary (so2, wavelength), bilinear in both."""
        lib = self.library
        lv = lib.so2_levels
        wl = lib.wavelengths_nm
        so2 = np.clip(so2, lv[0], lv[-1])
        lam = np.clip(lam, wl[0], wl[-1])
        j = np.clip(np.searchsorted(lv, so2, side="right"), 1, lv.size - 1)
        t = (so2 - lv[j - 1]) / (lv[j] - lv[j - 1])
        k = np.clip(np.searchsorted(wl, lam, side="right"), 1, wl.size - 1)
        u = (lam - wl[k - 1]) / (wl[k] - wl[k - 1])
        sp = lib.spectra
        lo = sp[j - 1, k - 1] * (1 - u) + sp[j - 1, k] * u
        hi = sp[j, k - 1] * (1 - u) + sp[j, k] * u
        return lo * (1 - t) + hi * t

    def at(self, ix: np.ndarray, iy: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """Radiance at integer scene pixels (ix, iy) and wavelengths lam."""
        ph = self.phantom
        ix = np.clip(ix, 0, ph.width - 1)
        iy = np.clip(iy, 0, ph.height - 1)
        tissue = ph.tissue[iy, ix]
        refl = np.empty(ix.shape, dtype=np.float64)
        if tissue.any():
            refl[tissue] = self._library_reflectance(self.so2[iy, ix][tissue],
                                                     np.asarray(lam)[tissue])
        nt = ~tissue
        if nt.any():
            mats = ph.material[iy, ix][nt]
            lam_nt = np.asarray(lam)[nt]
            out = np.empty(mats.shape, dtype=np.float64)
            for mi, name in enumerate(ph.material_names):
                sel = mats == mi
                if sel.any():
                    out[sel] = MATERIAL_SPECTRA[name](lam_nt[sel])
            refl[nt] = out
        return self.illuminant.at(lam) * refl


def render_scene_radiance(phantom: ScenePhantom, lib: ReferenceLibrary,
                          illum: Illuminant, frame_index: int = 0) -> SceneRadiance:
    return SceneRadiance(phantom, lib, illum, frame_index)


# --- sensor projection --------------------------------------------------------

def project_to_sensor(radiance: SceneRadiance, calib: CalibrationSet,
                      working_distance_cm: float, integration_time_ms: float,
                      noise: NoiseModel | None = None, frame_id: int = 0,
                      resolved: ResolvedCalibration | None = None) -> RawSensorFrame:
    """Sample the scene through homographies and dispersion into a raw frame."""
    if resolved is None:
        resolved = calibration_at_distance(calib, working_distance_cm)
    profile = resolved.profile
    layout = resolved.layout
    sw, sh = profile.subimage_width, profile.subimage_height
    sensor = np.zeros((profile.sensor_height, profile.sensor_width), dtype=np.float64)

    ux, uy = np.meshgrid(np.arange(sw, dtype=np.float64), np.arange(sh, dtype=np.float64))
    gain = EXPOSURE_DN_PER_MS * integration_time_ms
    for lens in range(profile.lens_count):
        o, dnm_dx, dnm_dy = resolved.dispersion_coeffs[lens]
        lam = o + dnm_dx * ux + dnm_dy * uy
        h = resolved.homographies[lens]
        if np.array_equal(h, np.eye(3)):
            ix = ux.astype(np.int64)
            iy = uy.astype(np.int64)
            dn = radiance.at(ix, iy, lam)
        else:
            p = h @ np.stack([ux.ravel(), uy.ravel(), np.ones(ux.size)])
            sx = (p[0] / p[2]).reshape(sh, sw)
            sy = (p[1] / p[2]).reshape(sh, sw)
            x0 = np.floor(sx).astype(np.int64)
            y0 = np.floor(sy).astype(np.int64)
            fx = sx - x0
            fy = sy - y0
            dn = np.zeros((sh, sw), dtype=np.float64)
            for (dyy, dxx, wgt) in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                                    (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
                sel = wgt > 0
                if sel.any():
                    dn[sel] += wgt[sel] * radiance.at(x0[sel] + dxx, y0[sel] + dyy,
                                                      lam[sel])
            outside = (sx < 0) | (sy < 0) | (sx > radiance.phantom.width - 1) | (
                sy > radiance.phantom.height - 1)
            dn[outside] = 0.0
        x0r, y0r, _, _ = layout.regions[lens]
        sensor[y0r:y0r + sh, x0r:x0r + sw] = gain * dn

    if noise is not None and noise.enabled:
        rng = np.random.default_rng((noise.seed, frame_id))
        if noise.shot_scale > 0:
            sensor = sensor + rng.standard_normal(sensor.shape) * np.sqrt(
                noise.shot_scale * np.maximum(sensor, 0.0))
        if noise.read_sigma_dn > 0:
            sensor = sensor + rng.standard_normal(sensor.shape) * noise.read_sigma_dn
    dn_max = profile.max_dn
    pixels = np.clip(np.round(sensor), 0, dn_max).astype(np.uint16)
    return RawSensorFrame(pixels=pixels, bit_depth=profile.bit_depth,
                          integration_time_ms=float(integration_time_ms),
                          frame_id=int(frame_id), timestamp=time.monotonic())


# --- frame sources ------------------------------------------------------------

class SimulatedSource:
    """Iterator of raw frames rendered from a phantom scenario."""

    def __init__(self, phantom: ScenePhantom, library: ReferenceLibrary,
                 calib: CalibrationSet, working_distance_cm: float = 56.0,
                 integration_time_ms: float = 5.0, illuminant: Illuminant | None = None,
                 noise: NoiseModel | None = None, frame_count: int | None = None):
        self.phantom = phantom
        self.library = library
        self.calib = calib
        self.working_distance_cm = working_distance_cm
        self.integration_time_ms = integration_time_ms
        self.illuminant = illuminant if illuminant is not None else surgical_light()
        self.noise = noise
        self.frame_count = frame_count
        self._resolved = calibration_at_distance(calib, working_distance_cm)

    def frame(self, frame_id: int) -> RawSensorFrame:
        rad = render_scene_radiance(self.phantom, self.library, self.illuminant,
                                    frame_index=frame_id)
        return project_to_sensor(rad, self.calib, self.working_distance_cm,
                                 self.integration_time_ms, noise=self.noise,
                                 frame_id=frame_id, resolved=self._resolved)

    def __iter__(self):
        i = 0
        while self.frame_count is None or i < self.frame_count:
            yield self.frame(i)
            i += 1
