"""Camera profiles and geometric/spectral calibration data.

A calibration bundles the microlens layout, per-lens homographies mapping
sub-image coordinates into the common scene frame, and per-lens dispersion
coefficients assigning a wavelength to every sub-image pixel.  Homographies
and dispersion are stored per calibrated working distance and resolved to an
arbitrary distance by linear interpolation (clamped, with a flag, outside the
calibrated range).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class CalibrationError(ValueError):
    """Raised when calibration data violates a structural invariant."""


@dataclass(frozen=True)
class BandGrid:
    """Ordered band-center wavelengths in nm."""

    wavelengths_nm: np.ndarray

    def __post_init__(self):
        wl = np.asarray(self.wavelengths_nm, dtype=np.float64)
        object.__setattr__(self, "wavelengths_nm", wl)
        if wl.ndim != 1 or wl.size < 2:
            raise CalibrationError("band grid needs at least 2 wavelengths")
        if not np.all(np.diff(wl) > 0):
            raise CalibrationError("band wavelengths must be strictly increasing")

    @property
    def count(self) -> int:
        return int(self.wavelengths_nm.size)

    @property
    def min_nm(self) -> float:
        return float(self.wavelengths_nm[0])

    @property
    def max_nm(self) -> float:
        return float(self.wavelengths_nm[-1])

    def local_spacing(self) -> np.ndarray:
        """Per-band local spacing: mean of the adjacent gaps (one-sided at edges)."""
        wl = self.wavelengths_nm
        gaps = np.diff(wl)
        spacing = np.empty_like(wl)
        spacing[0] = gaps[0]
        spacing[-1] = gaps[-1]
        spacing[1:-1] = 0.5 * (gaps[:-1] + gaps[1:])
        return spacing


@dataclass(frozen=True)
class CameraProfile:
    name: str
    lens_count: int
    subimage_width: int
    subimage_height: int
    sensor_width: int
    sensor_height: int
    bit_depth: int
    max_fps: float
    band_grid: BandGrid
    fov_deg: float

    def __post_init__(self):
        if self.lens_count < 1:
            raise CalibrationError("lens_count must be positive")
        sub_area = self.subimage_width * self.subimage_height
        if self.lens_count * sub_area > self.sensor_width * self.sensor_height:
            raise CalibrationError(
                f"profile {self.name!r}: {self.lens_count} sub-images of "
                f"{self.subimage_width}x{self.subimage_height} exceed the sensor area"
            )
        if not 1 <= self.bit_depth <= 16:
            raise CalibrationError("bit_depth out of range")

    @property
    def max_dn(self) -> int:
        return (1 << self.bit_depth) - 1


def s5_profile() -> CameraProfile:
    """42-lens camera: 51 bands over 450-850 nm, 290x275 sub-images, 15 fps."""
    return CameraProfile(
        name="s5",
        lens_count=42,
        subimage_width=290,
        subimage_height=275,
        sensor_width=7 * 290,
        sensor_height=6 * 275,
        bit_depth=12,
        max_fps=15.0,
        band_grid=BandGrid(np.linspace(450.0, 850.0, 51)),
        fov_deg=30.0,
    )


def x20_profile() -> CameraProfile:
    """66-lens camera: 164 bands over 350-1002 nm, 410x410 sub-images, 8 fps."""
    return CameraProfile(
        name="x20",
        lens_count=66,
        subimage_width=410,
        subimage_height=410,
        sensor_width=11 * 410,
        sensor_height=6 * 410,
        bit_depth=12,
        max_fps=8.0,
        band_grid=BandGrid(np.linspace(350.0, 1002.0, 164)),
        fov_deg=35.0,
    )


PROFILES = {"s5": s5_profile, "x20": x20_profile}


def get_profile(name: str) -> CameraProfile:
    try:
        return PROFILES[name]()
    except KeyError:
        raise CalibrationError(f"unknown camera profile {name!r}") from None


@dataclass(frozen=True)
class MicrolensLayout:
    """Per-lens rectangular sensor regions, ordered by lens index.

    regions: int array (lens_count, 4) of (x0, y0, width, height).
    """

    regions: np.ndarray
    sensor_width: int
    sensor_height: int

    def __post_init__(self):
        r = np.asarray(self.regions, dtype=np.int64)
        object.__setattr__(self, "regions", r)
        if r.ndim != 2 or r.shape[1] != 4:
            raise CalibrationError("layout regions must be (n, 4)")
        x0, y0, w, h = r.T
        if np.any(w <= 0) or np.any(h <= 0):
            raise CalibrationError("layout region dimensions must be positive")
        if np.any(x0 < 0) or np.any(y0 < 0) or np.any(x0 + w > self.sensor_width) or np.any(y0 + h > self.sensor_height):
            bad = np.nonzero((x0 < 0) | (y0 < 0) | (x0 + w > self.sensor_width) | (y0 + h > self.sensor_height))[0]
            raise CalibrationError(f"lens regions outside sensor bounds: lenses {bad.tolist()}")
        for i in range(len(r)):
            for j in range(i + 1, len(r)):
                if (x0[i] < x0[j] + w[j] and x0[j] < x0[i] + w[i]
                        and y0[i] < y0[j] + h[j] and y0[j] < y0[i] + h[i]):
                    raise CalibrationError(f"lens regions overlap: lenses {i} and {j}")

    @property
    def lens_count(self) -> int:
        return int(self.regions.shape[0])


def _normalize_h(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64).reshape(3, 3)
    if abs(m[2, 2]) < 1e-12:
        raise CalibrationError("homography bottom-right entry is zero")
    return m / m[2, 2]


@dataclass(frozen=True)
class HomographySet:
    """Per calibrated distance, one 3x3 matrix per lens (sub-image -> scene)."""

    distances_cm: np.ndarray
    matrices: np.ndarray  # (n_dist, lens_count, 3, 3), bottom-right normalized to 1

    def __post_init__(self):
        d = np.asarray(self.distances_cm, dtype=np.float64)
        m = np.asarray(self.matrices, dtype=np.float64)
        object.__setattr__(self, "distances_cm", d)
        object.__setattr__(self, "matrices", m)
        if d.size < 1:
            raise CalibrationError("at least one calibrated distance required")
        if not np.all(np.diff(d) > 0):
            raise CalibrationError("calibrated distances must be strictly increasing")
        if m.shape[:1] != d.shape or m.shape[2:] != (3, 3):
            raise CalibrationError("homography array shape mismatch")
        dets = np.linalg.det(m)
        if np.any(np.abs(dets) <= 1e-9):
            bad = np.argwhere(np.abs(dets) <= 1e-9)
            raise CalibrationError(f"singular homographies at (distance, lens) {bad.tolist()}")


@dataclass(frozen=True)
class DispersionSet:
    """Per-distance, per-lens linear wavelength assignment on sub-image coords.

    coeffs: (n_dist, lens_count, 3) of (origin_nm, dnm_dx, dnm_dy); the
    wavelength at sub-image pixel (x, y) is origin + dx*x + dy*y.
    """

    distances_cm: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.distances_cm, dtype=np.float64)
        c = np.asarray(self.coeffs, dtype=np.float64)
        object.__setattr__(self, "distances_cm", d)
        object.__setattr__(self, "coeffs", c)
        if c.shape[:1] != d.shape or c.shape[2] != 3:
            raise CalibrationError("dispersion coefficient shape mismatch")

    def wavelength_map(self, dist_index: int, lens: int, width: int, height: int) -> np.ndarray:
        o, dx, dy = self.coeffs[dist_index, lens]
        x = np.arange(width, dtype=np.float64)
        y = np.arange(height, dtype=np.float64)
        return o + dx * x[None, :] + dy * y[:, None]


@dataclass(frozen=True)
class ResolvedCalibration:
    """Calibration specialized to one working distance.

    Immutable; warp/resample lookup tables are cached lazily (see cube.py).
    """

    profile: CameraProfile
    layout: MicrolensLayout
    working_distance_cm: float
    homographies: np.ndarray  # (lens_count, 3, 3)
    dispersion_coeffs: np.ndarray  # (lens_count, 3)
    extrapolated: bool
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def lens_count(self) -> int:
        return self.profile.lens_count

    @property
    def scene_width(self) -> int:
        return self.profile.subimage_width

    @property
    def scene_height(self) -> int:
        return self.profile.subimage_height


@dataclass(frozen=True)
class CalibrationSet:
    profile: CameraProfile
    layout: MicrolensLayout
    homographies: HomographySet
    dispersion: DispersionSet

    def __post_init__(self):
        if self.layout.lens_count != self.profile.lens_count:
            raise CalibrationError("layout lens count does not match profile")
        if self.layout.sensor_width != self.profile.sensor_width or self.layout.sensor_height != self.profile.sensor_height:
            raise CalibrationError("layout sensor bounds do not match profile")
        w, h = self.regions_wh()
        if np.any(w != self.profile.subimage_width) or np.any(h != self.profile.subimage_height):
            raise CalibrationError("lens region dimensions differ from profile sub-image size")
        if self.homographies.matrices.shape[1] != self.profile.lens_count:
            raise CalibrationError("homography lens count mismatch")
        if self.dispersion.coeffs.shape[1] != self.profile.lens_count:
            raise CalibrationError("dispersion lens count mismatch")
        if not np.array_equal(self.homographies.distances_cm, self.dispersion.distances_cm):
            raise CalibrationError("homography and dispersion distances differ")
        self._check_dispersion_bounds()

    def regions_wh(self):
        return self.layout.regions[:, 2], self.layout.regions[:, 3]

    def _check_dispersion_bounds(self):
        grid = self.profile.band_grid
        lo, hi = grid.min_nm - 50.0, grid.max_nm + 50.0
        w = self.profile.subimage_width - 1
        h = self.profile.subimage_height - 1
        o = self.dispersion.coeffs[..., 0]
        dx = self.dispersion.coeffs[..., 1]
        dy = self.dispersion.coeffs[..., 2]
        corners = np.stack([o, o + dx * w, o + dy * h, o + dx * w + dy * h])
        if corners.min() < lo or corners.max() > hi:
            raise CalibrationError(
                f"dispersion wavelengths leave [{lo}, {hi}] nm "
                f"(span {corners.min():.1f}..{corners.max():.1f})"
            )

    @property
    def distances_cm(self) -> np.ndarray:
        return self.homographies.distances_cm


def calibration_at_distance(calib: CalibrationSet, working_distance_cm: float) -> ResolvedCalibration:
    """Resolve homographies and dispersion to a working distance.

    Exact on calibrated distances, entrywise-linear in between, clamped (and
    flagged) outside the calibrated range.
    """
    if working_distance_cm <= 0:
        raise CalibrationError("working distance must be positive")
    d = calib.distances_cm
    hmats = calib.homographies.matrices
    ccoef = calib.dispersion.coeffs
    extrapolated = False
    exact = np.nonzero(d == working_distance_cm)[0]
    if exact.size:
        i = int(exact[0])
        hs, cs = hmats[i], ccoef[i]
    elif working_distance_cm <= d[0]:
        hs, cs = hmats[0], ccoef[0]
        extrapolated = working_distance_cm < d[0]
    elif working_distance_cm >= d[-1]:
        hs, cs = hmats[-1], ccoef[-1]
        extrapolated = working_distance_cm > d[-1]
    else:
        j = int(np.searchsorted(d, working_distance_cm))
        t = (working_distance_cm - d[j - 1]) / (d[j] - d[j - 1])
        hs = (1.0 - t) * hmats[j - 1] + t * hmats[j]
        cs = (1.0 - t) * ccoef[j - 1] + t * ccoef[j]
    return ResolvedCalibration(
        profile=calib.profile,
        layout=calib.layout,
        working_distance_cm=float(working_distance_cm),
        homographies=np.array(hs, dtype=np.float64),
        dispersion_coeffs=np.array(cs, dtype=np.float64),
        extrapolated=extrapolated,
    )


def _lens_grid_shape(profile: CameraProfile) -> tuple[int, int]:
    """Pick a (cols, rows) factorization of lens_count that fits the sensor."""
    best = None
    for cols in range(1, profile.lens_count + 1):
        if profile.lens_count % cols:
            continue
        rows = profile.lens_count // cols
        if cols * profile.subimage_width > profile.sensor_width:
            continue
        if rows * profile.subimage_height > profile.sensor_height:
            continue
        waste = (profile.sensor_width - cols * profile.subimage_width) + (
            profile.sensor_height - rows * profile.subimage_height)
        if best is None or waste < best[0]:
            best = (waste, cols, rows)
    if best is None:
        raise CalibrationError(
            f"no {profile.lens_count}-lens grid of {profile.subimage_width}x"
            f"{profile.subimage_height} sub-images fits the sensor")
    return best[1], best[2]


# Total within-lens wavelength sweep across a sub-image.  Kept small so the
# off-grid sampling offset at the sub-image edges (±sweep/2) stays far below
# the band spacing; larger sweeps let the band next to the illuminant cutoff
# interpolate across the emission edge, which biases that band near the
# sub-image borders.
DISPERSION_SWEEP_NM = 0.1
PRIORITY_RANGE_NM = (450.0, 700.0)  # densely sampled span (surgical-light emission)


def _dispersion_centers(grid: BandGrid, lens_count: int,
                        priority_range: tuple[float, float]) -> np.ndarray:
    """Per-lens center wavelengths, aligned to band-grid wavelengths.

    Bands inside the priority range each get their own lens where the lens
    budget allows; remaining lenses spread over the rest of the grid so the
    assigned wavelengths span it end to end.
    """
    wl = grid.wavelengths_nm
    nb = wl.size
    inside = np.nonzero((wl >= priority_range[0]) & (wl <= priority_range[1]))[0]
    if inside.size == 0 or inside.size > lens_count:
        idx = np.unique(np.round(np.linspace(0, nb - 1, lens_count)).astype(int))
    else:
        outside = np.setdiff1d(np.arange(nb), inside)
        extra = min(lens_count - inside.size, outside.size)
        if extra > 0:
            pick = np.unique(np.round(np.linspace(0, outside.size - 1, extra)).astype(int))
            idx = np.sort(np.concatenate([inside, outside[pick]]))
        else:
            idx = inside
    centers = wl[idx]
    if centers.size < lens_count:
        reps = np.sort(np.round(np.linspace(0, centers.size - 1, lens_count)).astype(int))
        centers = centers[reps]
    return centers


def synthesize_default_calibration(profile: CameraProfile, distances_cm,
                                   priority_range_nm: tuple[float, float] = PRIORITY_RANGE_NM,
                                   ) -> CalibrationSet:
    """Deterministic synthetic calibration for a profile.

    Lenses tile a rectangular grid.  Homographies are identity at the first
    (reference) distance and pick up per-lens sub-pixel translations growing
    linearly with distance from it.  Each lens's dispersion sweeps a narrow
    wavelength range across the sub-image around a center aligned to a band
    wavelength; the centers span the band grid, concentrated inside the
    priority range.
    """
    distances = np.asarray(sorted(float(x) for x in distances_cm), dtype=np.float64)
    if distances.size == 0:
        raise CalibrationError("need at least one working distance")
    cols, rows = _lens_grid_shape(profile)
    regions = []
    for i in range(profile.lens_count):
        r, c = divmod(i, cols)
        regions.append((c * profile.subimage_width, r * profile.subimage_height,
                        profile.subimage_width, profile.subimage_height))
    layout = MicrolensLayout(np.array(regions), profile.sensor_width, profile.sensor_height)

    d_ref = distances[0]
    lens_idx = np.arange(profile.lens_count, dtype=np.float64)
    # deterministic per-lens sub-pixel direction, low-discrepancy in [-0.5, 0.5)
    ux = ((lens_idx * 0.6180339887498949) % 1.0) - 0.5
    uy = ((lens_idx * 0.7548776662466927) % 1.0) - 0.5

    centers = _dispersion_centers(profile.band_grid, profile.lens_count, priority_range_nm)
    dnm_dx = DISPERSION_SWEEP_NM / max(profile.subimage_width - 1, 1)

    h_all = np.zeros((distances.size, profile.lens_count, 3, 3))
    c_all = np.zeros((distances.size, profile.lens_count, 3))
    for k, dist in enumerate(distances):
        scale = (dist - d_ref) / d_ref
        for i in range(profile.lens_count):
            m = np.eye(3)
            m[0, 2] = 0.8 * scale * ux[i]
            m[1, 2] = 0.8 * scale * uy[i]
            h_all[k, i] = m
            c_all[k, i, 0] = centers[i] - dnm_dx * (profile.subimage_width - 1) / 2.0 + 0.2 * scale
            c_all[k, i, 1] = dnm_dx
            c_all[k, i, 2] = 0.0
    return CalibrationSet(
        profile=profile,
        layout=layout,
        homographies=HomographySet(distances, h_all),
        dispersion=DispersionSet(distances, c_all),
    )


# --- .calib file format (JSON) ------------------------------------------------

def calibration_to_dict(calib: CalibrationSet) -> dict:
    p = calib.profile
    return {
        "profile": {
            "name": p.name,
            "lens_count": p.lens_count,
            "subimage_width": p.subimage_width,
            "subimage_height": p.subimage_height,
            "sensor_width": p.sensor_width,
            "sensor_height": p.sensor_height,
            "bit_depth": p.bit_depth,
            "max_fps": p.max_fps,
            "fov_deg": p.fov_deg,
            "wavelengths_nm": p.band_grid.wavelengths_nm.tolist(),
        },
        "layout": calib.layout.regions.tolist(),
        "distances_cm": calib.distances_cm.tolist(),
        "homographies": {
            repr(float(d)): calib.homographies.matrices[i].reshape(-1, 9).tolist()
            for i, d in enumerate(calib.distances_cm)
        },
        "dispersion": {
            repr(float(d)): [
                {"origin_nm": c[0], "dnm_dx": c[1], "dnm_dy": c[2]}
                for c in calib.dispersion.coeffs[i].tolist()
            ]
            for i, d in enumerate(calib.distances_cm)
        },
    }


def save_calibration(calib: CalibrationSet, path) -> None:
    Path(path).write_text(json.dumps(calibration_to_dict(calib), indent=1))


def _req(d: dict, key: str, where: str):
    if key not in d:
        raise CalibrationError(f"{where}: missing key {key!r}")
    return d[key]


def calibration_from_dict(doc: dict) -> CalibrationSet:
    prof = _req(doc, "profile", "calibration")
    grid = BandGrid(np.array(_req(prof, "wavelengths_nm", "profile"), dtype=np.float64))
    profile = CameraProfile(
        name=_req(prof, "name", "profile"),
        lens_count=int(_req(prof, "lens_count", "profile")),
        subimage_width=int(_req(prof, "subimage_width", "profile")),
        subimage_height=int(_req(prof, "subimage_height", "profile")),
        sensor_width=int(_req(prof, "sensor_width", "profile")),
        sensor_height=int(_req(prof, "sensor_height", "profile")),
        bit_depth=int(_req(prof, "bit_depth", "profile")),
        max_fps=float(_req(prof, "max_fps", "profile")),
        band_grid=grid,
        fov_deg=float(_req(prof, "fov_deg", "profile")),
    )
    layout = MicrolensLayout(np.array(_req(doc, "layout", "calibration"), dtype=np.int64),
                             profile.sensor_width, profile.sensor_height)
    distances = np.array(_req(doc, "distances_cm", "calibration"), dtype=np.float64)
    hdoc = _req(doc, "homographies", "calibration")
    ddoc = _req(doc, "dispersion", "calibration")
    h_all = np.zeros((distances.size, profile.lens_count, 3, 3))
    c_all = np.zeros((distances.size, profile.lens_count, 3))
    for i, d in enumerate(distances):
        key = repr(float(d))
        if key not in hdoc:
            raise CalibrationError(f"homographies: missing distance {key}")
        mats = hdoc[key]
        if len(mats) != profile.lens_count:
            raise CalibrationError(f"homographies[{key}]: expected {profile.lens_count} matrices")
        for j, m in enumerate(mats):
            h_all[i, j] = _normalize_h(np.array(m, dtype=np.float64))
        if key not in ddoc:
            raise CalibrationError(f"dispersion: missing distance {key}")
        cs = ddoc[key]
        if len(cs) != profile.lens_count:
            raise CalibrationError(f"dispersion[{key}]: expected {profile.lens_count} entries")
        for j, c in enumerate(cs):
            c_all[i, j] = (c["origin_nm"], c["dnm_dx"], c["dnm_dy"])
    return CalibrationSet(
        profile=profile,
        layout=layout,
        homographies=HomographySet(distances, h_all),
        dispersion=DispersionSet(distances, c_all),
    )


def load_calibration(path) -> CalibrationSet:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"calibration file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CalibrationError(f"{p}: malformed JSON: {e}") from e
    return calibration_from_dict(doc)
