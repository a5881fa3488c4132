"""SO2 classification by spectral-angle matching and overlay rendering.

The per-pixel classifier compares the reflectance spectrum against a library
of reference spectra, one per oxygenation level, and assigns the level whose
spectrum subtends the smallest angle over the pixel's valid bands.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calib import BandGrid
from .cube import STAGE_REFLECTANCE, SpectralCube

DEFAULT_LEVEL_COUNT = 36
DEFAULT_MIN_VALID_BANDS = 8
DEFAULT_SAM_THRESHOLD_RAD = 0.15
DEFAULT_OVERLAY_ALPHA = 0.6
UNCLASSIFIED = -1


class LibraryError(ValueError):
    pass


class SamError(ValueError):
    pass


# --- reference library --------------------------------------------------------

@dataclass(frozen=True)
class ReferenceLibrary:
    """Ordered (SO2 level, reflectance spectrum) entries on a shared band grid."""

    so2_levels: np.ndarray  # (entries,) fractions in [0, 1], strictly increasing
    spectra: np.ndarray  # (entries, bands) strictly positive
    wavelengths_nm: np.ndarray  # (bands,)
    provenance: str = "synthetic"

    def __post_init__(self):
        lv = np.asarray(self.so2_levels, dtype=np.float64)
        sp = np.asarray(self.spectra, dtype=np.float64)
        wl = np.asarray(self.wavelengths_nm, dtype=np.float64)
        object.__setattr__(self, "so2_levels", lv)
        object.__setattr__(self, "spectra", sp)
        object.__setattr__(self, "wavelengths_nm", wl)
        if lv.size < 2:
            raise LibraryError("library needs at least 2 entries")
        if not np.all(np.diff(lv) > 0):
            raise LibraryError("so2 levels must be strictly increasing")
        if lv[0] < 0 or lv[-1] > 1:
            raise LibraryError("so2 levels must lie in [0, 1]")
        if sp.shape != (lv.size, wl.size):
            raise LibraryError("spectra shape must be (entries, bands)")
        if np.any(sp <= 0):
            raise LibraryError("library spectra must be strictly positive")

    @property
    def entry_count(self) -> int:
        return int(self.so2_levels.size)

    def spectrum_at(self, so2: float) -> np.ndarray:
        """Spectrum at an arbitrary level, linear between adjacent entries."""
        lv = self.so2_levels
        so2 = float(np.clip(so2, lv[0], lv[-1]))
        j = int(np.searchsorted(lv, so2))
        if j == 0 or lv[j - 1] == so2:
            j = max(j, 1)
        if so2 == lv[j - 1]:
            return self.spectra[j - 1].copy()
        if j >= lv.size:
            return self.spectra[-1].copy()
        t = (so2 - lv[j - 1]) / (lv[j] - lv[j - 1])
        return (1.0 - t) * self.spectra[j - 1] + t * self.spectra[j]

    def nearest_level_index(self, so2) -> np.ndarray:
        """Index of the library level nearest to so2 (lower index wins ties)."""
        so2 = np.asarray(so2, dtype=np.float64)
        d = np.abs(so2[..., None] - self.so2_levels)
        return np.argmin(d, axis=-1)


def _gauss(wl, center, width):
    return np.exp(-0.5 * ((wl - center) / width) ** 2)


def oxy_attenuation(wl_nm) -> np.ndarray:
    """Smooth synthetic attenuation curve for the oxygenated endmember.

    Shape mimics oxyhemoglobin qualitatively (twin green-band peaks, strong
    blue absorption, transparent red/NIR); configuration data, not physiology.
    """
    wl = np.asarray(wl_nm, dtype=np.float64)
    return (1.6 * _gauss(wl, 430.0, 38.0)
            + 1.10 * _gauss(wl, 540.0, 22.0)
            + 1.00 * _gauss(wl, 578.0, 20.0)
            + 0.04)


def deoxy_attenuation(wl_nm) -> np.ndarray:
    """Synthetic attenuation curve for the deoxygenated endmember.

    Single broad green-band peak, elevated red/NIR absorption.
    """
    wl = np.asarray(wl_nm, dtype=np.float64)
    return (1.9 * _gauss(wl, 432.0, 42.0)
            + 1.30 * _gauss(wl, 556.0, 30.0)
            + 0.45 * _gauss(wl, 760.0, 90.0)
            + 0.10)


DEFAULT_OPTICAL_DEPTH = 1.8


def mixture_spectrum(so2, wl_nm, optical_depth: float = DEFAULT_OPTICAL_DEPTH) -> np.ndarray:
    """Two-endmember attenuation model: exp(-d * mix of endmember curves)."""
    so2 = np.asarray(so2, dtype=np.float64)
    mu = (so2[..., None] * oxy_attenuation(wl_nm)
          + (1.0 - so2[..., None]) * deoxy_attenuation(wl_nm))
    return np.exp(-optical_depth * mu)


def build_synthetic_library(count: int = DEFAULT_LEVEL_COUNT,
                            grid: BandGrid | None = None,
                            wavelengths_nm=None,
                            optical_depth: float = DEFAULT_OPTICAL_DEPTH) -> ReferenceLibrary:
    """Library of `count` levels uniformly spaced over [0, 1]."""
    if count < 2:
        raise LibraryError("library needs at least 2 entries")
    if wavelengths_nm is None:
        if grid is None:
            raise LibraryError("either a band grid or wavelengths are required")
        wavelengths_nm = grid.wavelengths_nm
    wl = np.asarray(wavelengths_nm, dtype=np.float64)
    levels = np.linspace(0.0, 1.0, count)
    spectra = mixture_spectrum(levels, wl, optical_depth)
    return ReferenceLibrary(levels, spectra, wl, provenance="synthetic")


def save_library(lib: ReferenceLibrary, path) -> None:
    doc = {
        "wavelengths_nm": lib.wavelengths_nm.tolist(),
        "entries": [
            {"so2": float(lv), "reflectance": sp.tolist()}
            for lv, sp in zip(lib.so2_levels, lib.spectra)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_library(path) -> ReferenceLibrary:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"library file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise LibraryError(f"{p}: malformed JSON: {e}") from e
    try:
        wl = np.array(doc["wavelengths_nm"], dtype=np.float64)
        levels = np.array([e["so2"] for e in doc["entries"]], dtype=np.float64)
        spectra = np.array([e["reflectance"] for e in doc["entries"]], dtype=np.float64)
    except (KeyError, TypeError) as e:
        raise LibraryError(f"{p}: malformed library document: {e}") from e
    return ReferenceLibrary(levels, spectra, wl, provenance="file")


def resample_library(lib: ReferenceLibrary, grid: BandGrid,
                     min_valid_bands: int = DEFAULT_MIN_VALID_BANDS) -> ReferenceLibrary:
    """Interpolate library spectra onto a cube's band grid (no extrapolation)."""
    target = grid.wavelengths_nm
    inside = (target >= lib.wavelengths_nm[0]) & (target <= lib.wavelengths_nm[-1])
    if inside.sum() < min_valid_bands:
        raise LibraryError(
            f"library grid overlaps only {int(inside.sum())} bands "
            f"(need {min_valid_bands})")
    spectra = np.stack([
        np.interp(target, lib.wavelengths_nm, sp) for sp in lib.spectra
    ])
    # clamp-extrapolated edges stay positive, so entries remain valid spectra
    return ReferenceLibrary(lib.so2_levels.copy(), spectra, target.copy(),
                            provenance=lib.provenance)


# --- spectral angle -----------------------------------------------------------

def sam(a, b, valid=None, min_valid_bands: int = DEFAULT_MIN_VALID_BANDS) -> float:
    """Angle in radians between two spectra over their shared valid bands."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        a = a[valid]
        b = b[valid]
    if a.size < min_valid_bands:
        raise SamError(f"only {a.size} shared valid bands (need {min_valid_bands})")
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na == 0.0 or nb == 0.0:
        raise SamError("zero-norm spectrum")
    # 2*arcsin(|a^ - b^|/2) equals arccos(a^.b^) but stays accurate near 0,
    # where arccos loses half the significant digits
    d = a / na - b / nb
    half = 0.5 * np.sqrt(np.dot(d, d))
    return float(2.0 * np.arcsin(min(half, 1.0)))


# --- classification -----------------------------------------------------------

@dataclass
class SO2Map:
    """Per-pixel classified oxygenation: library index (-1 unclassified) and value."""

    index: np.ndarray  # (H, W) int32, UNCLASSIFIED where no decision
    so2: np.ndarray  # (H, W) float32, NaN where unclassified

    @property
    def classified(self) -> np.ndarray:
        return self.index != UNCLASSIFIED


@dataclass
class SimilarityMap:
    """Best-match spectral angle per pixel (radians, NaN where unclassified)."""

    angle: np.ndarray  # (H, W) float32


def classify_so2(cube: SpectralCube, lib: ReferenceLibrary,
                 min_valid_bands: int = DEFAULT_MIN_VALID_BANDS) -> tuple[SO2Map, SimilarityMap]:
    """Nearest-reference classification of every pixel of a reflectance cube.

    The angle against each entry is computed on the pixel's valid bands only;
    ties break toward the lower SO2 index.  Pixels with too few valid bands or
    zero norm stay unclassified.
    """
    if cube.stage != STAGE_REFLECTANCE:
        raise LibraryError("classification requires a reflectance-stage cube")
    if lib.entry_count < 2:
        raise LibraryError("empty or degenerate library")
    if not np.array_equal(lib.wavelengths_nm, cube.wavelengths_nm.astype(np.float64)):
        lib = resample_library(lib, BandGrid(cube.wavelengths_nm.astype(np.float64)),
                               min_valid_bands)
    nb, h, w = cube.values.shape
    # bands invalid at every pixel cannot influence any angle; drop them up front
    band_used = cube.valid.reshape(nb, -1).any(axis=1)
    vals = cube.values[band_used]
    vmask = cube.valid[band_used]
    nbu = int(band_used.sum())
    x = np.where(vmask, vals, 0.0).astype(np.float64).reshape(nbu, -1).T  # (P, B)
    refs = lib.spectra[:, band_used].astype(np.float64)  # (K, B)
    num = x @ refs.T  # (P, K)
    xnorm = np.sqrt(np.einsum("pb,pb->p", x, x))
    # The validity pattern depends on geometry (dispersion coverage, borders),
    # not on pixel values, so only a handful of distinct band masks occur;
    # computing the restricted reference norms once per distinct mask replaces
    # a (pixels x bands x entries) matmul with a (masks x bands x entries) one.
    packed = np.packbits(vmask.reshape(nbu, -1).T, axis=1)  # (P, W) big-endian
    if packed.shape[1] <= 8:
        keys = np.zeros((packed.shape[0], 8), dtype=np.uint8)
        keys[:, :packed.shape[1]] = packed
        _, first, inverse = np.unique(keys.view(np.uint64).ravel(),
                                      return_index=True, return_inverse=True)
        uniq = packed[first]
    else:
        uniq, inverse = np.unique(packed, axis=0, return_inverse=True)
    um = np.unpackbits(uniq, axis=1, count=nbu).astype(np.float64)  # (U, B)
    counts = um.sum(axis=1)[inverse]
    refnorm = np.sqrt(um @ (refs ** 2).T)  # (U, K)
    ok = (counts >= min_valid_bands) & (xnorm > 0) \
        & np.all(refnorm > 0, axis=1)[inverse]
    # dividing by the pixel norm rescales a whole row, so the best entry can
    # be picked from num / refnorm alone; the cosine (hence the angle) is
    # evaluated for the winner only
    with np.errstate(divide="ignore", invalid="ignore"):
        for g in range(uniq.shape[0]):
            num[inverse == g] /= refnorm[g]
        num[~ok] = -1.0
        best = np.argmax(num, axis=1)  # ties break to the lower index
        cos_best = np.clip(num[np.arange(num.shape[0]), best] / xnorm, -1.0, 1.0)
    angle = np.arccos(cos_best).astype(np.float32)
    index = best.astype(np.int32)
    index[~ok] = UNCLASSIFIED
    angle[~ok] = np.nan
    so2 = lib.so2_levels.astype(np.float32)[best]
    so2[~ok] = np.nan
    return (SO2Map(index.reshape(h, w), so2.reshape(h, w)),
            SimilarityMap(angle.reshape(h, w)))


@dataclass
class TissueMask:
    mask: np.ndarray  # (H, W) bool


def build_tissue_mask(so2_map: SO2Map, sim: SimilarityMap,
                      threshold_rad: float = DEFAULT_SAM_THRESHOLD_RAD) -> TissueMask:
    """Tissue = classified pixels whose best-match angle is at most the threshold."""
    if not 0.0 <= threshold_rad <= np.pi / 2:
        raise ValueError("threshold must lie in [0, pi/2]")
    with np.errstate(invalid="ignore"):
        mask = so2_map.classified & (sim.angle <= threshold_rad)
    return TissueMask(mask)


# --- rendering ----------------------------------------------------------------

RGB_BANDS_NM = (610.0, 540.0, 470.0)
GAMMA = 1.0 / 2.2


def render_rgb(cube: SpectralCube) -> np.ndarray:
    """8-bit RGB image from the bands nearest 610/540/470 nm."""
    wl = cube.wavelengths_nm.astype(np.float64)
    covered = any(wl[0] <= t <= wl[-1] for t in RGB_BANDS_NM)
    if not covered:
        raise ValueError("cube bands cover none of the RGB target wavelengths")
    out = np.zeros((cube.height, cube.width, 3), dtype=np.uint8)
    for ch, target in enumerate(RGB_BANDS_NM):
        b = int(np.argmin(np.abs(wl - target)))
        vals = np.clip(cube.values[b], 0.0, 1.0)
        vals = np.where(cube.valid[b], vals, 0.0)
        out[..., ch] = np.round(255.0 * vals ** GAMMA).astype(np.uint8)
    return out


# blue -> cyan -> yellow -> red over [0, 1]
_CMAP_STOPS = {
    "oxy": np.array([
        [0.00, 0.0, 0.0, 1.0],
        [0.33, 0.0, 1.0, 1.0],
        [0.66, 1.0, 1.0, 0.0],
        [1.00, 1.0, 0.0, 0.0],
    ]),
}


def apply_colormap(values: np.ndarray, name: str = "oxy") -> np.ndarray:
    """Map values in [0,1] to float RGB via piecewise-linear stops."""
    try:
        stops = _CMAP_STOPS[name]
    except KeyError:
        raise ValueError(f"unknown colormap {name!r}") from None
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([np.interp(v, stops[:, 0], stops[:, 1 + c]) for c in range(3)], axis=-1)
    return rgb


@dataclass
class OverlayImage:
    rgba: np.ndarray  # (H, W, 4) uint8, alpha 0 outside the tissue mask


def colorize(so2_map: SO2Map, mask: TissueMask, cmap: str = "oxy",
             alpha: float = DEFAULT_OVERLAY_ALPHA) -> OverlayImage:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    h, w = so2_map.so2.shape
    rgba = np.zeros((h, w, 4), dtype=np.uint8)
    m = mask.mask
    if m.any():
        vals = np.where(np.isnan(so2_map.so2), 0.0, so2_map.so2)
        rgb = apply_colormap(vals, cmap)
        rgba[..., :3] = np.round(255.0 * rgb).astype(np.uint8)
        rgba[..., 3] = np.where(m, int(round(255 * alpha)), 0)
        rgba[~m, :3] = 0
    return OverlayImage(rgba)


def composite(base_rgb: np.ndarray, overlay: OverlayImage) -> np.ndarray:
    """Source-over alpha blend of the overlay onto an 8-bit RGB base."""
    a = overlay.rgba[..., 3:4].astype(np.float64) / 255.0
    top = overlay.rgba[..., :3].astype(np.float64)
    out = top * a + base_rgb.astype(np.float64) * (1.0 - a)
    return np.round(out).astype(np.uint8)
