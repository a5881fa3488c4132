"""Binary and JSON persistence: cubes, raw frames, phantoms, recordings, PNG.

All binary formats are little-endian with a u16 format version after the
magic, and round-trip bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .cube import RawSensorFrame, SpectralCube, STAGE_TAGS, TAG_STAGES
from .reflect import RegionOfInterest, WhiteReferenceCube

FORMAT_VERSION = 1

HSC_MAGIC = b"HSC1"
HSR_MAGIC = b"HSR1"


class FormatError(ValueError):
    pass


def _read_exact(buf: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(buf):
        raise FormatError(
            f"truncated {what}: expected {offset + size} bytes, got {len(buf)}")
    return buf[offset:offset + size]


def _check_header(buf: bytes, magic: bytes) -> int:
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    return 6


# --- HSC1 spectral cubes ------------------------------------------------------

def write_cube(cube: SpectralCube, path) -> None:
    parts = [HSC_MAGIC, struct.pack("<H", FORMAT_VERSION)]
    parts.append(struct.pack("<IIIB", cube.width, cube.height, cube.plane_count,
                             STAGE_TAGS[cube.stage]))
    parts.append(np.ascontiguousarray(cube.wavelengths_nm, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(cube.values, dtype="<f4").tobytes())
    for p in range(cube.plane_count):
        parts.append(np.packbits(cube.valid[p].reshape(-1)).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_cube(path) -> SpectralCube:
    buf = Path(path).read_bytes()
    off = _check_header(buf, HSC_MAGIC)
    w, h, n, tag = struct.unpack_from("<IIIB", _read_exact(buf, off, 13, "cube header"), 0)
    off += 13
    if tag not in TAG_STAGES:
        raise FormatError(f"unknown stage tag {tag}")
    wl = np.frombuffer(_read_exact(buf, off, 4 * n, "wavelengths"), dtype="<f4").copy()
    off += 4 * n
    nv = n * h * w
    values = np.frombuffer(_read_exact(buf, off, 4 * nv, "cube values"),
                           dtype="<f4").copy().reshape(n, h, w)
    off += 4 * nv
    plane_bytes = (h * w + 7) // 8
    valid = np.empty((n, h, w), dtype=bool)
    for p in range(n):
        bits = np.frombuffer(_read_exact(buf, off, plane_bytes, "validity bits"),
                             dtype=np.uint8)
        off += plane_bytes
        valid[p] = np.unpackbits(bits, count=h * w).astype(bool).reshape(h, w)
    if off != len(buf):
        raise FormatError(f"trailing bytes: expected {off}, got {len(buf)}")
    return SpectralCube(values, valid, TAG_STAGES[tag], wl)


# --- HSR1 raw frames ----------------------------------------------------------

def write_raw_frame(frame: RawSensorFrame, path) -> None:
    parts = [HSR_MAGIC, struct.pack("<H", FORMAT_VERSION)]
    parts.append(struct.pack("<IIHHQf", frame.width, frame.height, frame.bit_depth,
                             0, frame.frame_id, frame.integration_time_ms))
    parts.append(np.ascontiguousarray(frame.pixels, dtype="<u2").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_raw_frame(path) -> RawSensorFrame:
    buf = Path(path).read_bytes()
    off = _check_header(buf, HSR_MAGIC)
    w, h, bit_depth, _res, frame_id, integration = struct.unpack_from(
        "<IIHHQf", _read_exact(buf, off, 24, "frame header"), 0)
    off += 24
    npx = w * h
    expected = off + 2 * npx
    if len(buf) != expected:
        raise FormatError(f"length mismatch: expected {expected} bytes, got {len(buf)}")
    pixels = np.frombuffer(buf, dtype="<u2", count=npx, offset=off).copy().reshape(h, w)
    return RawSensorFrame(pixels=pixels, bit_depth=bit_depth,
                          integration_time_ms=float(integration), frame_id=int(frame_id))


# --- white reference sidecar --------------------------------------------------

def write_white_reference(white: WhiteReferenceCube, cube_path, sidecar_path,
                          roi: RegionOfInterest | None = None) -> None:
    cube = SpectralCube(
        white.values[:, None, None].astype(np.float32),
        white.valid[:, None, None].copy(),
        "uniform",
        white.wavelengths_nm.astype(np.float32),
    )
    write_cube(cube, cube_path)
    doc = {
        "gauze_reflectance_factor": white.gauze_reflectance_factor,
        "frame_id": white.frame_id,
        "roi": dataclasses.asdict(roi) if roi is not None else None,
    }
    Path(sidecar_path).write_text(json.dumps(doc, indent=1))


def read_white_reference(cube_path, sidecar_path) -> WhiteReferenceCube:
    cube = read_cube(cube_path)
    doc = json.loads(Path(sidecar_path).read_text())
    return WhiteReferenceCube(
        values=cube.values[:, 0, 0].copy(),
        valid=cube.valid[:, 0, 0].copy(),
        wavelengths_nm=cube.wavelengths_nm.copy(),
        gauze_reflectance_factor=float(doc["gauze_reflectance_factor"]),
        frame_id=int(doc["frame_id"]),
    )


# --- phantom scenario files ---------------------------------------------------

def phantom_to_dict(kind: str, width: int, height: int, **params) -> dict:
    return {"kind": kind, "width": width, "height": height, "params": params}


def save_phantom_spec(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1))


def load_phantom(path_or_doc):
    from . import sim
    if isinstance(path_or_doc, (str, Path)):
        doc = json.loads(Path(path_or_doc).read_text())
    else:
        doc = path_or_doc
    kind = doc.get("kind")
    builders = {
        "wedge": sim.make_wedge_phantom,
        "resection": sim.make_resection_phantom,
        "props": sim.make_props_phantom,
    }
    if kind not in builders:
        raise FormatError(f"unknown phantom kind {kind!r}")
    return builders[kind](doc["width"], doc["height"], **doc.get("params", {}))


# --- recordings ---------------------------------------------------------------

class RecordingWriter:
    """Appends raw frames and config/roi events under a recording directory."""

    def __init__(self, directory, profile_name: str, config_snapshot: dict,
                 calibration_file: str = "calibration.calib"):
        self.dir = Path(directory)
        (self.dir / "frames").mkdir(parents=True, exist_ok=True)
        self.profile_name = profile_name
        self.calibration_file = calibration_file
        self._frames: list[dict] = []
        self._config_events = [{"from_frame": 0, "config": config_snapshot}]
        self._roi_events: list[dict] = []
        self._last_id = None

    def add_frame(self, frame: RawSensorFrame) -> None:
        if self._last_id is not None and frame.frame_id <= self._last_id:
            raise FormatError("recording frame ids must be strictly increasing")
        self._last_id = frame.frame_id
        rel = f"frames/{frame.frame_id:08d}.hsr1"
        write_raw_frame(frame, self.dir / rel)
        self._frames.append({"frame_id": frame.frame_id, "file": rel})

    def record_roi(self, roi: RegionOfInterest, frame_id: int) -> None:
        self._roi_events.append({"frame_id": frame_id, "roi": dataclasses.asdict(roi)})

    def record_config(self, from_frame: int, config_snapshot: dict) -> None:
        self._config_events.append({"from_frame": from_frame, "config": config_snapshot})

    def close(self) -> None:
        manifest = {
            "version": FORMAT_VERSION,
            "profile": self.profile_name,
            "calibration": self.calibration_file,
            "config_events": self._config_events,
            "roi_events": self._roi_events,
            "frames": self._frames,
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=1))


class Recording:
    def __init__(self, directory, manifest: dict):
        self.dir = Path(directory)
        self.manifest = manifest
        ids = [f["frame_id"] for f in manifest["frames"]]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise FormatError("manifest frame ids are not strictly increasing")

    @classmethod
    def load(cls, directory) -> "Recording":
        directory = Path(directory)
        mf = directory / "manifest.json"
        if not mf.exists():
            raise FileNotFoundError(f"no manifest.json under {directory}")
        manifest = json.loads(mf.read_text())
        if manifest.get("version") != FORMAT_VERSION:
            raise FormatError(f"unsupported recording version {manifest.get('version')}")
        return cls(directory, manifest)

    @property
    def profile_name(self) -> str:
        return self.manifest["profile"]

    @property
    def frame_ids(self) -> list[int]:
        return [f["frame_id"] for f in self.manifest["frames"]]

    @property
    def roi_events(self) -> list[dict]:
        return self.manifest["roi_events"]

    def frames(self):
        for entry in self.manifest["frames"]:
            yield read_raw_frame(self.dir / entry["file"])


# --- PNG export ---------------------------------------------------------------

def export_png(raster: np.ndarray, path) -> None:
    from PIL import Image
    if raster.dtype != np.uint8:
        raise FormatError("png export expects an 8-bit raster")
    Image.fromarray(raster).save(Path(path), format="PNG")


def encode_png(raster: np.ndarray) -> bytes:
    import io as _io
    from PIL import Image
    buf = _io.BytesIO()
    Image.fromarray(raster).save(buf, format="PNG")
    return buf.getvalue()
