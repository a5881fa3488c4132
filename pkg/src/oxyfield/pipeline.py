"""Per-frame processing chain, stream pacing, and the benchmark harness."""

from __future__ import annotations

import json
import platform
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import cube as cube_mod
from . import oxy as oxy_mod
from . import reflect as reflect_mod
from .calib import CalibrationSet, calibration_at_distance, get_profile, synthesize_default_calibration
from .cube import RawSensorFrame
from .oxy import (DEFAULT_MIN_VALID_BANDS, DEFAULT_OVERLAY_ALPHA,
                  DEFAULT_SAM_THRESHOLD_RAD, ReferenceLibrary, SimilarityMap,
                  SO2Map, TissueMask, build_synthetic_library)
from .reflect import RegionOfInterest, WhiteReferenceCube

DEFAULT_WORKING_DISTANCE_CM = 56.0
DEFAULT_TARGET_FPS = 1.0
DEFAULT_QUEUE_CAPACITY = 2
WHITE_REFERENCE_MAX_AGE_S = 300.0

OVERLAY_MODES = ("rgb", "overlay", "composite", "so2", "similarity")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    profile_name: str = "s5"
    working_distance_cm: float = DEFAULT_WORKING_DISTANCE_CM
    roi: RegionOfInterest | None = None
    gauze_reflectance_factor: float = 1.0
    sam_threshold_rad: float = DEFAULT_SAM_THRESHOLD_RAD
    min_valid_bands: int = DEFAULT_MIN_VALID_BANDS
    colormap: str = "oxy"
    overlay_alpha: float = DEFAULT_OVERLAY_ALPHA
    overlay_mode: str = "composite"
    target_fps: float = DEFAULT_TARGET_FPS
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    white_max_age_s: float = WHITE_REFERENCE_MAX_AGE_S

    def __post_init__(self):
        profile = get_profile(self.profile_name)
        if not 0 < self.target_fps <= profile.max_fps:
            raise ConfigError(
                f"target_fps {self.target_fps} outside (0, {profile.max_fps}]")
        if self.queue_capacity < 1:
            raise ConfigError("queue capacity must be at least 1")
        if self.working_distance_cm <= 0:
            raise ConfigError("working distance must be positive")
        if not 0 < self.gauze_reflectance_factor <= 1:
            raise ConfigError("gauze reflectance factor must be in (0, 1]")
        if not 0 < self.sam_threshold_rad < np.pi / 2:
            raise ConfigError("sam threshold must be in (0, pi/2)")
        if not 0 <= self.overlay_alpha <= 1:
            raise ConfigError("overlay alpha must be in [0, 1]")
        if self.overlay_mode not in OVERLAY_MODES:
            raise ConfigError(f"unknown overlay mode {self.overlay_mode!r}")


@dataclass
class StageTimings:
    """Wall-clock stage decomposition; overhead is defined as the residual."""

    reflectance_cube_ms: float = 0.0
    rgb_image_ms: float = 0.0
    oxy_correlation_ms: float = 0.0
    oxy_image_ms: float = 0.0
    overhead_ms: float = 0.0
    total_ms: float = 0.0

    ROWS = ("reflectance_cube_ms", "rgb_image_ms", "oxy_correlation_ms",
            "oxy_image_ms", "overhead_ms", "total_ms")
    ROW_LABELS = ("Reflectance Cube", "RGB Image", "Oxy Correlation",
                  "Oxy Image", "Add. Overhead", "Total (ms)")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.ROWS}


@dataclass
class ProcessedFrame:
    frame_id: int
    rgb: np.ndarray | None = None
    overlay: oxy_mod.OverlayImage | None = None
    composite: np.ndarray | None = None
    so2_map: SO2Map | None = None
    similarity_map: SimilarityMap | None = None
    tissue_mask: TissueMask | None = None
    so2_histogram: np.ndarray | None = None
    mean_so2: float = float("nan")
    timings: StageTimings = field(default_factory=StageTimings)
    warnings: list[str] = field(default_factory=list)
    uncalibrated: bool = False
    failed: bool = False
    error: str | None = None


@dataclass
class StreamStats:
    frames_in: int = 0
    frames_out: int = 0
    frames_dropped: int = 0
    frames_failed: int = 0

    def as_dict(self) -> dict:
        return {"frames_in": self.frames_in, "frames_out": self.frames_out,
                "frames_dropped": self.frames_dropped, "frames_failed": self.frames_failed}


class DropOldestQueue:
    """Bounded thread-safe hand-off; a full queue evicts its stalest item."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self._dq = deque()
        self.capacity = capacity
        self._lock = threading.Lock()
        self._not_empty = threading.Condition(self._lock)
        self.dropped = 0
        self._closed = False

    def put(self, item) -> bool:
        """Insert an item; returns False when an old item was evicted."""
        with self._lock:
            evicted = False
            if len(self._dq) >= self.capacity:
                self._dq.popleft()
                self.dropped += 1
                evicted = True
            self._dq.append(item)
            self._not_empty.notify()
            return not evicted

    def get(self, timeout: float | None = None):
        """Pop the oldest item; None when the queue is closed and drained."""
        with self._lock:
            while not self._dq:
                if self._closed:
                    return None
                if not self._not_empty.wait(timeout):
                    raise TimeoutError("queue get timed out")
            return self._dq.popleft()

    def close(self):
        with self._lock:
            self._closed = True
            self._not_empty.notify_all()

    def __len__(self):
        with self._lock:
            return len(self._dq)


class Pipeline:
    """Owns resolved calibration, the reference library, the active white
    reference, and the per-frame processing chain.

    Configuration changes and roi selections apply atomically at frame
    boundaries; a frame never mixes old and new parameters.
    """

    def __init__(self, calib: CalibrationSet, library: ReferenceLibrary,
                 config: PipelineConfig):
        if calib.profile.name != config.profile_name:
            raise ConfigError("calibration profile does not match configuration")
        self.calib = calib
        self._lock = threading.Lock()
        self._config = config
        self._pending: dict = {}
        self._pending_roi: RegionOfInterest | None = None
        self.white: WhiteReferenceCube | None = None
        self._resolved = calibration_at_distance(calib, config.working_distance_cm)
        self._library_raw = library
        self._library = oxy_mod.resample_library(
            library, calib.profile.band_grid, config.min_valid_bands)
        self.stats = StreamStats()
        self.on_white_updated = None  # optional callback(white)
        self.on_frame_start = None  # optional callback(frame_id) at boundary

    @property
    def config(self) -> PipelineConfig:
        with self._lock:
            return self._config

    @property
    def resolved(self):
        return self._resolved

    @property
    def library(self) -> ReferenceLibrary:
        return self._library

    def request_config(self, **changes) -> PipelineConfig:
        """Validate and stage a config change for the next frame boundary."""
        with self._lock:
            candidate = replace(self._config, **{**self._pending, **changes})
            self._pending.update(changes)
            return candidate

    def request_roi(self, roi: RegionOfInterest):
        scene_w = self.calib.profile.subimage_width
        scene_h = self.calib.profile.subimage_height
        if not roi.within(scene_w, scene_h):
            raise ConfigError(f"roi outside scene {scene_w}x{scene_h}")
        with self._lock:
            self._pending_roi = roi

    def _apply_pending(self):
        with self._lock:
            roi = self._pending_roi
            self._pending_roi = None
            if roi is not None:
                self._config = replace(self._config, roi=roi)
            if self._pending:
                old = self._config
                self._config = replace(self._config, **self._pending)
                self._pending = {}
                if self._config.working_distance_cm != old.working_distance_cm:
                    self._resolved = calibration_at_distance(
                        self.calib, self._config.working_distance_cm)
            return self._config, roi

    def process_frame(self, frame: RawSensorFrame) -> ProcessedFrame:
        cfg, new_roi = self._apply_pending()
        if self.on_frame_start is not None:
            self.on_frame_start(frame.frame_id)
        out = ProcessedFrame(frame_id=frame.frame_id)
        t_start = time.perf_counter()
        try:
            self._run_chain(frame, cfg, new_roi, out)
        except Exception as e:  # frame errors annotate, never crash, the stream
            out.failed = True
            out.error = f"{type(e).__name__}: {e}"
        measured = (out.timings.reflectance_cube_ms + out.timings.rgb_image_ms
                    + out.timings.oxy_correlation_ms + out.timings.oxy_image_ms)
        out.timings.total_ms = (time.perf_counter() - t_start) * 1000.0
        out.timings.overhead_ms = out.timings.total_ms - measured
        return out

    def _run_chain(self, frame: RawSensorFrame, cfg: PipelineConfig,
                   new_roi: RegionOfInterest | None, out: ProcessedFrame):
        resolved = self._resolved
        if resolved.extrapolated:
            out.warnings.append(
                f"working distance {cfg.working_distance_cm} cm outside calibrated range")

        t0 = time.perf_counter()
        raw = cube_mod.extract_raw_cube(frame, self.calib.layout)
        sat_frac = 1.0 - raw.valid.mean()
        if sat_frac > 0.01:
            out.warnings.append(f"saturation fraction {sat_frac:.3f}")
        transformed = cube_mod.warp_cube(raw, resolved)
        uniform = cube_mod.resample_uniform(transformed, resolved,
                                            self.calib.profile.band_grid)
        if new_roi is not None:
            roi = replace(new_roi, frame_id=frame.frame_id)
            self.white = reflect_mod.extract_white_reference(
                uniform, roi, cfg.gauze_reflectance_factor)
            if self.on_white_updated is not None:
                self.on_white_updated(self.white)
        white = self.white
        if white is None:
            out.timings.reflectance_cube_ms = (time.perf_counter() - t0) * 1000.0
            out.uncalibrated = True
            out.warnings.append("no white reference; rgb rendered from raw radiance")
            t1 = time.perf_counter()
            out.rgb = self._rgb_without_reference(uniform)
            out.composite = out.rgb
            out.timings.rgb_image_ms = (time.perf_counter() - t1) * 1000.0
            return
        if white.age_s() > cfg.white_max_age_s:
            out.warnings.append(f"white reference stale ({white.age_s():.0f} s old)")
        reflectance = reflect_mod.normalize_reflectance(uniform, white)
        out.timings.reflectance_cube_ms = (time.perf_counter() - t0) * 1000.0

        t1 = time.perf_counter()
        out.rgb = oxy_mod.render_rgb(reflectance)
        out.timings.rgb_image_ms = (time.perf_counter() - t1) * 1000.0

        t2 = time.perf_counter()
        so2_map, sim_map = oxy_mod.classify_so2(reflectance, self._library,
                                                cfg.min_valid_bands)
        out.so2_map, out.similarity_map = so2_map, sim_map
        out.timings.oxy_correlation_ms = (time.perf_counter() - t2) * 1000.0

        t3 = time.perf_counter()
        mask = oxy_mod.build_tissue_mask(so2_map, sim_map, cfg.sam_threshold_rad)
        out.tissue_mask = mask
        out.overlay = oxy_mod.colorize(so2_map, mask, cfg.colormap, cfg.overlay_alpha)
        out.composite = oxy_mod.composite(out.rgb, out.overlay)
        out.timings.oxy_image_ms = (time.perf_counter() - t3) * 1000.0

        counts = np.bincount(so2_map.index[mask.mask & so2_map.classified],
                             minlength=self._library.entry_count)
        out.so2_histogram = counts
        masked = so2_map.so2[mask.mask]
        out.mean_so2 = float(masked.mean()) if masked.size else float("nan")

    def _rgb_without_reference(self, uniform) -> np.ndarray:
        # normalize each display band to its own max so something is visible
        wl = uniform.wavelengths_nm.astype(np.float64)
        out = np.zeros((uniform.height, uniform.width, 3), dtype=np.uint8)
        for ch, target in enumerate(oxy_mod.RGB_BANDS_NM):
            b = int(np.argmin(np.abs(wl - target)))
            vals = np.where(uniform.valid[b], uniform.values[b], 0.0)
            peak = vals.max()
            if peak > 0:
                vals = vals / peak
            out[..., ch] = np.round(255.0 * np.clip(vals, 0, 1) ** oxy_mod.GAMMA)
        return out


def run_stream(source, pipeline: Pipeline, sinks, stop_event: threading.Event | None = None,
               source_fps: float | None = None) -> StreamStats:
    """Pump frames source -> bounded queue -> pipeline -> sinks until the
    source is exhausted or the stop event fires.  Returns the stream stats."""
    stop = stop_event if stop_event is not None else threading.Event()
    q = DropOldestQueue(pipeline.config.queue_capacity)
    stats = pipeline.stats

    def produce():
        period = 1.0 / source_fps if source_fps else 0.0
        nxt = time.monotonic()
        for frame in source:
            if stop.is_set():
                break
            if period:
                nxt += period
                delay = nxt - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            stats.frames_in += 1
            q.put(frame)
        q.close()

    producer = threading.Thread(target=produce, daemon=True)
    producer.start()
    try:
        while True:
            if stop.is_set():
                break
            frame = q.get()
            if frame is None:
                break
            processed = pipeline.process_frame(frame)
            if processed.failed:
                stats.frames_failed += 1
            stats.frames_out += 1
            for sink in sinks:
                sink(processed)
    finally:
        stop.set()
        q.close()
        producer.join(timeout=5.0)
        stats.frames_dropped = q.dropped
    return stats


# --- benchmark ----------------------------------------------------------------

@dataclass
class BenchmarkReport:
    profile_name: str
    levels: int
    repetitions: int
    machine: str
    median_ms: dict
    spread_ms: dict  # interquartile range per stage
    sustained_fps: float

    def to_text(self) -> str:
        lines = [f"Benchmark profile={self.profile_name} levels={self.levels} "
                 f"reps={self.repetitions}",
                 f"Machine: {self.machine}",
                 f"{'Stage':<18}{'median (ms)':>14}{'iqr (ms)':>12}"]
        for key, label in zip(StageTimings.ROWS, StageTimings.ROW_LABELS):
            lines.append(f"{label:<18}{self.median_ms[key]:>14.2f}{self.spread_ms[key]:>12.2f}")
        lines.append(f"Sustained throughput: {self.sustained_fps:.2f} fps")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({
            "profile": self.profile_name,
            "levels": self.levels,
            "repetitions": self.repetitions,
            "machine": self.machine,
            "median_ms": self.median_ms,
            "iqr_ms": self.spread_ms,
            "sustained_fps": self.sustained_fps,
        }, indent=1)


def make_demo_pipeline(profile_name: str, levels: int = 36,
                       phantom_kind: str = "wedge", **config_kwargs):
    """Pipeline + simulator source for a synthetic scenario (shared by
    benchmark, CLI, and service)."""
    from . import sim as sim_mod
    profile = get_profile(profile_name)
    calib = synthesize_default_calibration(profile, [DEFAULT_WORKING_DISTANCE_CM])
    library = build_synthetic_library(levels, grid=profile.band_grid)
    config = PipelineConfig(profile_name=profile_name, **config_kwargs)
    pipeline = Pipeline(calib, library, config)
    w, h = profile.subimage_width, profile.subimage_height
    if phantom_kind == "wedge":
        phantom = sim_mod.make_wedge_phantom(w, h, levels)
    elif phantom_kind == "resection":
        phantom = sim_mod.make_resection_phantom(w, h)
    elif phantom_kind == "props":
        phantom = sim_mod.make_props_phantom(w, h)
    else:
        raise ConfigError(f"unknown phantom {phantom_kind!r}")
    integration = 5.0 if profile_name == "s5" else 2.0
    source = sim_mod.SimulatedSource(phantom, library, calib,
                                     DEFAULT_WORKING_DISTANCE_CM, integration)
    return pipeline, source, phantom


def benchmark(profile_name: str, levels: int = 36, repetitions: int = 11,
              warmup: int = 3) -> BenchmarkReport:
    """Measure the per-stage processing-time decomposition on a synthetic frame."""
    if repetitions < 5:
        raise ConfigError("at least 5 repetitions required")
    pipeline, source, phantom = make_demo_pipeline(profile_name, levels)
    frame = source.frame(0)
    from .sim import gauze_roi
    pipeline.request_roi(gauze_roi(phantom))
    for _ in range(warmup):
        pipeline.process_frame(frame)
    samples = {k: [] for k in StageTimings.ROWS}
    for _ in range(repetitions):
        result = pipeline.process_frame(frame)
        for k in StageTimings.ROWS:
            samples[k].append(getattr(result.timings, k))
    median = {k: float(np.median(v)) for k, v in samples.items()}
    spread = {k: float(np.percentile(v, 75) - np.percentile(v, 25))
              for k, v in samples.items()}
    machine = f"{platform.platform()} / {platform.processor() or platform.machine()}"
    fps = 1000.0 / median["total_ms"] if median["total_ms"] > 0 else float("inf")
    return BenchmarkReport(profile_name, levels, repetitions, machine,
                           median, spread, fps)
