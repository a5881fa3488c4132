"""WebSocket endpoint streaming processed frames and accepting steering
commands from operator consoles.

Protocol on `/stream`:
  - text frames: JSON control messages in, JSON frame-metadata / stats /
    ack / nack / event messages out;
  - binary frames: image payloads with a fixed 32-byte little-endian header
    (magic "OXF1", u16 version, u16 encoding 0=PNG 1=raw RGBA8, u64 frame_id,
    u32 width, u32 height, u32 payload length, u32 reserved).
"""

from __future__ import annotations

import asyncio
import dataclasses
import json
import struct
import threading
from collections import deque

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from . import formats
from .pipeline import (OVERLAY_MODES, Pipeline, ProcessedFrame, StageTimings,
                       make_demo_pipeline, run_stream)
from .reflect import RegionOfInterest

OXF_MAGIC = b"OXF1"
PROTOCOL_VERSION = 1
ENC_PNG = 0
ENC_RGBA8 = 1

SCENARIOS = ("wedge", "resection", "props")


def pack_frame_header(frame_id: int, width: int, height: int, payload_len: int,
                      encoding: int = ENC_PNG) -> bytes:
    return (OXF_MAGIC + struct.pack("<HHQIIII", PROTOCOL_VERSION, encoding,
                                    frame_id, width, height, payload_len, 0))


def unpack_frame_header(buf: bytes) -> dict:
    if len(buf) < 32 or buf[:4] != OXF_MAGIC:
        raise ValueError("bad stream frame header")
    version, encoding, frame_id, width, height, payload_len, _ = struct.unpack_from(
        "<HHQIIII", buf, 4)
    return {"version": version, "encoding": encoding, "frame_id": frame_id,
            "width": width, "height": height, "payload_len": payload_len}


def _frame_raster(pf: ProcessedFrame, mode: str) -> np.ndarray:
    if mode == "rgb" or pf.uncalibrated:
        return pf.rgb
    if mode == "composite":
        return pf.composite
    if mode == "overlay":
        return pf.overlay.rgba
    if mode == "so2":
        vals = np.where(np.isnan(pf.so2_map.so2), 0.0, pf.so2_map.so2)
        from .oxy import apply_colormap
        return np.round(255 * apply_colormap(vals)).astype(np.uint8)
    if mode == "similarity":
        ang = np.where(np.isnan(pf.similarity_map.angle), np.pi / 2,
                       pf.similarity_map.angle)
        g = np.round(255 * (1.0 - np.clip(ang / (np.pi / 2), 0, 1))).astype(np.uint8)
        return np.stack([g, g, g], axis=-1)
    raise ValueError(f"unknown overlay mode {mode!r}")


class ServiceRuntime:
    """Runs a pipeline stream in a worker thread and fans frames out to
    per-connection latest-frame mailboxes (depth 1, overwrite)."""

    def __init__(self, profile_name: str = "s5", scenario: str = "props",
                 source_fps: float | None = None, encoding: int = ENC_PNG,
                 levels: int = 36, recordings: dict | None = None):
        self.profile_name = profile_name
        self.levels = levels
        self.encoding = encoding
        self.source_fps = source_fps
        self.recordings = recordings or {}
        self._subscribers: set[_Mailbox] = set()
        self._sub_lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.pause_event = threading.Event()
        self.last_frame_id = -1
        self._frame_start_waiters: deque = deque()
        self._waiter_lock = threading.Lock()
        self._timing_history: deque = deque(maxlen=64)
        self.pipeline: Pipeline | None = None
        self.source_name = scenario
        self._build_source(scenario)

    # -- source management ----------------------------------------------------

    def _build_source(self, name: str):
        if name in SCENARIOS:
            pipeline, source, phantom = make_demo_pipeline(self.profile_name,
                                                           self.levels, name)
            self.pipeline = pipeline
            self._source = source
            self.phantom = phantom
            from .sim import gauze_roi
            pipeline.request_roi(gauze_roi(phantom))
        elif name in self.recordings:
            import pathlib

            from .calib import load_calibration
            from .oxy import build_synthetic_library
            from .pipeline import PipelineConfig
            rec_dir = pathlib.Path(self.recordings[name])
            rec = formats.Recording.load(rec_dir)
            calib_set = load_calibration(rec_dir / rec.manifest["calibration"])
            library = build_synthetic_library(self.levels,
                                              grid=calib_set.profile.band_grid)
            cfg_doc = dict(rec.manifest["config_events"][0]["config"])
            if isinstance(cfg_doc.get("roi"), dict):
                cfg_doc["roi"] = RegionOfInterest(**cfg_doc["roi"])
            config = PipelineConfig(**cfg_doc)
            self.pipeline = Pipeline(calib_set, library, config)
            if rec.roi_events:
                self.pipeline.request_roi(
                    RegionOfInterest(**rec.roi_events[0]["roi"]))
            self._source = rec.frames()
            self.phantom = None
        else:
            raise ValueError(f"unknown source {name!r}")
        self.source_name = name
        self.pipeline.on_frame_start = self._on_frame_start
        self.pipeline.on_white_updated = lambda white: self._broadcast_json(
            {"type": "event", "event": "white_reference_updated",
             "valid_bands": int(np.count_nonzero(white.valid))})

    def select_source(self, name: str):
        running = self._thread is not None and self._thread.is_alive()
        if running:
            self.stop()
        self._build_source(name)
        if running:
            self.start()
        self._broadcast_json({"type": "event", "event": "source_changed",
                              "source": name})

    # -- stream lifecycle -----------------------------------------------------

    def start(self):
        self._stop = threading.Event()

        def run():
            run_stream(self._iter_paused(self._source), self.pipeline,
                       [self._publish], stop_event=self._stop,
                       source_fps=self.source_fps)

        self._thread = threading.Thread(target=run, daemon=True)
        self._thread.start()

    def _iter_paused(self, source):
        for frame in source:
            while self.pause_event.is_set() and not self._stop.is_set():
                self._stop.wait(0.02)
            if self._stop.is_set():
                return
            yield frame

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10.0)
            self._thread = None

    # -- frame fan-out --------------------------------------------------------

    def _on_frame_start(self, frame_id: int):
        with self._waiter_lock:
            waiters, self._frame_start_waiters = self._frame_start_waiters, deque()
        for cb in waiters:
            cb(frame_id)

    def on_next_frame_start(self, callback):
        """Invoke callback(frame_id) when the next frame begins processing."""
        with self._waiter_lock:
            self._frame_start_waiters.append(callback)

    def _publish(self, pf: ProcessedFrame):
        self.last_frame_id = pf.frame_id
        if not pf.failed:
            self._timing_history.append(pf.timings)
        with self._sub_lock:
            subs = list(self._subscribers)
        for mb in subs:
            mb.offer(pf)

    def _broadcast_json(self, doc: dict):
        with self._sub_lock:
            subs = list(self._subscribers)
        for mb in subs:
            mb.offer_json(doc)

    def subscribe(self) -> "_Mailbox":
        mb = _Mailbox()
        with self._sub_lock:
            self._subscribers.add(mb)
        return mb

    def unsubscribe(self, mb: "_Mailbox"):
        with self._sub_lock:
            self._subscribers.discard(mb)

    # -- stats ----------------------------------------------------------------

    def stats_doc(self) -> dict:
        p = self.pipeline
        cfg = p.config
        medians = {}
        if self._timing_history:
            hist = list(self._timing_history)
            for key in StageTimings.ROWS:
                medians[key] = float(np.median([getattr(t, key) for t in hist]))
        cfg_doc = dataclasses.asdict(cfg)
        return {"type": "stats", "counters": p.stats.as_dict(),
                "timing_medians_ms": medians, "config": cfg_doc,
                "source": self.source_name, "paused": self.pause_event.is_set()}


class _Mailbox:
    """Latest-frame mailbox plus an unbounded side channel for JSON events."""

    def __init__(self):
        self._lock = threading.Lock()
        self._frame: ProcessedFrame | None = None
        self._events: deque = deque()
        self._loop: asyncio.AbstractEventLoop | None = None
        self._wakeup: asyncio.Event | None = None

    async def attach(self):
        self._loop = asyncio.get_running_loop()
        self._wakeup = asyncio.Event()

    def _notify(self):
        if self._loop is not None and self._wakeup is not None:
            self._loop.call_soon_threadsafe(self._wakeup.set)

    def offer(self, pf: ProcessedFrame):
        with self._lock:
            self._frame = pf  # overwrite: a slow viewer skips to the newest
        self._notify()

    def offer_json(self, doc: dict):
        with self._lock:
            self._events.append(doc)
        self._notify()

    async def take(self, timeout: float = 1.0):
        """Return ("frame", pf) / ("json", doc) / None on timeout."""
        while True:
            with self._lock:
                if self._events:
                    return ("json", self._events.popleft())
                if self._frame is not None:
                    pf, self._frame = self._frame, None
                    return ("frame", pf)
            try:
                await asyncio.wait_for(self._wakeup.wait(), timeout)
            except asyncio.TimeoutError:
                return None
            self._wakeup.clear()


# --- control handling ---------------------------------------------------------

class ControlError(ValueError):
    pass


def _require(msg: dict, key: str):
    if key not in msg:
        raise ControlError(f"missing field {key!r}")
    return msg[key]


def apply_control(runtime: ServiceRuntime, msg: dict) -> tuple[bool, str | None]:
    """Apply a control message; returns (ack_at_frame_boundary, detail)."""
    mtype = _require(msg, "type")
    p = runtime.pipeline
    if mtype == "set_roi":
        roi = RegionOfInterest(int(_require(msg, "x")), int(_require(msg, "y")),
                               int(_require(msg, "width")), int(_require(msg, "height")))
        p.request_roi(roi)
        return True, None
    if mtype == "set_working_distance":
        p.request_config(working_distance_cm=float(_require(msg, "cm")))
        return True, None
    if mtype == "set_threshold":
        p.request_config(sam_threshold_rad=float(_require(msg, "rad")))
        return True, None
    if mtype == "set_colormap":
        changes = {"colormap": str(_require(msg, "name"))}
        if "alpha" in msg:
            changes["overlay_alpha"] = float(msg["alpha"])
        p.request_config(**changes)
        return True, None
    if mtype == "set_overlay_mode":
        mode = str(_require(msg, "mode"))
        if mode not in OVERLAY_MODES:
            raise ControlError(f"unknown overlay mode {mode!r}")
        p.request_config(overlay_mode=mode)
        return True, None
    if mtype == "pause":
        runtime.pause_event.set()
        return False, None
    if mtype == "resume":
        runtime.pause_event.clear()
        return False, None
    if mtype == "select_source":
        runtime.select_source(str(_require(msg, "source")))
        return False, None
    if mtype == "request_stats":
        return False, "stats"
    raise ControlError(f"unknown control type {mtype!r}")


# --- FastAPI app --------------------------------------------------------------

def create_app(runtime: ServiceRuntime) -> FastAPI:
    app = FastAPI()
    app.state.runtime = runtime

    @app.websocket("/stream")
    async def stream(ws: WebSocket):
        try:
            await _stream_session(runtime, ws)
        except WebSocketDisconnect:
            pass
        except Exception:
            import logging
            logging.getLogger(__name__).exception("stream session failed")
            raise

    return app


async def _stream_session(runtime: ServiceRuntime, ws: WebSocket):
    await ws.accept()
    mb = runtime.subscribe()
    await mb.attach()
    recv_task = asyncio.create_task(ws.receive())
    try:
        while True:
            take_task = asyncio.create_task(mb.take(timeout=30.0))
            done, _ = await asyncio.wait({recv_task, take_task},
                                         return_when=asyncio.FIRST_COMPLETED)
            if recv_task in done:
                try:
                    message = recv_task.result()
                except (WebSocketDisconnect, RuntimeError):
                    take_task.cancel()
                    break
                if message.get("type") == "websocket.disconnect":
                    take_task.cancel()
                    break
                if message.get("bytes") is not None:
                    # binary from a viewer is a framing violation
                    take_task.cancel()
                    await ws.close(code=1002)
                    break
                await _handle_text(runtime, ws, message.get("text") or "")
                recv_task = asyncio.create_task(ws.receive())
            if take_task in done:
                item = take_task.result()
                if item is not None:
                    kind, payload = item
                    if kind == "json":
                        await ws.send_text(json.dumps(payload))
                    else:
                        await _send_frame(runtime, ws, payload)
            else:
                take_task.cancel()
    finally:
        runtime.unsubscribe(mb)
        if not recv_task.done():
            recv_task.cancel()


async def _handle_text(runtime: ServiceRuntime, ws, text: str):
    msg_id = None
    try:
        msg = json.loads(text)
        if not isinstance(msg, dict):
            raise ControlError("control message must be a JSON object")
        msg_id = msg.get("id")
        boundary, detail = apply_control(runtime, msg)
    except (ControlError, ValueError, KeyError) as e:
        await ws.send_text(json.dumps({"type": "nack", "for_id": msg_id,
                                       "reason": str(e)}))
        return
    if detail == "stats":
        await ws.send_text(json.dumps(runtime.stats_doc()))
    if boundary and runtime.pipeline is not None and not runtime.pause_event.is_set():
        loop = asyncio.get_running_loop()
        fut = loop.create_future()
        runtime.on_next_frame_start(
            lambda fid: loop.call_soon_threadsafe(
                lambda: fut.done() or fut.set_result(fid)))
        try:
            fid = await asyncio.wait_for(fut, timeout=30.0)
        except asyncio.TimeoutError:
            await ws.send_text(json.dumps({"type": "nack", "for_id": msg_id,
                                           "reason": "no frame boundary reached"}))
            return
        await ws.send_text(json.dumps({"type": "ack", "for_id": msg_id,
                                       "frame_id": fid}))
    else:
        await ws.send_text(json.dumps({"type": "ack", "for_id": msg_id,
                                       "frame_id": runtime.last_frame_id + 1}))


async def _send_frame(runtime: ServiceRuntime, ws, pf: ProcessedFrame):
    if pf.failed:
        await ws.send_text(json.dumps({"type": "frame_error", "frame_id": pf.frame_id,
                                       "error": pf.error}))
        return
    mode = runtime.pipeline.config.overlay_mode
    raster = _frame_raster(pf, mode)
    if runtime.encoding == ENC_PNG:
        payload = formats.encode_png(raster)
        enc = ENC_PNG
    else:
        if raster.shape[-1] == 3:
            alpha = np.full(raster.shape[:2] + (1,), 255, dtype=np.uint8)
            raster = np.concatenate([raster, alpha], axis=-1)
        payload = np.ascontiguousarray(raster).tobytes()
        enc = ENC_RGBA8
    h, w = raster.shape[:2]
    meta = {
        "type": "frame", "frame_id": pf.frame_id, "width": w, "height": h,
        "encoding": enc, "mode": mode, "warnings": pf.warnings,
        "uncalibrated": pf.uncalibrated,
        "timings": pf.timings.as_dict(),
        "so2_histogram": pf.so2_histogram.tolist() if pf.so2_histogram is not None else None,
        "mean_so2": None if pf.mean_so2 != pf.mean_so2 else pf.mean_so2,
    }
    await ws.send_text(json.dumps(meta))
    await ws.send_bytes(pack_frame_header(pf.frame_id, w, h, len(payload), enc) + payload)


def serve(runtime: ServiceRuntime, host: str = "127.0.0.1", port: int = 8764):
    import uvicorn
    runtime.start()
    app = create_app(runtime)
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    finally:
        runtime.stop()
