"""Command-line entry points.

Exit codes: 0 success, 2 usage error, 3 data error (unreadable or
inconsistent inputs), 4 internal error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import formats, oxy, sim
from .calib import (CalibrationError, get_profile, load_calibration,
                    save_calibration, synthesize_default_calibration)
from .pipeline import (DEFAULT_WORKING_DISTANCE_CM, ConfigError, Pipeline,
                       PipelineConfig, benchmark, make_demo_pipeline,
                       run_stream)

EXIT_DATA = 3
EXIT_INTERNAL = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map exception classes onto the documented exit codes."""
    try:
        return fn()
    except (ConfigError, CalibrationError, ValueError) as e:
        _fail(EXIT_DATA, str(e))
    except (formats.FormatError, OSError) as e:
        _fail(EXIT_DATA, str(e))
    except Exception as e:  # pragma: no cover - defensive
        _fail(EXIT_INTERNAL, f"{type(e).__name__}: {e}")


profile_option = click.option("--profile", type=click.Choice(["s5", "x20"]),
                              default="s5", show_default=True)


@click.group()
def main():
    """Hyperspectral oxygenation imaging tools."""


@main.command()
@profile_option
@click.option("--phantom", type=click.Choice(["wedge", "resection", "props"]),
              default="wedge", show_default=True)
@click.option("--levels", type=int, default=36, show_default=True)
@click.option("--frames", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True,
              help="Recording directory to create.")
def simulate(profile, phantom, levels, frames, seed, out_dir):
    """Render synthetic raw sensor frames into a recording directory."""

    def run():
        import dataclasses
        pipeline, source, ph = make_demo_pipeline(profile, levels, phantom)
        source.noise = sim.NoiseModel(seed=seed)
        writer = formats.RecordingWriter(out_dir, profile,
                                         dataclasses.asdict(pipeline.config))
        save_calibration(pipeline.calib, Path(out_dir) / "calibration.calib")
        writer.record_roi(sim.gauze_roi(ph), 0)
        for i in range(frames):
            writer.add_frame(source.frame(i))
        writer.close()
        click.echo(f"wrote {frames} frames to {out_dir}")

    _guard(run)


@main.command("process")
@click.argument("recording", type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--mode", type=click.Choice(["rgb", "overlay", "composite",
                                           "so2", "similarity"]),
              default="composite", show_default=True)
@click.option("--levels", type=int, default=36, show_default=True)
@click.option("--json", "as_json", is_flag=True,
              help="Emit a JSON result summary on stdout.")
def process_cmd(recording, out_dir, mode, levels, as_json):
    """Replay a recording through the pipeline and export PNG images."""

    def run():
        rec = formats.Recording.load(recording)
        calib_set = load_calibration(
            Path(recording) / rec.manifest["calibration"])
        library = oxy.build_synthetic_library(
            levels, grid=calib_set.profile.band_grid)
        cfg_doc = dict(rec.manifest["config_events"][0]["config"])
        cfg_doc["overlay_mode"] = mode
        from .reflect import RegionOfInterest
        if isinstance(cfg_doc.get("roi"), dict):
            cfg_doc["roi"] = RegionOfInterest(**cfg_doc["roi"])
        config = PipelineConfig(**cfg_doc)
        pipeline = Pipeline(calib_set, library, config)
        roi_events = {e["frame_id"]: RegionOfInterest(**e["roi"])
                      for e in rec.roi_events}
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        summaries = []
        from .service import _frame_raster
        for frame in rec.frames():
            if frame.frame_id in roi_events:
                pipeline.request_roi(roi_events[frame.frame_id])
            pf = pipeline.process_frame(frame)
            entry = {"frame_id": pf.frame_id, "failed": pf.failed,
                     "warnings": pf.warnings, "error": pf.error}
            if not pf.failed:
                raster = _frame_raster(pf, mode)
                formats.export_png(raster, out / f"{pf.frame_id:08d}.png")
                entry["mean_so2"] = (None if pf.mean_so2 != pf.mean_so2
                                     else round(pf.mean_so2, 6))
                entry["total_ms"] = round(pf.timings.total_ms, 3)
            summaries.append(entry)
        if as_json:
            click.echo(json.dumps({"frames": summaries}, indent=1))
        else:
            ok = sum(1 for s in summaries if not s["failed"])
            click.echo(f"processed {ok}/{len(summaries)} frames into {out}")

    _guard(run)


@main.command()
@profile_option
@click.option("--levels", type=int, default=36, show_default=True)
@click.option("--repetitions", type=int, default=11, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def bench(profile, levels, repetitions, as_json):
    """Measure per-stage processing times on a synthetic frame."""

    def run():
        report = benchmark(profile, levels, repetitions)
        click.echo(report.to_json() if as_json else report.to_text())

    _guard(run)


@main.command()
@profile_option
@click.option("--scenario", type=click.Choice(["wedge", "resection", "props"]),
              default="props", show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8764, show_default=True)
@click.option("--fps", type=float, default=None,
              help="Source frame pacing (default: unpaced).")
@click.option("--encoding", type=click.Choice(["png", "rgba8"]), default="png",
              show_default=True)
def serve(profile, scenario, host, port, fps, encoding):
    """Run the WebSocket streaming service."""
    from . import service as service_mod

    def run():
        enc = service_mod.ENC_PNG if encoding == "png" else service_mod.ENC_RGBA8
        runtime = service_mod.ServiceRuntime(profile, scenario,
                                             source_fps=fps, encoding=enc)
        click.echo(f"serving ws://{host}:{port}/stream", err=True)
        service_mod.serve(runtime, host=host, port=port)

    _guard(run)


@main.group()
def calib():
    """Calibration file utilities."""


@calib.command("gen")
@profile_option
@click.option("--distance", "distances", type=float, multiple=True,
              help="Calibrated working distance in cm (repeatable).")
@click.option("--out", "out_path", type=click.Path(), required=True)
def calib_gen(profile, distances, out_path):
    """Synthesize a calibration file for a camera profile."""

    def run():
        dists = list(distances) or [DEFAULT_WORKING_DISTANCE_CM]
        calib_set = synthesize_default_calibration(get_profile(profile), dists)
        save_calibration(calib_set, out_path)
        click.echo(f"wrote calibration for {profile} at {dists} cm to {out_path}")

    _guard(run)


@calib.command("show")
@click.argument("path", type=click.Path(exists=True))
def calib_show(path):
    """Summarize a calibration file."""

    def run():
        c = load_calibration(path)
        p = c.profile
        click.echo(json.dumps({
            "profile": p.name,
            "sensor": [p.sensor_width, p.sensor_height],
            "lenses": int(c.layout.regions.shape[0]),
            "bands": p.band_grid.count,
            "band_range_nm": [p.band_grid.wavelengths_nm[0],
                              p.band_grid.wavelengths_nm[-1]],
            "distances_cm": c.homographies.distances_cm.tolist(),
        }, indent=1))

    _guard(run)


@main.group()
def library():
    """Reference spectra library utilities."""


@library.command("gen")
@profile_option
@click.option("--levels", type=int, default=36, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def library_gen(profile, levels, out_path):
    """Generate the synthetic oxygenation reference library."""

    def run():
        grid = get_profile(profile).band_grid
        lib = oxy.build_synthetic_library(levels, grid=grid)
        oxy.save_library(lib, out_path)
        click.echo(f"wrote {levels}-level library on {grid.count} bands to {out_path}")

    _guard(run)


if __name__ == "__main__":
    main()
