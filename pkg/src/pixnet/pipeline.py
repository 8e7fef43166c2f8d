"""End-to-end run orchestration shared by the local and distributed modes.

Fixture directory layout (written by ``pixnet synth``)::

    raw_R.pxl   bias_R.pxl   dark_R.pxl   flat_R.pxl   (one set per band)
    truth.jsonl              injected events
    artifacts.json           cosmic rays, shifts and gains
    config.txt               the configuration the fixture was generated with
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .calib import CalibrationSet, calibrate_stack
from .config import RunConfig, dump_config
from .dispatch import (
    AlertDispatcher,
    AlertSink,
    Candidate,
    RunCatalog,
    RunLog,
    empty_stats,
    summary_candidates,
    trigger_stage_records,
    write_catalog,
    write_summary,
)
from .errors import InsufficientData, InsufficientOverlap, PixnetError
from .imagery import FrameStack, Tile, attach_masks, read_stack, reassemble_array, split_stack, write_stack
from .netproto.messages import ResultEnvelope, TileTask, decode_bundle, encode_bundle, make_task_id
from .synthgen import Campaign, generate_campaign, write_truth
from .trigger1 import (
    Trigger1Config,
    build_light_curves,
    classify_peaks,
    cosmic_saturation_filter,
    detect_peaks,
    screen_pixels,
    star_object_filter,
)
from .trigger2 import ColorResult, Trigger2Config, color_correlation, decide_event, initial_guess, lm_fit

CATALOG_NAME = "catalog.jsonl"
SUMMARY_NAME = "summary.pxs.z"
RUNLOG_NAME = "run_log.jsonl"


class StageError(PixnetError):
    """A module error annotated with the pipeline stage it came from."""

    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"{stage}: {type(exc).__name__}: {exc}")
        self.stage = stage
        self.cause = exc


# ---------------------------------------------------------------------------
# Fixtures


def write_fixture(campaign: Campaign, cfg: RunConfig, out_dir) -> dict:
    """Write raw stacks, calibration frames and truth; return file sizes."""
    os.makedirs(out_dir, exist_ok=True)
    sizes = {}
    for band, stack in campaign.stacks.items():
        sizes[f"raw_{band}.pxl"] = write_stack(stack, os.path.join(out_dir, f"raw_{band}.pxl"))
        cal = campaign.calibrations[band]
        for name in ("bias", "dark", "flat"):
            frame = getattr(cal, name)
            single = FrameStack((frame,))
            write_stack(single, os.path.join(out_dir, f"{name}_{band}.pxl"))
    write_truth(campaign.truth, os.path.join(out_dir, "truth.jsonl"))
    artifacts = {
        "cosmic_rays": [list(c) for c in campaign.truth.cosmic_rays],
        "frame_shifts": [list(s) for s in campaign.truth.frame_shifts],
        "photometric_gains": list(campaign.truth.photometric_gains),
        "extended_objects": [[o.x, o.y, o.flux, o.extent_sigma] for o in campaign.truth.extended_objects],
    }
    with open(os.path.join(out_dir, "artifacts.json"), "w", encoding="utf-8") as fh:
        json.dump(artifacts, fh)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    return sizes


def synthesize(cfg: RunConfig, out_dir) -> Campaign:
    campaign = generate_campaign(cfg.synth, cfg.seed)
    write_fixture(campaign, cfg, out_dir)
    return campaign


def load_fixture(cfg: RunConfig, in_dir) -> tuple[dict, dict, int]:
    """Read raw stacks and calibration frames for every configured band.

    Returns ``(raw stacks, calibration sets, raw input bytes)``.
    """
    raw, cals = {}, {}
    raw_bytes = 0
    for band in cfg.synth.bands:
        path = os.path.join(in_dir, f"raw_{band}.pxl")
        raw[band] = read_stack(path, masks=False)
        raw_bytes += os.path.getsize(path)
        frames = {name: read_stack(os.path.join(in_dir, f"{name}_{band}.pxl"), masks=False)[0]
                  for name in ("bias", "dark", "flat")}
        cals[band] = CalibrationSet(frames["bias"], frames["dark"], frames["flat"])
        if (raw[band].width, raw[band].height) != (cfg.synth.width, cfg.synth.height):
            raise ValueError(
                f"{path}: {raw[band].width}x{raw[band].height} does not match configured "
                f"{cfg.synth.width}x{cfg.synth.height}"
            )
    return raw, cals, raw_bytes


def calibrate_all(raw: dict, cals: dict, cfg: RunConfig) -> tuple[dict, dict]:
    calibrated, solutions = {}, {}
    for band, stack in raw.items():
        calibrated[band], solutions[band] = calibrate_stack(
            stack, cals[band], cfg.calib.reference_epoch, cfg.calib.max_shift, cfg.synth.saturation_level
        )
    return calibrated, solutions


def write_calibrated(calibrated: dict, solutions: dict, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for band, stack in calibrated.items():
        write_stack(stack, os.path.join(out_dir, f"calibrated_{band}.pxl"), masks=True)
    align = {band: {"shifts": [list(s) for s in sol.shifts], "scales": list(sol.scales),
                    "reference_epoch": sol.reference_epoch} for band, sol in solutions.items()}
    with open(os.path.join(out_dir, "alignment.json"), "w", encoding="utf-8") as fh:
        json.dump(align, fh, indent=1)


# ---------------------------------------------------------------------------
# Tile processing (the worker side)


@dataclass
class FirstTrigger:
    valid: np.ndarray  # (E, H, W) on the full tile
    excluded: np.ndarray  # cosmic/saturation exclusion (H, W)
    objects: np.ndarray  # static-object mask (H, W)
    screened: np.ndarray  # pixels that may carry a peak (H, W)


def first_trigger_masks(stack: FrameStack, t1: Trigger1Config) -> FirstTrigger:
    valid, excluded = cosmic_saturation_filter(stack, t1.saturation_level, t1.m_cr, t1.n_cr)
    _, objects = star_object_filter(attach_masks(stack, valid), t1.cutoff_sigma_px, t1.k_obj)
    screened = screen_pixels(stack.cube().astype(np.float64), valid, excluded | objects, t1.n_sigma, t1.min_run)
    return FirstTrigger(valid, excluded, objects, screened)


MASKED, NO_PEAK, PEAK = 0, 1, 2


def trigger_decisions(stack: FrameStack, t1: Trigger1Config, region=None) -> np.ndarray:
    """Per-pixel first-level outcome: MASKED (object or excluded), NO_PEAK or PEAK."""
    ft = first_trigger_masks(stack, t1)
    rows, cols = region if region is not None else (slice(None), slice(None))
    masked = (ft.excluded | ft.objects)[rows, cols]
    out = np.where(masked, MASKED, NO_PEAK).astype(np.int8)
    curves = build_light_curves(stack, ft.valid, ~ft.screened, t1.read_noise, region=region)
    for curve in curves:
        x, y = curve.pixel
        if detect_peaks(curve, t1.n_sigma, t1.min_run):
            out[y, x] = PEAK
    return out


def tiled_trigger_decisions(stack: FrameStack, tiling, t1: Trigger1Config) -> np.ndarray:
    grid = split_stack(stack, tiling)
    maps = {}
    for row in grid:
        for tile in row:
            core = trigger_decisions(tile.stack, t1, tile.core_slice())
            # pad back to the full tile shape; reassembly strips the halo again
            maps[(tile.tile_row, tile.tile_col)] = np.pad(core, tiling.halo)
    return reassemble_array(maps, tiling)


def _near_threshold(fit, color: Optional[ColorResult], reasons, t2: Trigger2Config, band: float) -> bool:
    if not reasons or not fit.converged:
        return False
    for reason in reasons:
        if reason == "chi2_cut":
            ok = fit.reduced_chi2 <= t2.max_reduced_chi2 * (1 + band)
        elif reason == "delta_chi2_cut":
            ok = fit.delta_chi2_vs_constant >= t2.min_delta_chi2 * (1 - band)
        elif reason == "achromaticity":
            ok = color is not None and color.correlation >= t2.color_threshold * (1 - band)
        else:
            ok = False
        if not ok:
            return False
    return True


def process_tile(tiles: dict, cfg: RunConfig) -> tuple[list, dict]:
    """Both trigger levels on one tile's core pixels.

    ``tiles`` maps band name to :class:`Tile`; the first configured band is
    the detection band. Candidate coordinates are relative to the tile core.
    """
    t1, t2 = cfg.trigger1, cfg.trigger2
    bands = [b for b in cfg.synth.bands if b in tiles]
    primary: Tile = tiles[bands[0]]
    stats = empty_stats()
    started = time.perf_counter()

    core = primary.core_slice()
    ft = first_trigger_masks(primary.stack, t1)
    skip = ft.excluded | ft.objects
    stats["curves_built"] = int((~skip[core]).sum())
    stats["object_pixels"] = int(ft.objects[core].sum())
    stats["excluded_pixels"] = int((ft.excluded & ~ft.objects)[core].sum())
    curves = build_light_curves(primary.stack, ft.valid, ~ft.screened, t1.read_noise, region=core)

    others = {}
    for band in bands[1:]:
        st = tiles[band].stack
        valid, _ = cosmic_saturation_filter(st, t1.saturation_level, t1.m_cr, t1.n_cr)
        others[band] = (st, valid)

    peaked = []
    for curve in curves:
        stats["invalid_samples"] += int((~curve.valid).sum())
        peaks = detect_peaks(curve, t1.n_sigma, t1.min_run)
        if peaks:
            peaked.append((curve, peaks))
    stats["peak_curves"] = len(peaked)
    stats["peaks_found"] = sum(len(p) for _, p in peaked)
    stats["dap_seconds"] = time.perf_counter() - started

    started = time.perf_counter()
    candidates = []
    for curve, peaks in peaked:
        cls = classify_peaks(peaks, t1.proximity_window)
        main = max(peaks, key=lambda p: (p.significance, -p.start_index))
        try:
            fit = lm_fit(curve, initial_guess(curve, main), t2.max_iterations)
        except InsufficientData:
            stats["rejects"]["insufficient_data"] = stats["rejects"].get("insufficient_data", 0) + 1
            continue
        stats["fits_attempted"] += 1
        stats["fits_converged"] += int(fit.converged)

        color = None
        color_rec = None
        if t2.use_color and others:
            band, (st, valid) = next(iter(others.items()))
            x, y = curve.pixel
            region = (slice(core[0].start + y, core[0].start + y + 1), slice(core[1].start + x, core[1].start + x + 1))
            other = build_light_curves(st, valid, None, t1.read_noise, region=region, origin=(x, y))[0]
            try:
                color = color_correlation(curve, other, t2.color_threshold)
            except InsufficientOverlap:
                color = ColorResult(0.0, False, 0)
            color_rec = {"band": band, "correlation": color.correlation, "passed": color.passed,
                         "n_common": color.n_common}

        decision = decide_event(fit, color, t2)
        near = _near_threshold(fit, color, decision.reasons, t2, cfg.dispatch.near_threshold_band)
        for reason in decision.reasons:
            stats["rejects"][reason] = stats["rejects"].get(reason, 0) + 1
        stats["events_accepted"] += int(decision.accepted)
        stats["near_threshold"] += int(near)
        candidates.append(Candidate(
            x=curve.pixel[0], y=curve.pixel[1], bands=tuple(bands), classification=cls, peaks=peaks,
            fit=fit, decision=decision, color=color_rec, near_threshold=near,
            curve=curve if (decision.accepted or near) else None,
        ))
    stats["dau_seconds"] = time.perf_counter() - started
    return candidates, stats


def process_task(task: TileTask, cfg: RunConfig) -> tuple[list, dict]:
    """Worker entry point: decode the task bundle and return wire records."""
    tiles = decode_bundle(task.load_bundle())
    cands, stats = process_tile(tiles, cfg)
    return [c.to_record() for c in cands], stats


# ---------------------------------------------------------------------------
# Run orchestration (the server side)


@dataclass
class RunResult:
    catalog: RunCatalog
    out_dir: str
    summary_sizes: dict
    wall_time: float
    serve_summary: Optional[object] = None
    paths: dict = field(default_factory=dict)

    @property
    def accepted(self) -> list:
        return [c for c in self.catalog.sorted_candidates() if c.accepted]


class Run:
    """Stages IDAQ, CALIB and TILE up front, then ingestion, then MINE."""

    def __init__(self, cfg: RunConfig, in_dir, out_dir, alert_backoff: float = 0.5,
                 alert_out=None, log_stream=None):
        self.cfg = cfg
        self.in_dir = in_dir
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.runlog = RunLog(os.path.join(out_dir, RUNLOG_NAME), log_stream)
        self.catalog = RunCatalog(cfg.run_id, (cfg.synth.width, cfg.synth.height), cfg.tiling,
                                  json.loads(json.dumps(cfg.to_dict())), cfg.digest)
        self.sinks = [AlertSink.parse(s, out_dir) for s in cfg.sinks]
        if cfg.dispatch.alert_min_significance:
            self.sinks = [AlertSink(s.kind, s.target, max(s.min_significance, cfg.dispatch.alert_min_significance))
                          for s in self.sinks]
        deliver_kw = {"backoff": alert_backoff}
        if alert_out is not None:
            deliver_kw["out"] = alert_out
        self.alerts = AlertDispatcher(self.sinks, cfg.run_id, self.runlog, self.catalog, **deliver_kw)
        self.grids: dict = {}
        self.solutions: dict = {}
        self.tasks: list = []
        self.started = time.perf_counter()
        self._tile_started = None

    def _stage(self, stage: str, fn: Callable):
        try:
            return fn()
        except PixnetError as exc:
            if isinstance(exc, StageError):
                raise
            raise StageError(stage, exc) from exc
        except (OSError, ValueError) as exc:
            raise StageError(stage, exc) from exc

    def prepare(self, payload_mode: str = "inline") -> list:
        cfg = self.cfg
        t = time.perf_counter()
        raw, cals, raw_bytes = self._stage("IDAQ", lambda: load_fixture(cfg, self.in_dir))
        self.catalog.sizes["raw_input_bytes"] = raw_bytes
        n_frames = sum(len(s) for s in raw.values())
        self.catalog.record_stage("IDAQ", len(raw), n_frames, {}, time.perf_counter() - t, raw_input_bytes=raw_bytes)
        self.runlog.report_stage(self.catalog, "IDAQ")

        t = time.perf_counter()
        calibrated, self.solutions = self._stage("CALIB", lambda: calibrate_all(raw, cals, cfg))
        n_cal = sum(len(s) for s in calibrated.values())
        self.catalog.record_stage("CALIB", n_frames, n_cal, {}, time.perf_counter() - t)
        self.runlog.report_stage(self.catalog, "CALIB")

        t = time.perf_counter()
        self.grids = self._stage("TILE", lambda: {b: split_stack(s, cfg.tiling) for b, s in calibrated.items()})
        spool = os.path.join(self.out_dir, "tiles") if payload_mode == "path" else None
        if spool:
            os.makedirs(spool, exist_ok=True)
        tasks = []
        for r in range(cfg.tiling.grid_rows):
            for c in range(cfg.tiling.grid_cols):
                tid = make_task_id(cfg.run_id, r, c)
                data = encode_bundle(self.bundle(r, c))
                path = None
                if spool:
                    path = os.path.join(spool, f"tile_{r:03d}_{c:03d}.pxt")
                    with open(path, "wb") as fh:
                        fh.write(data)
                    data = None
                tasks.append(TileTask(tid, cfg.run_id, r, c, cfg.digest, payload_mode, data, path,
                                      cfg.net.retry_budget))
                self.catalog.register_task(tid, r, c)
        self.tasks = tasks
        self.catalog.record_stage("TILE", len(calibrated), len(tasks), {}, time.perf_counter() - t)
        self.runlog.report_stage(self.catalog, "TILE")
        self._tile_started = time.perf_counter()
        return tasks

    def bundle(self, r: int, c: int) -> dict:
        return {band: grid[r][c] for band, grid in self.grids.items()}

    def ingest(self, envelope: ResultEnvelope) -> None:
        delta = self.catalog.ingest(envelope)
        accepted = [c for c in delta if c.accepted]
        if accepted:
            self.alerts.submit(accepted)

    def finish(self, serve_summary=None) -> RunResult:
        wall = time.perf_counter() - (self._tile_started or self.started)
        trigger_stage_records(self.catalog)
        self.runlog.report_stage(self.catalog, "DAP")
        self.runlog.report_stage(self.catalog, "DAU")
        self.alerts.close()

        t = time.perf_counter()
        ingested = sum(self.catalog.tile_stats[k].get("candidates", 0) for k in self.catalog.tile_stats)
        catalog_path = os.path.join(self.out_dir, CATALOG_NAME)
        summary_path = os.path.join(self.out_dir, SUMMARY_NAME)
        kept = len(summary_candidates(self.catalog))
        self.catalog.record_stage("MINE", ingested, kept, {"halo_dropped": self.catalog.halo_dropped,
                                                           "not_retained": len(self.catalog.candidates) - kept},
                                  0.0, catalog_candidates=len(self.catalog.candidates),
                                  tiles_wall_time=wall)
        sizes = self._stage("MINE", lambda: write_summary(self.catalog, summary_path))
        self.catalog.stage_stats["MINE"]["wall_time"] = time.perf_counter() - t
        self.catalog.stage_stats["MINE"]["summary_bytes"] = sizes["summary_bytes"]
        self._stage("MINE", lambda: write_catalog(self.catalog, catalog_path))
        self.runlog.report_stage(self.catalog, "MINE")
        paths = {"catalog": catalog_path, "summary": summary_path, "run_log": self.runlog.path}
        if serve_summary is not None:
            hist_path = os.path.join(self.out_dir, "assignments.json")
            with open(hist_path, "w", encoding="utf-8") as fh:
                json.dump({"completed": {str(k): v for k, v in serve_summary.completed.items()},
                           "history": serve_summary.history, "workers": serve_summary.workers}, fh, indent=1)
            paths["assignments"] = hist_path
        return RunResult(self.catalog, self.out_dir, sizes, time.perf_counter() - self.started, serve_summary, paths)

    def close(self):
        self.alerts.close()


def _envelope(task: TileTask, worker_id: str, cands: list, stats: dict, elapsed: float) -> ResultEnvelope:
    stats = dict(stats)
    stats["candidates"] = len(cands)
    return ResultEnvelope(task.task_id, worker_id, cands, stats, elapsed)


def run_local(cfg: RunConfig, in_dir, out_dir, **run_kw) -> RunResult:
    """Every stage in this process, tiles processed in row-major order."""
    run = Run(cfg, in_dir, out_dir, **run_kw)
    try:
        tasks = run.prepare("inline")
        for task in tasks:
            t = time.perf_counter()
            cands, stats = process_tile(run.bundle(task.tile_row, task.tile_col), cfg)
            records = [c.to_record() for c in cands]
            run.ingest(_envelope(task, "local", records, stats, time.perf_counter() - t))
        return run.finish()
    finally:
        run.close()


def run_distributed(cfg: RunConfig, in_dir, out_dir, bind=("127.0.0.1", 0),
                    on_ready: Optional[Callable[[tuple], None]] = None, timeout: Optional[float] = None,
                    **run_kw) -> RunResult:
    """Serve the run's tiles to remote workers and build the catalog from their results."""
    from .netproto.server import TaskQueue, TaskServer

    run = Run(cfg, in_dir, out_dir, **run_kw)
    try:
        tasks = run.prepare(cfg.net.payload_mode)
        queue = TaskQueue(tasks, cfg.net.heartbeat_interval, cfg.net.heartbeat_timeout, cfg.net.retry_budget)

        def on_result(env: ResultEnvelope):
            env.stats["candidates"] = len(env.candidates)
            run.ingest(env)

        server = TaskServer(queue, on_result, bind, cfg.net.worker_deadline)
        with server:
            if on_ready is not None:
                on_ready(server.address)
            summary = server.wait(timeout)
        return run.finish(summary)
    finally:
        run.close()


def stage_order(runlog_path) -> list:
    with open(runlog_path, encoding="utf-8") as fh:
        return [json.loads(line)["stage"] for line in fh if '"type": "status"' in line]

