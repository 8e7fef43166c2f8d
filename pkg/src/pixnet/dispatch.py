"""Run catalog, compressed science summary, status reports and alert sinks."""

from __future__ import annotations

import json
import logging
import os
import queue
import sys
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import BadPredicate, CoordinateOutOfTile, IoFailure, SinkUnreachable
from .imagery import TilingConfig
from .netproto.messages import COUNTER_KEYS, ResultEnvelope
from .trigger1 import LightCurve, Peak, PeakClass, PeakClassification
from .trigger2 import EventDecision, FitResult, LensModelParams

log = logging.getLogger(__name__)

STAGES = ("IDAQ", "CALIB", "TILE", "DAP", "DAU", "MINE")
SUMMARY_SUFFIX = ".pxs.z"


# ---------------------------------------------------------------------------
# Candidate records


def _curve_record(curve: LightCurve) -> dict:
    return {
        "band": curve.band.value,
        "pixel": list(curve.pixel),
        "t": curve.times.tolist(),
        "flux": curve.flux.tolist(),
        "err": curve.error.tolist(),
        "valid": [int(v) for v in curve.valid],
    }


def _curve_from_record(rec: dict) -> LightCurve:
    return LightCurve(tuple(rec["pixel"]), rec["band"], rec["t"], rec["flux"], rec["err"],
                      np.array(rec["valid"], dtype=bool))


def _fit_record(fit: FitResult) -> dict:
    p = fit.params
    return {
        "u0": p.u0, "t0": p.t0, "tE": p.tE, "f_source": p.f_source, "f_base": p.f_base,
        "chi2": fit.chi2, "dof": fit.dof, "iterations": fit.iterations, "converged": fit.converged,
        "delta_chi2": fit.delta_chi2_vs_constant, "chi2_init": fit.chi2_init,
        "covariance": None if fit.covariance is None else fit.covariance.tolist(),
    }


def _fit_from_record(rec: dict) -> FitResult:
    cov = rec["covariance"]
    return FitResult(
        LensModelParams(rec["u0"], rec["t0"], rec["tE"], rec["f_source"], rec["f_base"]),
        rec["chi2"], rec["dof"], None if cov is None else np.array(cov), rec["iterations"],
        rec["converged"], rec["delta_chi2"], rec["chi2_init"],
    )


@dataclass(eq=False)
class Candidate:
    """One peak-bearing pixel and everything both trigger levels concluded about it.

    ``x, y`` are core-relative tile coordinates until :meth:`RunCatalog.ingest`
    translates them to the parent frame and fills the tile provenance.
    """

    x: int
    y: int
    bands: tuple
    classification: PeakClassification
    peaks: list
    fit: Optional[FitResult]
    decision: EventDecision
    color: Optional[dict] = None
    near_threshold: bool = False
    curve: Optional[LightCurve] = None
    tile_row: Optional[int] = None
    tile_col: Optional[int] = None
    task_id: Optional[int] = None

    @property
    def accepted(self) -> bool:
        return self.decision.accepted

    @property
    def significance(self) -> float:
        return max(p.significance for p in self.peaks)

    @property
    def delta_chi2(self) -> float:
        return self.fit.delta_chi2_vs_constant if self.fit is not None else float("-inf")

    def to_record(self) -> dict:
        return {
            "x": self.x,
            "y": self.y,
            "bands": list(self.bands),
            "classification": {"class": self.classification.cls.value,
                               "planetary_flag": self.classification.planetary_flag},
            "peaks": [[p.start_index, p.end_index, p.apex_index, p.significance] for p in self.peaks],
            "fit": None if self.fit is None else _fit_record(self.fit),
            "color": self.color,
            "decision": {"accepted": self.decision.accepted, "reasons": list(self.decision.reasons)},
            "near_threshold": self.near_threshold,
            "curve": None if self.curve is None else _curve_record(self.curve),
            "tile": None if self.tile_row is None else [self.tile_row, self.tile_col],
            "task_id": self.task_id,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Candidate":
        cl = rec["classification"]
        tile = rec.get("tile")
        return cls(
            x=int(rec["x"]),
            y=int(rec["y"]),
            bands=tuple(rec["bands"]),
            classification=PeakClassification(PeakClass(cl["class"]), bool(cl["planetary_flag"])),
            peaks=[Peak(int(a), int(b), int(c), float(s)) for a, b, c, s in rec["peaks"]],
            fit=None if rec["fit"] is None else _fit_from_record(rec["fit"]),
            decision=EventDecision(bool(rec["decision"]["accepted"]), tuple(rec["decision"]["reasons"])),
            color=rec.get("color"),
            near_threshold=bool(rec.get("near_threshold", False)),
            curve=None if rec.get("curve") is None else _curve_from_record(rec["curve"]),
            tile_row=None if tile is None else int(tile[0]),
            tile_col=None if tile is None else int(tile[1]),
            task_id=rec.get("task_id"),
        )

    def sort_key(self):
        return (self.tile_row or 0, self.tile_col or 0, self.y, self.x)


# ---------------------------------------------------------------------------
# Stats


def empty_stats() -> dict:
    stats = {k: 0 for k in COUNTER_KEYS}
    stats.update(fits_converged=0, near_threshold=0, object_pixels=0, excluded_pixels=0,
                 invalid_samples=0, halo_dropped=0, rejects={}, dap_seconds=0.0, dau_seconds=0.0)
    return stats


def merge_stats(total: dict, part: dict) -> dict:
    for key, value in part.items():
        if key == "rejects":
            rej = total.setdefault("rejects", {})
            for reason, n in value.items():
                rej[reason] = rej.get(reason, 0) + n
        elif isinstance(value, (int, float)) and not isinstance(value, bool):
            total[key] = total.get(key, 0) + value
    return total


# ---------------------------------------------------------------------------
# Catalog


@dataclass
class RunCatalog:
    run_id: str
    geometry: tuple  # (width, height)
    tiling: TilingConfig
    config: dict = field(default_factory=dict)
    config_digest: str = ""
    candidates: list = field(default_factory=list)
    tile_stats: dict = field(default_factory=dict)
    stage_stats: dict = field(default_factory=dict)
    alerts: list = field(default_factory=list)
    sizes: dict = field(default_factory=lambda: {"raw_input_bytes": 0, "summary_bytes": 0})
    tasks: dict = field(default_factory=dict)  # task_id -> (tile_row, tile_col)
    halo_dropped: int = 0

    def __post_init__(self):
        self._lock = threading.Lock()

    def register_task(self, task_id: int, tile_row: int, tile_col: int) -> None:
        self.tasks[task_id] = (tile_row, tile_col)

    @property
    def completed_tiles(self) -> set:
        return set(self.tile_stats)

    def ingest(self, envelope: ResultEnvelope, tiling: Optional[TilingConfig] = None) -> list:
        """Translate an envelope's candidates into parent coordinates and store them.

        Candidates in the halo belong to a neighbouring tile and are dropped.
        Returns the newly stored candidates; a task already ingested returns [].
        """
        tiling = tiling or self.tiling
        ch, cw = tiling.core_shape(*self.geometry)
        row, col = self.tasks[envelope.task_id]
        x0, y0 = col * cw, row * ch
        halo = tiling.halo
        with self._lock:
            if (row, col) in self.tile_stats:
                return []
            added = []
            dropped = 0
            for rec in envelope.candidates:
                cand = rec if isinstance(rec, Candidate) else Candidate.from_record(rec)
                lx, ly = cand.x, cand.y
                if not (-halo <= lx < cw + halo and -halo <= ly < ch + halo):
                    raise CoordinateOutOfTile(f"({lx}, {ly}) outside tile ({row}, {col}) with halo {halo}")
                if not (0 <= lx < cw and 0 <= ly < ch):
                    dropped += 1
                    continue
                cand.x, cand.y = x0 + lx, y0 + ly
                if cand.curve is not None:
                    cand.curve.pixel = (cand.x, cand.y)
                cand.tile_row, cand.tile_col, cand.task_id = row, col, envelope.task_id
                added.append(cand)
            stats = dict(envelope.stats)
            stats["halo_dropped"] = stats.get("halo_dropped", 0) + dropped
            stats["elapsed"] = envelope.elapsed
            self.tile_stats[(row, col)] = stats
            self.halo_dropped += dropped
            self.candidates.extend(added)
            return added

    def aggregate_stats(self) -> dict:
        total = empty_stats()
        for key in sorted(self.tile_stats):
            merge_stats(total, self.tile_stats[key])
        return total

    def record_stage(self, stage: str, items_in: int, items_out: int, rejects: Optional[dict] = None,
                     wall_time: float = 0.0, **extra) -> dict:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage}")
        rec = {"stage": stage, "items_in": int(items_in), "items_out": int(items_out),
               "rejects": dict(rejects or {}), "wall_time": float(wall_time)}
        rec.update(extra)
        self.stage_stats[stage] = rec
        return rec

    def sorted_candidates(self) -> list:
        return sorted(self.candidates, key=Candidate.sort_key)

    def header_record(self) -> dict:
        return {
            "record": "run",
            "run_id": self.run_id,
            "geometry": list(self.geometry),
            "tiling": [self.tiling.grid_rows, self.tiling.grid_cols, self.tiling.halo],
            "config_digest": self.config_digest,
            "config": self.config,
            "stage_stats": self.stage_stats,
            "totals": self.aggregate_stats(),
            "tile_stats": [[r, c, self.tile_stats[(r, c)]] for r, c in sorted(self.tile_stats)],
            "sizes": self.sizes,
            "halo_dropped": self.halo_dropped,
        }


def _catalog_from_header(rec: dict) -> RunCatalog:
    g, t = rec["geometry"], rec["tiling"]
    cat = RunCatalog(rec["run_id"], (g[0], g[1]), TilingConfig(*t), rec.get("config", {}), rec.get("config_digest", ""))
    cat.stage_stats = rec.get("stage_stats", {})
    cat.tile_stats = {(r, c): s for r, c, s in rec.get("tile_stats", [])}
    cat.sizes = rec.get("sizes", cat.sizes)
    cat.halo_dropped = rec.get("halo_dropped", 0)
    return cat


def write_catalog(catalog: RunCatalog, path) -> int:
    """Full JSON-lines catalog store: header, every candidate, every alert."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(catalog.header_record(), allow_nan=False) + "\n")
            for cand in catalog.sorted_candidates():
                rec = cand.to_record()
                rec["record"] = "candidate"
                fh.write(json.dumps(rec, allow_nan=False) + "\n")
            for alert in catalog.alerts:
                fh.write(json.dumps({"record": "alert", **alert}, allow_nan=False) + "\n")
        return os.path.getsize(path)
    except OSError as exc:
        raise IoFailure(f"cannot write catalog {path}: {exc}") from exc


def _iter_lines(path) -> Iterable[dict]:
    try:
        if os.fspath(path).endswith(SUMMARY_SUFFIX):
            with open(path, "rb") as fh:
                text = zlib.decompress(fh.read(), wbits=-15).decode("utf-8")
            lines = text.splitlines()
        else:
            with open(path, encoding="utf-8") as fh:
                lines = fh.read().splitlines()
    except (OSError, zlib.error) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    for line in lines:
        if line.strip():
            yield json.loads(line)


def read_catalog(path) -> RunCatalog:
    catalog = None
    for rec in _iter_lines(path):
        kind = rec.pop("record", None)
        if kind == "run":
            catalog = _catalog_from_header(rec)
        elif kind == "candidate":
            catalog.candidates.append(Candidate.from_record(rec))
        elif kind == "alert":
            catalog.alerts.append(rec)
    if catalog is None:
        raise IoFailure(f"{path}: no run header record")
    return catalog


# ---------------------------------------------------------------------------
# Summary


def summary_candidates(catalog: RunCatalog) -> list:
    return [c for c in catalog.sorted_candidates() if c.accepted or c.near_threshold]


def write_summary(catalog: RunCatalog, path) -> dict:
    """DEFLATE-compressed JSON-lines: a stats block then accepted and
    near-threshold candidates. No pixel data is included."""
    stats_block = {
        "record": "stats",
        "run_id": catalog.run_id,
        "config_digest": catalog.config_digest,
        "geometry": list(catalog.geometry),
        "tiling": [catalog.tiling.grid_rows, catalog.tiling.grid_cols, catalog.tiling.halo],
        "stage_stats": catalog.stage_stats,
        "totals": catalog.aggregate_stats(),
        "tile_stats": [[r, c, catalog.tile_stats[(r, c)]] for r, c in sorted(catalog.tile_stats)],
    }
    lines = [json.dumps(stats_block, allow_nan=False)]
    for cand in summary_candidates(catalog):
        rec = cand.to_record()
        rec["record"] = "candidate"
        lines.append(json.dumps(rec, allow_nan=False))
    text = ("\n".join(lines) + "\n").encode("utf-8")
    comp = zlib.compressobj(9, zlib.DEFLATED, -15)
    blob = comp.compress(text) + comp.flush()
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write summary {path}: {exc}") from exc
    catalog.sizes["summary_bytes"] = len(blob)
    return {"summary_bytes": len(blob), "uncompressed_bytes": len(text),
            "raw_input_bytes": catalog.sizes.get("raw_input_bytes", 0)}


def read_summary(path) -> tuple[dict, list]:
    """Return ``(stats_block, candidates)`` from a ``.pxs.z`` file."""
    stats, cands = None, []
    for rec in _iter_lines(path):
        kind = rec.pop("record", None)
        if kind == "stats":
            stats = rec
        elif kind == "candidate":
            cands.append(Candidate.from_record(rec))
    if stats is None:
        raise IoFailure(f"{path}: summary has no stats block")
    return stats, cands


# ---------------------------------------------------------------------------
# Query


_PREDICATE_KEYS = {"tile", "classification", "min_delta_chi2", "accepted"}


def _check_predicate(pred: dict) -> dict:
    unknown = set(pred) - _PREDICATE_KEYS
    if unknown:
        raise BadPredicate(f"unknown predicate keys {sorted(unknown)}")
    out = {}
    if pred.get("tile") is not None:
        tile = pred["tile"]
        try:
            r, c = (int(v) for v in tile)
        except (TypeError, ValueError):
            raise BadPredicate(f"tile must be a (row, col) pair, got {tile!r}") from None
        out["tile"] = (r, c)
    if pred.get("classification") is not None:
        try:
            out["classification"] = PeakClass(str(pred["classification"]).capitalize())
        except ValueError:
            raise BadPredicate(f"unknown classification {pred['classification']!r}") from None
    if pred.get("min_delta_chi2") is not None:
        try:
            out["min_delta_chi2"] = float(pred["min_delta_chi2"])
        except (TypeError, ValueError):
            raise BadPredicate("min_delta_chi2 must be a number") from None
    if pred.get("accepted") is not None:
        if not isinstance(pred["accepted"], bool):
            raise BadPredicate("accepted must be true or false")
        out["accepted"] = pred["accepted"]
    return out


def filter_candidates(cands: Iterable[Candidate], predicate: Optional[dict] = None) -> list:
    pred = _check_predicate(predicate or {})
    out = []
    for c in cands:
        if "tile" in pred and (c.tile_row, c.tile_col) != pred["tile"]:
            continue
        if "classification" in pred and c.classification.cls != pred["classification"]:
            continue
        if "min_delta_chi2" in pred and not c.delta_chi2 >= pred["min_delta_chi2"]:
            continue
        if "accepted" in pred and c.accepted != pred["accepted"]:
            continue
        out.append(c)
    return sorted(out, key=Candidate.sort_key)


def query_catalog(path, predicate: Optional[dict] = None, **kwargs) -> list:
    """Candidates from a catalog store (or summary) matching every predicate key.

    Keys: ``tile=(row, col)``, ``classification``, ``min_delta_chi2``,
    ``accepted``. Results are ordered by tile, then pixel row, then column.
    """
    pred = dict(predicate or {}, **kwargs)
    _check_predicate(pred)
    if not os.path.exists(path):
        raise IoFailure(f"catalog {path} does not exist")
    if os.fspath(path).endswith(SUMMARY_SUFFIX):
        _, cands = read_summary(path)
    else:
        cands = read_catalog(path).candidates
    return filter_candidates(cands, pred)


# ---------------------------------------------------------------------------
# Status reports


class RunLog:
    """Append-only JSON-lines run log; at most one status report per stage."""

    def __init__(self, path=None, stream=None):
        self.path = path
        self.stream = stream
        self.records = []
        self._reported = set()
        self._lock = threading.Lock()
        if path is not None:
            open(path, "w").close()

    def emit(self, record: dict) -> None:
        with self._lock:
            self.records.append(record)
            line = json.dumps(record, allow_nan=False)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
            if self.stream is not None:
                self.stream.write(line + "\n")

    def report_stage(self, catalog: RunCatalog, stage: str) -> dict:
        if stage in self._reported:
            raise ValueError(f"stage {stage} already reported")
        rec = status_report(catalog, stage)
        self._reported.add(stage)
        self.emit(rec)
        return rec


def status_report(catalog: RunCatalog, stage: str) -> dict:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage}")
    base = catalog.stage_stats.get(stage, {"stage": stage, "items_in": 0, "items_out": 0,
                                           "rejects": {}, "wall_time": 0.0})
    rec = {"type": "status", "run_id": catalog.run_id}
    rec.update(base)
    return rec


def trigger_stage_records(catalog: RunCatalog, dap_wall: Optional[float] = None, dau_wall: Optional[float] = None):
    """Derive the DAP and DAU stage records from the per-tile counters."""
    tot = catalog.aggregate_stats()
    rejects = tot.get("rejects", {})
    dap_rejects = {"object_pixels": tot["object_pixels"], "excluded_pixels": tot["excluded_pixels"]}
    dau_rejects = {k: v for k, v in rejects.items()}
    catalog.record_stage(
        "DAP", tot["curves_built"], tot["peak_curves"], dap_rejects,
        tot["dap_seconds"] if dap_wall is None else dap_wall, peaks_found=tot["peaks_found"],
    )
    catalog.record_stage(
        "DAU", tot["fits_attempted"], tot["events_accepted"], dau_rejects,
        tot["dau_seconds"] if dau_wall is None else dau_wall, near_threshold=tot["near_threshold"],
    )


# ---------------------------------------------------------------------------
# Alerts


@dataclass(frozen=True)
class AlertSink:
    kind: str  # stdout | file | webhook
    target: str = ""
    min_significance: float = 0.0
    accepted_only: bool = True

    def __post_init__(self):
        if self.kind not in ("stdout", "file", "webhook"):
            raise ValueError(f"unknown sink kind {self.kind!r}")
        if self.kind == "webhook":
            url = urllib.parse.urlparse(self.target)
            if url.scheme not in ("http", "https") or not url.netloc:
                raise ValueError(f"webhook target {self.target!r} is not an http(s) URL")
        if self.kind == "file":
            parent = os.path.dirname(os.path.abspath(self.target)) if self.target else ""
            if not self.target or not os.path.isdir(parent) or not os.access(parent, os.W_OK):
                raise ValueError(f"file sink target {self.target!r} is not writable")

    @classmethod
    def parse(cls, text: str, base_dir: str = ".") -> "AlertSink":
        """``stdout``, ``file:PATH`` or ``webhook:URL`` (optionally ``@minsig``)."""
        min_sig = 0.0
        if "@" in text and not text.startswith("webhook"):
            text, _, s = text.rpartition("@")
            min_sig = float(s)
        kind, _, target = text.partition(":")
        if kind == "file" and target and not os.path.isabs(target):
            target = os.path.join(base_dir, target)
        return cls(kind, target, min_sig)

    def matches(self, cand: Candidate) -> bool:
        if self.accepted_only and not cand.accepted:
            return False
        return cand.significance >= self.min_significance

    @property
    def name(self) -> str:
        return f"{self.kind}:{self.target}" if self.target else self.kind


def alert_payload(run_id: str, cand: Candidate) -> dict:
    p = cand.fit.params if cand.fit is not None else None
    return {
        "run_id": run_id,
        "pixel": [cand.x, cand.y],
        "t0": None if p is None else p.t0,
        "tE": None if p is None else p.tE,
        "u0": None if p is None else p.u0,
        "significance": cand.significance,
        "classification": cand.classification.cls.value,
    }


def post_json(url: str, payload: dict, timeout: float = 5.0) -> int:
    body = json.dumps(payload).encode("utf-8")
    req = urllib.request.Request(url, data=body, method="POST", headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.status


def deliver(sink: AlertSink, payload: dict, retries: int = 3, backoff: float = 0.5,
            out=None, sleep: Callable[[float], None] = time.sleep) -> dict:
    """Deliver one alert; webhooks get up to ``retries`` retries with doubling backoff."""
    record = {"type": "alert", "sink": sink.name, "pixel": payload["pixel"], "attempts": 0,
              "status": "failed", "error": None}
    if sink.kind == "stdout":
        (out or sys.stdout).write("ALERT " + json.dumps(payload) + "\n")
        record.update(attempts=1, status="delivered")
    elif sink.kind == "file":
        try:
            with open(sink.target, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(payload) + "\n")
            record.update(attempts=1, status="delivered")
        except OSError as exc:
            record.update(attempts=1, error=str(exc))
    else:
        delay = backoff
        for attempt in range(1, retries + 2):
            record["attempts"] = attempt
            try:
                status = post_json(sink.target, payload)
                if 200 <= status < 300:
                    record.update(status="delivered", error=None)
                    break
                record["error"] = f"HTTP {status}"
            except urllib.error.HTTPError as exc:
                record["error"] = f"HTTP {exc.code}"
            except (urllib.error.URLError, OSError) as exc:
                record["error"] = str(SinkUnreachable(f"{sink.target}: {exc}"))
            if attempt <= retries:
                sleep(delay)
                delay *= 2
    if record["status"] != "delivered":
        log.warning("alert to %s failed after %d attempts: %s", sink.name, record["attempts"], record["error"])
    return record


def fire_alerts(delta: Iterable[Candidate], sinks: Iterable[AlertSink], run_id: str = "run",
                runlog: Optional[RunLog] = None, **deliver_kw) -> list:
    """One delivery per (matching candidate, sink), in candidate order per sink."""
    records = []
    delta = list(delta)
    for sink in sinks:
        for cand in delta:
            if not sink.matches(cand):
                continue
            rec = deliver(sink, alert_payload(run_id, cand), **deliver_kw)
            records.append(rec)
            if runlog is not None:
                runlog.emit(rec)
    return records


class AlertDispatcher:
    """Background delivery so slow webhooks never stall ingestion."""

    def __init__(self, sinks, run_id, runlog=None, catalog: Optional[RunCatalog] = None, **deliver_kw):
        self.sinks = list(sinks)
        self.run_id = run_id
        self.runlog = runlog
        self.catalog = catalog
        self.deliver_kw = deliver_kw
        self._q: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._loop, name="alerts", daemon=True)
        self._thread.start()

    def submit(self, delta) -> None:
        if self.sinks:
            self._q.put(list(delta))

    def _loop(self):
        while True:
            delta = self._q.get()
            if delta is None:
                return
            recs = fire_alerts(delta, self.sinks, self.run_id, self.runlog, **self.deliver_kw)
            if self.catalog is not None:
                self.catalog.alerts.extend(recs)

    def close(self):
        if self._thread.is_alive():
            self._q.put(None)
            self._thread.join()
