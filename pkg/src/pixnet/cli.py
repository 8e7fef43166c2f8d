"""Command-line entry points: synth, calibrate, run-local, serve, work, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import threading

from . import __version__
from .config import RunConfig, apply_overrides, load_config
from .errors import PixnetError

log = logging.getLogger("pixnet")


class UsageError(Exception):
    """Bad flags or configuration; exits with status 2."""


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", metavar="PATH", help="key-value config file")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.add_argument("--out", metavar="DIR", required=out_required, help="output directory")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. trigger1.n_sigma=4")


def _address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        host, port = "127.0.0.1", text
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pixnet", description="Distributed pixel-lensing trigger pipeline.")
    parser.add_argument("--version", action="version", version=f"pixnet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic observation campaign")
    _common(p, out_required=True)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--events", type=int)
    p.add_argument("--bands", help="comma-separated bands, e.g. R,B")

    p = sub.add_parser("calibrate", help="pre-reduce and align raw stacks")
    _common(p, out_required=True)
    p.add_argument("--in", dest="in_dir", required=True, metavar="DIR", help="fixture directory")

    p = sub.add_parser("run-local", help="run every stage in this process")
    _common(p, out_required=True)
    p.add_argument("--in", dest="in_dir", required=True, metavar="DIR", help="fixture directory")
    p.add_argument("--sink", action="append", default=[], help="alert sink: stdout, file:PATH or webhook:URL")

    p = sub.add_parser("serve", help="serve tile tasks to workers")
    _common(p, out_required=True)
    p.add_argument("--in", dest="in_dir", required=True, metavar="DIR", help="fixture directory")
    p.add_argument("--bind", type=_address, default=("127.0.0.1", 7341), metavar="HOST:PORT")
    p.add_argument("--sink", action="append", default=[], help="alert sink: stdout, file:PATH or webhook:URL")
    p.add_argument("--ready-file", metavar="PATH", help="write the bound HOST:PORT here once listening")

    p = sub.add_parser("work", help="process tasks from a server")
    _common(p)
    p.add_argument("--connect", type=_address, required=True, metavar="HOST:PORT")
    p.add_argument("--threads", type=int, default=1, help="concurrent worker connections")

    p = sub.add_parser("report", help="query a catalog or summary")
    _common(p)
    p.add_argument("catalog", help="catalog.jsonl or summary.pxs.z (or a run directory)")
    p.add_argument("--accepted", action="store_true", help="accepted events only")
    p.add_argument("--tile", help="ROW,COL")
    p.add_argument("--classification", choices=["single", "double", "multiple"])
    p.add_argument("--min-delta-chi2", type=float)
    p.add_argument("--stage-stats", action="store_true", help="per-stage funnel counters")
    return parser


def resolve_config(args) -> RunConfig:
    try:
        return _resolve_config(args)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    pairs = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = json.loads(value) if _is_json(value) else value
    if args.seed is not None:
        pairs["seed"] = args.seed
    for flag, key in (("width", "synth.width"), ("height", "synth.height"), ("epochs", "synth.epochs"),
                      ("events", "synth.n_events")):
        value = getattr(args, flag, None)
        if value is not None:
            pairs[key] = value
    if getattr(args, "bands", None):
        pairs["synth.bands"] = [b.strip() for b in args.bands.split(",")]
    if getattr(args, "sink", None):
        pairs["sinks"] = list(args.sink)
    return apply_overrides(cfg, pairs) if pairs else cfg


def _is_json(text: str) -> bool:
    try:
        json.loads(text)
        return True
    except ValueError:
        return False


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, sort_keys=True) if args.json else text)


def _fixture_config(args, in_dir) -> RunConfig:
    """Without ``--config``, use the configuration stored with the fixture."""
    if args.config is None:
        stored = os.path.join(in_dir, "config.txt")
        if os.path.exists(stored):
            args.config = stored
    return resolve_config(args)


def cmd_synth(args) -> int:
    from .pipeline import synthesize

    cfg = resolve_config(args)
    camp = synthesize(cfg, args.out)
    n_cr = len(camp.truth.cosmic_rays)
    _emit(args, {"out": args.out, "events": len(camp.truth.events), "cosmic_rays": n_cr, "bands": list(camp.stacks)},
          f"wrote {len(camp.stacks)} band(s), {len(camp.truth.events)} events, {n_cr} cosmic rays to {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    from .pipeline import calibrate_all, load_fixture, write_calibrated

    cfg = _fixture_config(args, args.in_dir)
    raw, cals, _ = load_fixture(cfg, args.in_dir)
    calibrated, solutions = calibrate_all(raw, cals, cfg)
    write_calibrated(calibrated, solutions, args.out)
    shifts = {b: [list(s) for s in sol.shifts] for b, sol in solutions.items()}
    _emit(args, {"out": args.out, "shifts": shifts},
          f"calibrated {sum(len(s) for s in calibrated.values())} frames into {args.out}")
    return 0


def _run_report(args, result) -> int:
    st = result.catalog.aggregate_stats()
    payload = {
        "out": result.out_dir,
        "curves_built": st["curves_built"],
        "peak_curves": st["peak_curves"],
        "events_accepted": st["events_accepted"],
        "candidates": len(result.catalog.candidates),
        "summary_bytes": result.summary_sizes["summary_bytes"],
        "raw_input_bytes": result.summary_sizes["raw_input_bytes"],
        "wall_time": result.wall_time,
    }
    _emit(args, payload,
          f"{st['curves_built']} curves, {st['peak_curves']} with peaks, {st['events_accepted']} accepted; "
          f"summary {payload['summary_bytes']} bytes ({result.out_dir})")
    return 0


def cmd_run_local(args) -> int:
    from .pipeline import run_local

    cfg = _fixture_config(args, args.in_dir)
    return _run_report(args, run_local(cfg, args.in_dir, args.out))


def cmd_serve(args) -> int:
    from .pipeline import run_distributed

    cfg = _fixture_config(args, args.in_dir)

    def ready(addr):
        log.info("listening on %s:%d", addr[0], addr[1])
        if args.ready_file:
            tmp = args.ready_file + ".tmp"
            with open(tmp, "w") as fh:
                fh.write(f"{addr[0]}:{addr[1]}\n")
            os.replace(tmp, args.ready_file)

    result = run_distributed(cfg, args.in_dir, args.out, bind=args.bind, on_ready=ready)
    return _run_report(args, result)


def cmd_work(args) -> int:
    from .netproto.worker import run_worker
    from .pipeline import process_task

    cfg = resolve_config(args)
    host, port = args.connect
    counts, errors = [], []

    def one():
        try:
            counts.append(run_worker(host, port, lambda task: process_task(task, cfg), cfg.digest,
                                     cfg.net.heartbeat_interval))
        except Exception as exc:  # reported below; each connection fails independently
            errors.append(exc)

    threads = [threading.Thread(target=one) for _ in range(max(1, args.threads))]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    _emit(args, {"tasks": sum(counts)}, f"processed {sum(counts)} task(s)")
    return 0


def _format_table(cands) -> str:
    lines = [f"{'x':>5} {'y':>5} {'t0':>8} {'tE':>7} {'u0':>6} {'dchi2':>9}  class     status"]
    for c in cands:
        p = c.fit.params if c.fit is not None else None
        t0, tE, u0 = (p.t0, p.tE, p.u0) if p else (float("nan"),) * 3
        status = "accepted" if c.accepted else "rejected:" + ",".join(c.decision.reasons)
        lines.append(f"{c.x:5d} {c.y:5d} {t0:8.2f} {tE:7.2f} {u0:6.3f} {c.delta_chi2:9.1f}  "
                     f"{c.classification.cls.value:<8}  {status}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    from .dispatch import query_catalog, read_catalog, read_summary

    path = args.catalog
    if os.path.isdir(path):
        path = os.path.join(path, "catalog.jsonl")
    predicate = {}
    if args.accepted:
        predicate["accepted"] = True
    if args.tile:
        predicate["tile"] = [int(v) for v in args.tile.split(",")]
    if args.classification:
        predicate["classification"] = args.classification
    if args.min_delta_chi2 is not None:
        predicate["min_delta_chi2"] = args.min_delta_chi2
    cands = query_catalog(path, predicate)

    if args.stage_stats:
        if path.endswith(".pxs.z"):
            stages = read_summary(path)[0]["stage_stats"]
        else:
            stages = read_catalog(path).stage_stats
        if args.json:
            print(json.dumps(stages))
        else:
            for name, rec in stages.items():
                rej = ", ".join(f"{k}={v}" for k, v in sorted(rec["rejects"].items())) or "-"
                print(f"{name:<6} in={rec['items_in']:<8} out={rec['items_out']:<8} "
                      f"wall={rec['wall_time']:.2f}s rejects: {rej}")
        return 0

    if args.json:
        for c in cands:
            print(json.dumps(c.to_record(), sort_keys=True))
    else:
        print(f"{len(cands)} candidates")
        if cands:
            print(_format_table(cands))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "calibrate": cmd_calibrate,
    "run-local": cmd_run_local,
    "serve": cmd_serve,
    "work": cmd_work,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"pixnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (PixnetError, OSError, ValueError) as exc:
        print(f"pixnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1

