"""Protocol units: tile tasks, result envelopes, worker state, tile bundles."""

from __future__ import annotations

import base64
import enum
import hashlib
import struct
from dataclasses import dataclass, field
from typing import Optional

from ..errors import BadMagic, TruncatedFile
from ..imagery import (
    Region,
    Tile,
    attach_masks,
    masks_from_bytes,
    masks_to_bytes,
    stack_from_bytes,
    stack_to_bytes,
)

BUNDLE_MAGIC = b"PXT1"
_BUNDLE_HEADER = struct.Struct(">4sIIIIIIIB")
_PART = struct.Struct(">II")

COUNTER_KEYS = ("curves_built", "peak_curves", "peaks_found", "fits_attempted", "events_accepted")


def make_task_id(run_id: str, tile_row: int, tile_col: int) -> int:
    """Stable 63-bit identifier (fits signed and unsigned 64-bit fields)."""
    digest = hashlib.sha256(f"{run_id}/{tile_row}/{tile_col}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass
class TileTask:
    task_id: int
    run_id: str
    tile_row: int
    tile_col: int
    config_digest: str
    payload_mode: str = "inline"
    data: Optional[bytes] = field(default=None, repr=False)
    path: Optional[str] = None
    retries_left: int = 3

    def to_payload(self) -> dict:
        msg = {
            "task_id": self.task_id,
            "run_id": self.run_id,
            "tile_row": self.tile_row,
            "tile_col": self.tile_col,
            "config_digest": self.config_digest,
            "payload_mode": self.payload_mode,
        }
        if self.payload_mode == "inline":
            msg["data_b64"] = base64.b64encode(self.data).decode("ascii")
        else:
            msg["path"] = self.path
        return msg

    @classmethod
    def from_payload(cls, msg: dict) -> "TileTask":
        data = base64.b64decode(msg["data_b64"]) if msg["payload_mode"] == "inline" else None
        return cls(
            int(msg["task_id"]), msg["run_id"], int(msg["tile_row"]), int(msg["tile_col"]),
            msg["config_digest"], msg["payload_mode"], data, msg.get("path"),
        )

    def load_bundle(self) -> bytes:
        if self.payload_mode == "inline":
            return self.data
        with open(self.path, "rb") as fh:
            return fh.read()


@dataclass
class ResultEnvelope:
    task_id: int
    worker_id: str
    candidates: list
    stats: dict
    elapsed: float = 0.0

    def to_payload(self) -> dict:
        stats = dict(self.stats)
        stats["elapsed"] = self.elapsed
        return {
            "task_id": self.task_id,
            "worker_id": self.worker_id,
            "stats": stats,
            "candidates": self.candidates,
        }

    @classmethod
    def from_payload(cls, msg: dict) -> "ResultEnvelope":
        stats = dict(msg["stats"])
        elapsed = float(stats.pop("elapsed", 0.0))
        return cls(int(msg["task_id"]), str(msg["worker_id"]), list(msg["candidates"]), stats, elapsed)


def stats_consistent(stats: dict) -> bool:
    """Counters are non-negative and funnel: accepted <= fits <= peak curves <= curves."""
    try:
        vals = [stats[k] for k in COUNTER_KEYS]
    except KeyError:
        return False
    if any(not isinstance(v, int) or isinstance(v, bool) or v < 0 for v in vals):
        return False
    curves, peak_curves, _, fits, accepted = vals
    return accepted <= fits <= peak_curves <= curves


class WorkerStatus(str, enum.Enum):
    IDLE = "Idle"
    BUSY = "Busy"
    SUSPECT = "Suspect"
    DEAD = "Dead"


@dataclass
class WorkerState:
    worker_id: str
    last_heartbeat: float
    current_task: Optional[int] = None
    status: WorkerStatus = WorkerStatus.IDLE
    history: set = field(default_factory=set)
    waiting: bool = False


# ---------------------------------------------------------------------------
# Tile bundles: the TASK payload bytes


def encode_bundle(tiles: dict) -> bytes:
    """Serialise ``{band: Tile}`` (all tiles of one grid cell) to bytes.

    Layout: "PXT1", u32 tile_row, tile_col, core x0, y0, width, height, halo,
    u8 band count, then per band u32 stack length, u32 mask length, PXL1
    stack bytes, PXM1 mask bytes.
    """
    first = next(iter(tiles.values()))
    reg = first.core_region
    parts = [
        _BUNDLE_HEADER.pack(
            BUNDLE_MAGIC, first.tile_row, first.tile_col, reg.x0, reg.y0, reg.width, reg.height,
            first.halo, len(tiles),
        )
    ]
    for tile in tiles.values():
        s = stack_to_bytes(tile.stack)
        m = masks_to_bytes(tile.stack)
        parts += [_PART.pack(len(s), len(m)), s, m]
    return b"".join(parts)


def decode_bundle(buf: bytes) -> dict:
    if buf[:4] != BUNDLE_MAGIC:
        raise BadMagic(f"expected tile bundle magic {BUNDLE_MAGIC!r}")
    if len(buf) < _BUNDLE_HEADER.size:
        raise TruncatedFile("tile bundle header truncated")
    _, row, col, x0, y0, w, h, halo, n = _BUNDLE_HEADER.unpack_from(buf)
    off = _BUNDLE_HEADER.size
    tiles = {}
    for _ in range(n):
        if len(buf) < off + _PART.size:
            raise TruncatedFile("tile bundle part header truncated")
        ls, lm = _PART.unpack_from(buf, off)
        off += _PART.size
        if len(buf) < off + ls + lm:
            raise TruncatedFile("tile bundle part truncated")
        stack = stack_from_bytes(buf[off : off + ls])
        valid, _ = masks_from_bytes(buf[off + ls : off + ls + lm])
        off += ls + lm
        stack = attach_masks(stack, valid)
        tiles[stack.band.value] = Tile(row, col, Region(x0, y0, w, h), halo, stack)
    return tiles
