"""Frame/stack data model, the PXL1/PXM1 file formats, and halo tiling.

Stack file layout (all integers big-endian)::

    "PXL1" | u32 width | u32 height | u32 epoch_count | u8 band | 3 x u8 reserved
    per epoch: f64 epoch_time | f64 exposure | width*height f32 flux, row-major

The PXM1 mask sidecar uses the same 20-byte header with magic "PXM1", followed
per epoch by the validity bit plane packed MSB-first, row-major, padded to a
whole byte.
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Union

import numpy as np

from .errors import (
    BadMagic,
    DimensionOverflow,
    GeometryMismatch,
    MissingTile,
    NonDivisibleGeometry,
    TruncatedFile,
)

STACK_MAGIC = b"PXL1"
MASK_MAGIC = b"PXM1"
_HEADER = struct.Struct(">4sIIIB3x")
_EPOCH_HEADER = struct.Struct(">dd")
MAX_PIXELS = 2**31


class Band(str, enum.Enum):
    R = "R"
    B = "B"

    @property
    def code(self) -> int:
        return 0 if self is Band.R else 1

    @classmethod
    def from_code(cls, code: int) -> "Band":
        if code == 0:
            return cls.R
        if code == 1:
            return cls.B
        raise BadMagic(f"unknown band code {code}")


@dataclass(frozen=True, eq=False)
class Frame:
    """One exposure. ``valid`` is None until calibration attaches a mask."""

    data: np.ndarray
    epoch_index: int = 0
    epoch_time: float = 0.0
    band: Band = Band.R
    exposure: float = 1.0
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"frame data must be a non-empty 2D grid, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "band", Band(self.band))
        if self.valid is not None:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != data.shape:
                raise GeometryMismatch("validity mask shape differs from frame")
            object.__setattr__(self, "valid", valid)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def validity(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(self.data.shape, dtype=bool)
        return self.valid

    def with_data(self, data, valid=None) -> "Frame":
        return replace(self, data=data, valid=valid)

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.epoch_index == other.epoch_index
            and self.epoch_time == other.epoch_time
            and self.band == other.band
            and self.exposure == other.exposure
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.validity(), other.validity())
        )


@dataclass(frozen=True, eq=False)
class FrameStack:
    frames: tuple

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("a frame stack needs at least one frame")
        shape, band = frames[0].shape, frames[0].band
        for f in frames[1:]:
            if f.shape != shape:
                raise GeometryMismatch("frames in a stack must share geometry")
            if f.band != band:
                raise GeometryMismatch("frames in a stack must share band")
        times = [f.epoch_time for f in frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("epoch times must be strictly increasing")
        object.__setattr__(self, "frames", frames)

    @classmethod
    def from_cube(cls, cube, times, band=Band.R, exposures=1.0, valid=None) -> "FrameStack":
        cube = np.asarray(cube, dtype=np.float32)
        n = cube.shape[0]
        exposures = np.broadcast_to(np.asarray(exposures, dtype=float), (n,))
        frames = []
        for i in range(n):
            v = None if valid is None else valid[i]
            frames.append(Frame(cube[i], i, float(times[i]), band, float(exposures[i]), v))
        return cls(tuple(frames))

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def band(self) -> Band:
        return self.frames[0].band

    @property
    def times(self) -> np.ndarray:
        return np.array([f.epoch_time for f in self.frames])

    @property
    def exposures(self) -> np.ndarray:
        return np.array([f.exposure for f in self.frames])

    def cube(self) -> np.ndarray:
        return np.stack([f.data for f in self.frames])

    def valid_cube(self) -> np.ndarray:
        return np.stack([f.validity() for f in self.frames])

    @property
    def has_masks(self) -> bool:
        return any(f.valid is not None for f in self.frames)

    def __eq__(self, other):
        if not isinstance(other, FrameStack):
            return NotImplemented
        return len(self) == len(other) and all(a == b for a, b in zip(self, other))


# ---------------------------------------------------------------------------
# Tiling


@dataclass(frozen=True)
class TilingConfig:
    grid_rows: int = 1
    grid_cols: int = 1
    halo: int = 8

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ValueError("grid dimensions must be >= 1")
        if self.halo < 0:
            raise ValueError("halo must be >= 0")

    def core_shape(self, width: int, height: int) -> tuple[int, int]:
        """Return (core_height, core_width) after checking divisibility."""
        if width % self.grid_cols or height % self.grid_rows:
            raise NonDivisibleGeometry(
                f"{width}x{height} frame is not divisible by a "
                f"{self.grid_rows}x{self.grid_cols} grid"
            )
        ch, cw = height // self.grid_rows, width // self.grid_cols
        if self.halo >= min(ch, cw):
            raise ValueError(f"halo {self.halo} must be smaller than the tile edge {min(ch, cw)}")
        return ch, cw

    @property
    def n_tiles(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass(frozen=True)
class Region:
    x0: int
    y0: int
    width: int
    height: int

    def contains(self, x, y) -> bool:
        return self.x0 <= x < self.x0 + self.width and self.y0 <= y < self.y0 + self.height


@dataclass(frozen=True, eq=False)
class Tile:
    """A tile stack; ``stack`` covers the core plus ``halo`` pixels on every side."""

    tile_row: int
    tile_col: int
    core_region: Region
    halo: int
    stack: FrameStack = field(repr=False)

    def core_slice(self):
        h = self.halo
        return (slice(h, h + self.core_region.height), slice(h, h + self.core_region.width))


def split_stack(stack: FrameStack, cfg: TilingConfig) -> list[list[Tile]]:
    """Cut a stack into a grid of halo-padded tiles (rows of columns).

    Halo pixels beyond the image border replicate the nearest edge pixel.
    """
    ch, cw = cfg.core_shape(stack.width, stack.height)
    h = cfg.halo
    pad = ((0, 0), (h, h), (h, h))
    cube = np.pad(stack.cube(), pad, mode="edge")
    valid = np.pad(stack.valid_cube(), pad, mode="edge") if stack.has_masks else None

    grid = []
    for r in range(cfg.grid_rows):
        row = []
        for c in range(cfg.grid_cols):
            ys = slice(r * ch, r * ch + ch + 2 * h)
            xs = slice(c * cw, c * cw + cw + 2 * h)
            frames = tuple(
                Frame(
                    cube[i, ys, xs].copy(),
                    f.epoch_index,
                    f.epoch_time,
                    f.band,
                    f.exposure,
                    None if valid is None else valid[i, ys, xs].copy(),
                )
                for i, f in enumerate(stack.frames)
            )
            row.append(Tile(r, c, Region(c * cw, r * ch, cw, ch), h, FrameStack(frames)))
        grid.append(row)
    return grid


def _grid_get(tiles, r, c):
    if isinstance(tiles, Mapping):
        item = tiles.get((r, c))
    else:
        try:
            item = tiles[r][c]
        except (IndexError, KeyError):
            item = None
    if item is None:
        raise MissingTile(r, c)
    return item


def _strip_halo(arr: np.ndarray, cfg: TilingConfig, core: tuple[int, int] | None) -> np.ndarray:
    h = cfg.halo
    ch = arr.shape[-2] - 2 * h
    cw = arr.shape[-1] - 2 * h
    if ch < 1 or cw < 1 or (core is not None and (ch, cw) != core):
        raise GeometryMismatch(f"tile of shape {arr.shape[-2:]} inconsistent with halo {h}")
    return arr[..., h : h + ch, h : h + cw]


def reassemble_array(tiles, cfg: TilingConfig) -> np.ndarray:
    """Drop halos and stitch a grid of tile arrays (``(..., H, W)``) back together."""
    rows = []
    core = None
    for r in range(cfg.grid_rows):
        row = []
        for c in range(cfg.grid_cols):
            item = _grid_get(tiles, r, c)
            arr = np.asarray(item.stack.cube() if isinstance(item, Tile) else item)
            core_arr = _strip_halo(arr, cfg, core)
            if core is None:
                core = core_arr.shape[-2:]
            row.append(core_arr)
        rows.append(row)
    try:
        return np.concatenate([np.concatenate(row, axis=-1) for row in rows], axis=-2)
    except ValueError as exc:
        raise GeometryMismatch(str(exc)) from exc


def reassemble(tiles, cfg: TilingConfig, template: Frame | None = None) -> Frame:
    """Rebuild a single frame from a grid of processed 2D tile data."""
    data = reassemble_array(tiles, cfg)
    if data.ndim == 3:
        if data.shape[0] != 1:
            raise GeometryMismatch("reassemble expects single-frame tiles; use reassemble_stack")
        data = data[0]
    if template is None:
        return Frame(data)
    return replace(template, data=data, valid=None)


def reassemble_stack(tiles, cfg: TilingConfig) -> FrameStack:
    """Inverse of :func:`split_stack`, masks included."""
    first = _grid_get(tiles, 0, 0)
    cube = reassemble_array(tiles, cfg)
    valid = None
    if first.stack.has_masks:
        vgrid = {
            (r, c): _grid_get(tiles, r, c).stack.valid_cube()
            for r in range(cfg.grid_rows)
            for c in range(cfg.grid_cols)
        }
        valid = reassemble_array(vgrid, cfg)
    frames = tuple(
        Frame(cube[i], f.epoch_index, f.epoch_time, f.band, f.exposure,
              None if valid is None else valid[i])
        for i, f in enumerate(first.stack.frames)
    )
    return FrameStack(frames)


# ---------------------------------------------------------------------------
# Files

PathLike = Union[str, os.PathLike]


def _pack_header(magic, width, height, n, band) -> bytes:
    return _HEADER.pack(magic, width, height, n, Band(band).code)


def _unpack_header(buf: bytes, magic: bytes):
    if len(buf) < 4 or buf[:4] != magic:
        raise BadMagic(f"expected magic {magic!r}, found {bytes(buf[:4])!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFile("header shorter than 20 bytes")
    _, width, height, n, band = _HEADER.unpack_from(buf)
    if width == 0 or height == 0 or n == 0:
        raise DimensionOverflow(f"zero dimension in header ({width}x{height}x{n})")
    if width * height > MAX_PIXELS:
        raise DimensionOverflow(f"{width}x{height} exceeds {MAX_PIXELS} pixels")
    return width, height, n, Band.from_code(band)


def stack_to_bytes(stack: FrameStack) -> bytes:
    parts = [_pack_header(STACK_MAGIC, stack.width, stack.height, len(stack), stack.band)]
    for f in stack.frames:
        parts.append(_EPOCH_HEADER.pack(f.epoch_time, f.exposure))
        parts.append(f.data.astype(">f4").tobytes())
    return b"".join(parts)


def stack_from_bytes(buf: bytes) -> FrameStack:
    width, height, n, band = _unpack_header(buf, STACK_MAGIC)
    plane = width * height * 4
    step = _EPOCH_HEADER.size + plane
    need = _HEADER.size + n * step
    if len(buf) < need:
        raise TruncatedFile(f"header declares {n} epochs ({need} bytes) but file has {len(buf)} bytes")
    if len(buf) > need:
        raise GeometryMismatch(f"{len(buf) - need} trailing bytes after declared payload")
    frames = []
    off = _HEADER.size
    for i in range(n):
        t, exposure = _EPOCH_HEADER.unpack_from(buf, off)
        off += _EPOCH_HEADER.size
        data = np.frombuffer(buf, dtype=">f4", count=width * height, offset=off)
        off += plane
        frames.append(Frame(data.astype(np.float32).reshape(height, width), i, t, band, exposure))
    return FrameStack(tuple(frames))


def masks_to_bytes(stack: FrameStack) -> bytes:
    parts = [_pack_header(MASK_MAGIC, stack.width, stack.height, len(stack), stack.band)]
    for f in stack.frames:
        parts.append(np.packbits(f.validity().ravel(), bitorder="big").tobytes())
    return b"".join(parts)


def masks_from_bytes(buf: bytes) -> tuple[np.ndarray, Band]:
    """Return the (epochs, height, width) boolean validity cube and band."""
    width, height, n, band = _unpack_header(buf, MASK_MAGIC)
    plane = (width * height + 7) // 8
    need = _HEADER.size + n * plane
    if len(buf) < need:
        raise TruncatedFile(f"mask header declares {n} epochs but payload is short")
    if len(buf) > need:
        raise GeometryMismatch("trailing bytes after mask payload")
    bits = np.frombuffer(buf, dtype=np.uint8, offset=_HEADER.size, count=n * plane).reshape(n, plane)
    valid = np.unpackbits(bits, axis=1, count=width * height, bitorder="big").astype(bool)
    return valid.reshape(n, height, width), band


def attach_masks(stack: FrameStack, valid: np.ndarray) -> FrameStack:
    if valid.shape != (len(stack), stack.height, stack.width):
        raise GeometryMismatch("mask cube does not match stack geometry")
    return FrameStack(tuple(replace(f, valid=valid[i]) for i, f in enumerate(stack.frames)))


def write_stack(stack: FrameStack, path: PathLike, masks: bool = False) -> int:
    """Write a PXL1 file (plus a ``.pxm`` sidecar when ``masks``); return bytes written."""
    payload = stack_to_bytes(stack)
    with open(path, "wb") as fh:
        fh.write(payload)
    if masks:
        with open(mask_path_for(path), "wb") as fh:
            fh.write(masks_to_bytes(stack))
    return len(payload)


def read_stack(path: PathLike, masks: bool | None = None) -> FrameStack:
    """Read a PXL1 file; a PXM1 sidecar next to it is attached when present."""
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        stack = stack_from_bytes(buf)
    except (BadMagic, TruncatedFile, DimensionOverflow, GeometryMismatch) as exc:
        raise type(exc)(f"{os.fspath(path)}: {exc}") from exc
    sidecar = mask_path_for(path)
    if masks or (masks is None and os.path.exists(sidecar)):
        with open(sidecar, "rb") as fh:
            valid, _ = masks_from_bytes(fh.read())
        stack = attach_masks(stack, valid)
    return stack


def mask_path_for(path: PathLike) -> str:
    root, _ = os.path.splitext(os.fspath(path))
    return root + ".pxm"


def frame_as_stack(frame: Frame) -> FrameStack:
    return FrameStack((frame,))
