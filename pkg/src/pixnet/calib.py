"""Pre-reduction (bias, dark, flat) and integer/photometric frame alignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    AlignmentAmbiguous,
    DegenerateFrame,
    FlatDivisionByZero,
    GeometryMismatch,
    ShiftExceedsFrame,
)
from .imagery import Frame, FrameStack

FLAT_EPSILON = 1e-9


@dataclass(frozen=True)
class CalibrationSet:
    bias: Frame
    dark: Frame  # rate per second
    flat: Frame


@dataclass(frozen=True)
class AlignmentSolution:
    """``shifts[e] = (dx, dy)``: epoch ``e`` content appears displaced by
    (dx, dy) relative to the reference; ``scales[e]`` multiplies its flux."""

    shifts: tuple
    scales: tuple
    reference_epoch: int = 0

    def __post_init__(self):
        if len(self.shifts) != len(self.scales):
            raise ValueError("shifts and scales must have one entry per epoch")
        if any(s <= 0 for s in self.scales):
            raise ValueError("photometric scales must be positive")


def apply_prereduction(raw: Frame, cal: CalibrationSet, saturation_level: Optional[float] = None) -> Frame:
    """``(raw - bias - dark * exposure) / (flat / median(flat))``.

    Pixels at or above ``saturation_level`` in the raw frame are marked
    invalid in the returned frame's mask.
    """
    for name, f in (("bias", cal.bias), ("dark", cal.dark), ("flat", cal.flat)):
        if f.shape != raw.shape:
            raise GeometryMismatch(f"{name} frame {f.shape} does not match science frame {raw.shape}")
    flat = cal.flat.data.astype(np.float64)
    flat_norm = flat / np.median(flat)
    if not np.all(flat_norm > FLAT_EPSILON):
        raise FlatDivisionByZero("normalised flat has pixels <= 1e-9")
    data = raw.data.astype(np.float64)
    out = (data - cal.bias.data - cal.dark.data.astype(np.float64) * raw.exposure) / flat_norm
    valid = raw.validity().copy()
    if saturation_level is not None:
        valid &= data < saturation_level
    return raw.with_data(out.astype(np.float32), valid)


def _ncc_scores(ref: np.ndarray, img: np.ndarray, max_shift: int) -> dict:
    h, w = ref.shape
    scores = {}
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            # img[y + dy, x + dx] is compared with ref[y, x]
            ry = slice(max(0, -dy), min(h, h - dy))
            rx = slice(max(0, -dx), min(w, w - dx))
            iy = slice(max(0, dy), min(h, h + dy))
            ix = slice(max(0, dx), min(w, w + dx))
            a = ref[ry, rx]
            b = img[iy, ix]
            if a.size == 0:
                scores[(dx, dy)] = 0.0
                continue
            a = a - a.mean()
            b = b - b.mean()
            denom = np.sqrt(np.einsum("ij,ij->", a, a) * np.einsum("ij,ij->", b, b))
            scores[(dx, dy)] = float(np.einsum("ij,ij->", a, b) / denom) if denom > 0 else 0.0
    return scores


def best_shift(ref: np.ndarray, img: np.ndarray, max_shift: int) -> tuple[int, int]:
    """Integer shift maximising normalised cross-correlation.

    Ties go to the smallest ``|dx| + |dy|``, then smallest ``dy``, then ``dx``.
    """
    scores = _ncc_scores(ref.astype(np.float64), img.astype(np.float64), max_shift)
    ranked = sorted(scores, key=lambda s: (-scores[s], abs(s[0]) + abs(s[1]), s[1], s[0]))
    best = ranked[0]
    far = [scores[s] for s in ranked if max(abs(s[0] - best[0]), abs(s[1] - best[1])) > 1]
    if far and scores[best] <= max(far) + 1e-9:
        raise AlignmentAmbiguous(f"flat correlation surface (peak {scores[best]:.3g})")
    return best


def solve_geometric_alignment(stack: FrameStack, reference_epoch: int = 0, max_shift: int = 3) -> list:
    if len(stack) < 2:
        raise ValueError("geometric alignment needs at least two epochs")
    ref = stack[reference_epoch].data
    shifts = []
    for i, f in enumerate(stack.frames):
        if i == reference_epoch:
            shifts.append((0, 0))
        else:
            shifts.append(best_shift(ref, f.data, max_shift))
    return shifts


def common_valid(stack: FrameStack) -> np.ndarray:
    return np.logical_and.reduce([f.validity() for f in stack.frames])


def solve_photometric_alignment(stack: FrameStack, reference_epoch: int = 0) -> list:
    """``scale_e = median(reference) / median(frame_e)`` over pixels valid in every epoch."""
    region = common_valid(stack)
    if not region.any():
        raise DegenerateFrame("no pixel is valid in every epoch")
    medians = [float(np.median(f.data[region].astype(np.float64))) for f in stack.frames]
    for i, m in enumerate(medians):
        if m <= 0:
            raise DegenerateFrame(f"epoch {i} median {m} <= 0")
    ref = medians[reference_epoch]
    return [ref / m for m in medians]


def _translate(frame: Frame, dx: int, dy: int, scale: float) -> Frame:
    h, w = frame.shape
    if abs(dx) >= w or abs(dy) >= h:
        raise ShiftExceedsFrame(f"shift ({dx}, {dy}) exceeds {w}x{h} frame")
    src_valid = frame.validity()
    fill = float(np.median(frame.data[src_valid])) if src_valid.any() else 0.0
    data = np.full(frame.shape, fill, dtype=np.float64)
    valid = np.zeros(frame.shape, dtype=bool)
    # out[y, x] = in[y + dy, x + dx]
    oy = slice(max(0, -dy), min(h, h - dy))
    ox = slice(max(0, -dx), min(w, w - dx))
    iy = slice(max(0, dy), min(h, h + dy))
    ix = slice(max(0, dx), min(w, w + dx))
    data[oy, ox] = frame.data[iy, ix]
    valid[oy, ox] = src_valid[iy, ix]
    if scale != 1.0:
        data = data * scale
    keep_none = frame.valid is None and dx == 0 and dy == 0
    return frame.with_data(data.astype(np.float32), None if keep_none else valid)


def apply_alignment(stack: FrameStack, solution: AlignmentSolution) -> FrameStack:
    """Translate epoch ``e`` by ``-shifts[e]`` and multiply by ``scales[e]``.

    Pixels shifted out of the frame are dropped; pixels shifted in are
    marked invalid.
    """
    if len(solution.shifts) != len(stack):
        raise ValueError(f"solution covers {len(solution.shifts)} epochs, stack has {len(stack)}")
    frames = tuple(
        _translate(f, int(dx), int(dy), float(s))
        for f, (dx, dy), s in zip(stack.frames, solution.shifts, solution.scales)
    )
    return FrameStack(frames)


def calibrate_stack(
    raw: FrameStack,
    cal: CalibrationSet,
    reference_epoch: int = 0,
    max_shift: int = 3,
    saturation_level: Optional[float] = None,
) -> tuple[FrameStack, AlignmentSolution]:
    """Pre-reduce every epoch, then solve and apply geometric and photometric alignment."""
    reduced = FrameStack(tuple(apply_prereduction(f, cal, saturation_level) for f in raw.frames))
    if len(reduced) < 2:
        return reduced, AlignmentSolution(((0, 0),), (1.0,), reference_epoch)
    shifts = solve_geometric_alignment(reduced, reference_epoch, max_shift)
    shifted = apply_alignment(reduced, AlignmentSolution(tuple(shifts), (1.0,) * len(shifts), reference_epoch))
    scales = solve_photometric_alignment(shifted, reference_epoch)
    solution = AlignmentSolution(tuple(shifts), tuple(scales), reference_epoch)
    return apply_alignment(reduced, solution), solution
