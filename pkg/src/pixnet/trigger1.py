"""First trigger level: Fourier object filter, cosmic/saturation rejection,
per-pixel light curves and peak detection/classification."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptyPeakList, InsufficientData, NonFiniteInput
from .imagery import Band, Frame, FrameStack

MAD_TO_SIGMA = 1.4826


@dataclass(frozen=True)
class Trigger1Config:
    n_sigma: float = 3.0
    min_run: int = 3
    proximity_window: int = 10
    k_obj: float = 5.0
    m_cr: float = 8.0
    n_cr: float = 2.0
    cutoff_sigma_px: float = 6.0
    read_noise: float = 5.0
    saturation_level: float = 60000.0


@dataclass(eq=False)
class LightCurve:
    pixel: tuple[int, int]
    band: Band
    times: np.ndarray
    flux: np.ndarray
    error: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.flux = np.asarray(self.flux, dtype=float)
        self.error = np.asarray(self.error, dtype=float)
        n = len(self.times)
        self.valid = (
            np.ones(n, dtype=bool) if self.valid is None else np.asarray(self.valid, dtype=bool)
        )
        if not (len(self.flux) == len(self.error) == len(self.valid) == n):
            raise ValueError("light curve arrays must share length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("epoch times must be strictly increasing")
        self.band = Band(self.band)
        self.pixel = (int(self.pixel[0]), int(self.pixel[1]))

    def __len__(self):
        return len(self.times)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def samples(self):
        """(epoch_time, flux, error, valid) tuples in time order."""
        return list(zip(self.times.tolist(), self.flux.tolist(), self.error.tolist(), self.valid.tolist()))

    def __eq__(self, other):
        if not isinstance(other, LightCurve):
            return NotImplemented
        return (
            self.pixel == other.pixel
            and self.band == other.band
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.flux, other.flux)
            and np.array_equal(self.error, other.error)
            and np.array_equal(self.valid, other.valid)
        )


@dataclass(frozen=True)
class Peak:
    start_index: int
    end_index: int
    apex_index: int
    significance: float


class PeakClass(str, enum.Enum):
    SINGLE = "Single"
    DOUBLE = "Double"
    MULTIPLE = "Multiple"


@dataclass(frozen=True)
class PeakClassification:
    cls: PeakClass
    planetary_flag: bool = False


# ---------------------------------------------------------------------------
# Fourier-space filtering


def highpass_transfer(shape, cutoff_sigma_px: float) -> np.ndarray:
    """Gaussian-complement transfer function on the ``rfft2`` frequency grid."""
    fc = 1.0 / (2.0 * np.pi * cutoff_sigma_px)
    fy = np.fft.fftfreq(shape[0])[:, None]
    fx = np.fft.rfftfreq(shape[1])[None, :]
    h = 1.0 - np.exp(-(fx**2 + fy**2) / (2.0 * fc**2))
    h[0, 0] = 0.0
    return h


def fourier_filter(frame, cutoff_sigma_px: float):
    """High-pass filter a frame (or a 2D/3D array) in the Fourier domain.

    Structures broader than ``cutoff_sigma_px`` are suppressed; the DC term is
    removed so a constant frame maps to zero.
    """
    if cutoff_sigma_px <= 0:
        raise ValueError("cutoff_sigma_px must be positive")
    data = frame.data if isinstance(frame, Frame) else np.asarray(frame)
    if not np.all(np.isfinite(data)):
        raise NonFiniteInput("frame contains NaN or infinite values")
    shape = data.shape[-2:]
    h = highpass_transfer(shape, cutoff_sigma_px)
    out = np.fft.irfft2(np.fft.rfft2(data.astype(np.float64)) * h, s=shape)
    if isinstance(frame, Frame):
        return frame.with_data(out.astype(np.float32), frame.valid)
    return out


def _nan_median(cube: np.ndarray, valid: np.ndarray, axis=0) -> np.ndarray:
    # fully masked pixels get a dummy 0 and are reset to NaN afterwards;
    # silencing the all-NaN warning instead is not thread-safe
    empty = ~np.any(valid, axis=axis)
    masked = np.where(valid, cube, np.nan)
    masked = np.where(np.expand_dims(empty, axis), 0.0, masked)
    out = np.nanmedian(masked, axis=axis)
    return np.where(empty, np.nan, out)


def star_object_filter(stack: FrameStack, cutoff_sigma_px: float, k_obj: float = 5.0):
    """Fourier-filter every epoch and flag static (object) pixels.

    Returns ``(filtered_stack, object_mask)``; ``object_mask`` is True where the
    temporal median of the filtered flux exceeds ``k_obj`` times that pixel's
    single-frame noise, or where a pixel has no valid sample at all.

    Frames are edge-padded by three cutoff widths before filtering so that the
    periodic transform does not wrap flux across opposite borders. The noise
    is each pixel's temporal MAD sigma of the filtered flux: a static object
    does not inflate it, and it does not depend on where a tile is cut.
    """
    cube = stack.cube()
    valid = stack.valid_cube()
    pad = int(np.ceil(3 * cutoff_sigma_px))
    padded = np.pad(cube, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    filtered = fourier_filter(padded, cutoff_sigma_px)[:, pad : pad + stack.height, pad : pad + stack.width]

    med, sigma_t = robust_baseline(filtered, valid)
    scale = float(np.median(np.abs(cube))) if cube.size else 0.0
    sigma = np.maximum(np.nan_to_num(sigma_t), 1e-6 * max(1.0, scale))

    never_valid = ~valid.any(axis=0)
    obj = never_valid | (np.abs(np.nan_to_num(med)) > k_obj * sigma)

    frames = tuple(
        f.with_data(filtered[i].astype(np.float32), f.valid) for i, f in enumerate(stack.frames)
    )
    return FrameStack(frames), obj


def robust_baseline(cube: np.ndarray, valid: np.ndarray):
    """Per-pixel median and MAD-scaled sigma along the epoch axis."""
    base = _nan_median(cube, valid)
    mad = _nan_median(np.abs(cube - base[None]), valid)
    return base, MAD_TO_SIGMA * mad


def cosmic_saturation_filter(stack: FrameStack, saturation_level: float, m_cr: float = 8.0, n_cr: float = 2.0):
    """Update validity for saturation and isolated single-epoch spikes.

    Returns ``(valid, excluded)``: the new (epochs, H, W) validity cube and the
    per-pixel exclusion map (pixels invalid in more than half of the epochs).
    """
    cube = stack.cube().astype(np.float64)
    valid = stack.valid_cube() & (cube < saturation_level)

    n = cube.shape[0]
    if n >= 2:
        base, sigma = robust_baseline(cube, valid)
        base = np.nan_to_num(base)[None]
        sigma = np.nan_to_num(sigma)[None]
        dev = cube - base
        spike = valid & (dev > m_cr * sigma)
        quiet = np.abs(dev) <= n_cr * sigma
        # both existing temporal neighbours must be quiet
        left_ok = np.ones_like(spike)
        right_ok = np.ones_like(spike)
        left_ok[1:] = quiet[:-1]
        right_ok[:-1] = quiet[1:]
        spike &= left_ok & right_ok
        valid = valid & ~spike

    excluded = (~valid).sum(axis=0) * 2 > n
    return valid, excluded


def sample_errors(flux: np.ndarray, read_noise: float) -> np.ndarray:
    return np.sqrt(read_noise**2 + np.maximum(flux, 0.0))


def build_light_curves(
    stack: FrameStack,
    valid: Optional[np.ndarray] = None,
    excluded: Optional[np.ndarray] = None,
    read_noise: float = 5.0,
    region: Optional[tuple[slice, slice]] = None,
    origin: tuple[int, int] = (0, 0),
) -> list[LightCurve]:
    """One curve per non-excluded pixel, in row-major order.

    ``region`` restricts to a (rows, cols) slice of the stack; ``origin`` is
    the parent-frame (x, y) of the region's first pixel.
    """
    cube = stack.cube().astype(np.float64)
    valid = stack.valid_cube() if valid is None else valid
    if excluded is None:
        excluded = np.zeros(cube.shape[1:], dtype=bool)
    if region is not None:
        cube = cube[(slice(None),) + region]
        valid = valid[(slice(None),) + region]
        excluded = excluded[region]
    errors = sample_errors(cube, read_noise)
    times = stack.times
    curves = []
    ys, xs = np.nonzero(~excluded)
    for y, x in zip(ys.tolist(), xs.tolist()):
        curves.append(
            LightCurve(
                (origin[0] + x, origin[1] + y),
                stack.band,
                times,
                cube[:, y, x],
                errors[:, y, x],
                valid[:, y, x],
            )
        )
    return curves


def _runs(mask: np.ndarray):
    """(start, end) inclusive index pairs of True runs."""
    padded = np.concatenate(([False], mask, [False]))
    d = np.diff(padded.astype(np.int8))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def curve_baseline(curve: LightCurve) -> tuple[float, float]:
    flux = curve.flux[curve.valid]
    base = float(np.median(flux))
    sigma = MAD_TO_SIGMA * float(np.median(np.abs(flux - base)))
    return base, sigma


def detect_peaks(curve: LightCurve, n_sigma: float = 3.0, min_run: int = 3) -> list[Peak]:
    """Runs of at least ``min_run`` valid samples above ``baseline + n_sigma*sigma``.

    Invalid samples are skipped, so they neither extend nor split a run.
    """
    idx = np.flatnonzero(curve.valid)
    if len(idx) < 2 * min_run:
        raise InsufficientData(f"{len(idx)} valid samples, need {2 * min_run}")
    flux = curve.flux[idx]
    base, sigma = curve_baseline(curve)
    sigma = max(sigma, 1e-12 * max(1.0, abs(base)))
    above = flux > base + n_sigma * sigma

    peaks = []
    for s, e in _runs(above):
        if e - s + 1 < min_run:
            continue
        apex = s + int(np.argmax(flux[s : e + 1]))
        peaks.append(
            Peak(int(idx[s]), int(idx[e]), int(idx[apex]), float((flux[apex] - base) / sigma))
        )
    return peaks


def classify_peaks(peaks: list[Peak], proximity_window: int = 10) -> PeakClassification:
    if not peaks:
        raise EmptyPeakList("cannot classify an empty peak list")
    if len(peaks) == 1:
        return PeakClassification(PeakClass.SINGLE, False)
    if len(peaks) >= 3:
        return PeakClassification(PeakClass.MULTIPLE, False)
    first, second = sorted(peaks, key=lambda p: p.start_index)
    gap = second.start_index - first.end_index - 1
    primary, secondary = sorted((first, second), key=lambda p: -p.significance)
    flag = gap <= proximity_window and secondary.significance < primary.significance
    return PeakClassification(PeakClass.DOUBLE, bool(flag))


def screen_pixels(
    cube: np.ndarray, valid: np.ndarray, excluded: np.ndarray, n_sigma: float, min_run: int
) -> np.ndarray:
    """Cheap necessary condition for :func:`detect_peaks` to find a peak.

    True where a pixel has at least ``min_run`` valid samples above its
    threshold; every peak-bearing curve passes this screen.
    """
    base, sigma = robust_baseline(cube, valid)
    base = np.nan_to_num(base)
    sigma = np.maximum(np.nan_to_num(sigma), 1e-12 * np.maximum(1.0, np.abs(base)))
    above = valid & (cube > (base + n_sigma * sigma)[None])
    enough = valid.sum(axis=0) >= 2 * min_run
    return ~excluded & enough & (above.sum(axis=0) >= min_run)
