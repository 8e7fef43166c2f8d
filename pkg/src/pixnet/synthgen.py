"""Synthetic observing campaigns with known ground truth.

Every random draw comes from a named stream: the field layout uses
``default_rng([seed, 0, band])`` and epoch ``i`` uses
``default_rng([seed, 1, band, i])``, so rendering epochs in any order or in
parallel gives the same bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import minimum_filter

from .errors import EmptyEpochList, EventOutOfBounds
from .imagery import Band, Frame, FrameStack
from .trigger2 import amplification

PSF_TRUNCATION = 5.0


@dataclass(frozen=True)
class Star:
    x: float
    y: float
    flux: float
    extent_sigma: float = 0.0


@dataclass
class SkyModel:
    stars: list = field(default_factory=list)
    psf_sigma: float = 1.5
    sky_background: float = 100.0
    read_noise_sigma: float = 5.0

    def __post_init__(self):
        if self.psf_sigma <= 0:
            raise ValueError("psf_sigma must be positive")
        if any(s.flux < 0 for s in self.stars):
            raise ValueError("star fluxes must be >= 0")


@dataclass(frozen=True)
class InjectedEvent:
    x: int
    y: int
    u0: float
    t0: float
    tE: float
    source_flux: float
    truth_id: str

    def __post_init__(self):
        if not self.u0 > 0 or not self.tE > 0:
            raise ValueError("u0 and tE must be positive")


@dataclass
class ArtifactModel:
    bias_level: float = 0.0
    bias_pattern: Optional[np.ndarray] = None
    dark_rate: float = 0.0
    flat_field: Optional[np.ndarray] = None
    cosmic_ray_rate: float = 0.0
    saturation_level: float = 60000.0
    frame_shifts: Optional[Sequence[tuple[int, int]]] = None
    photometric_gains: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.flat_field is not None and np.any(np.asarray(self.flat_field) <= 0):
            raise ValueError("flat field values must be > 0")


@dataclass(frozen=True)
class CalibrationFrames:
    bias: Frame
    dark: Frame
    flat: Frame


@dataclass
class Truth:
    events: list
    cosmic_rays: list  # (x, y, epoch_index, band)
    extended_objects: list
    frame_shifts: list
    photometric_gains: list

    def event_records(self) -> list[dict]:
        return [
            {
                "truth_id": e.truth_id,
                "x": e.x,
                "y": e.y,
                "u0": e.u0,
                "t0": e.t0,
                "tE": e.tE,
                "source_flux": e.source_flux,
            }
            for e in self.events
        ]


# ---------------------------------------------------------------------------
# PSF rendering


def psf_stamp(dx: float, dy: float, sigma: float):
    """Unit-sum Gaussian stamp truncated at 5 sigma.

    ``dx, dy`` is the sub-pixel offset of the centre from the stamp's central
    pixel. Returns ``(stamp, radius)``.
    """
    radius = int(math.ceil(PSF_TRUNCATION * sigma))
    offs = np.arange(-radius, radius + 1, dtype=float)
    gx = np.exp(-0.5 * ((offs - dx) / sigma) ** 2)
    gy = np.exp(-0.5 * ((offs - dy) / sigma) ** 2)
    yy, xx = np.meshgrid(offs - dy, offs - dx, indexing="ij")
    inside = xx**2 + yy**2 <= (PSF_TRUNCATION * sigma) ** 2
    stamp = np.outer(gy, gx) * inside
    return stamp / stamp.sum(), radius


def psf_peak_fraction(sigma: float) -> float:
    stamp, r = psf_stamp(0.0, 0.0, sigma)
    return float(stamp[r, r])


def add_source(canvas: np.ndarray, x: float, y: float, flux: float, sigma: float):
    """Add ``flux`` spread over a truncated Gaussian centred at (x, y)."""
    cx, cy = int(round(x)), int(round(y))
    stamp, r = psf_stamp(x - cx, y - cy, sigma)
    h, w = canvas.shape
    y0, y1 = cy - r, cy + r + 1
    x0, x1 = cx - r, cx + r + 1
    sy0, sx0 = max(0, -y0), max(0, -x0)
    sy1 = stamp.shape[0] - max(0, y1 - h)
    sx1 = stamp.shape[1] - max(0, x1 - w)
    if sy0 >= sy1 or sx0 >= sx1:
        return
    canvas[max(y0, 0) : min(y1, h), max(x0, 0) : min(x1, w)] += flux * stamp[sy0:sy1, sx0:sx1]


def render_static(sky: SkyModel, shape, pad: int = 0) -> np.ndarray:
    """Noiseless sky + stars on a canvas padded by ``pad`` pixels per side."""
    h, w = shape
    canvas = np.full((h + 2 * pad, w + 2 * pad), sky.sky_background, dtype=np.float64)
    for s in sky.stars:
        sigma = math.hypot(sky.psf_sigma, s.extent_sigma)
        add_source(canvas, s.x + pad, s.y + pad, s.flux, sigma)
    return canvas


# ---------------------------------------------------------------------------
# Campaign rendering


def make_calibration_frames(art: ArtifactModel, geometry, band=Band.R) -> CalibrationFrames:
    width, height = geometry
    if width < 1 or height < 1:
        raise ValueError(f"invalid geometry {width}x{height}")
    shape = (height, width)
    bias = np.full(shape, art.bias_level, dtype=np.float64)
    if art.bias_pattern is not None:
        bias = bias + art.bias_pattern
    dark = np.broadcast_to(np.asarray(art.dark_rate, dtype=np.float64), shape)
    flat = np.ones(shape) if art.flat_field is None else np.asarray(art.flat_field, dtype=np.float64)
    return CalibrationFrames(
        Frame(bias, band=band, exposure=0.0),
        Frame(dark, band=band, exposure=1.0),
        Frame(flat, band=band, exposure=1.0),
    )


def make_flat(shape, rms: float, rng: np.random.Generator) -> np.ndarray:
    """Pixel-to-pixel gain pattern with the given RMS, normalised to median 1."""
    flat = 1.0 + rms * rng.standard_normal(shape)
    flat = np.clip(flat, 0.5, 1.5)
    return (flat / np.median(flat)).astype(np.float32).astype(np.float64)


def _stream(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *path])


def render_campaign(
    sky: SkyModel,
    events: Sequence[InjectedEvent],
    art: ArtifactModel,
    epochs: Sequence[float],
    seed: int,
    shape: tuple[int, int] = (512, 512),
    band: Band = Band.R,
    exposure: float = 60.0,
    noise: bool = True,
    extended_objects: Sequence[Star] = (),
):
    """Render raw frames. Returns ``(raw_stack, calibration_frames, truth)``.

    ``shape`` is (height, width). Per epoch the scene (sky, stars and event
    excess flux ``source_flux * (A(u(t)) - 1)``) is displaced by the frame
    shift, multiplied by flat and photometric gain, offset by bias and dark
    current, given Gaussian noise of variance ``read_noise**2 + signal`` and
    cosmic-ray hits, then clipped at saturation.
    """
    epochs = [float(t) for t in epochs]
    if not epochs:
        raise EmptyEpochList("campaign needs at least one epoch")
    if any(b <= a for a, b in zip(epochs, epochs[1:])):
        raise ValueError("epochs must be strictly increasing")
    h, w = shape
    for ev in events:
        if not (0 <= ev.x < w and 0 <= ev.y < h):
            raise EventOutOfBounds(f"event {ev.truth_id} at ({ev.x}, {ev.y}) outside {w}x{h}")

    n = len(epochs)
    shifts = list(art.frame_shifts) if art.frame_shifts is not None else [(0, 0)] * n
    gains = list(art.photometric_gains) if art.photometric_gains is not None else [1.0] * n
    if len(shifts) != n or len(gains) != n:
        raise ValueError("frame_shifts and photometric_gains must cover every epoch")
    pad = max([0] + [max(abs(int(dx)), abs(int(dy))) for dx, dy in shifts])

    cal = make_calibration_frames(art, (w, h), band)
    bias = cal.bias.data.astype(np.float64)
    dark = cal.dark.data.astype(np.float64)
    flat = cal.flat.data.astype(np.float64)

    static = render_static(sky, shape, pad)
    for obj in extended_objects:
        add_source(static, obj.x + pad, obj.y + pad, obj.flux, math.hypot(sky.psf_sigma, obj.extent_sigma))

    frames = []
    cosmic = []
    for i, t in enumerate(epochs):
        dx, dy = int(shifts[i][0]), int(shifts[i][1])
        scene = static[pad - dy : pad - dy + h, pad - dx : pad - dx + w].copy()
        for ev in events:
            u = math.sqrt(ev.u0**2 + ((t - ev.t0) / ev.tE) ** 2)
            excess = ev.source_flux * (float(amplification(u)) - 1.0)
            add_source(scene, ev.x + dx, ev.y + dy, excess, sky.psf_sigma)

        signal = scene * flat * gains[i] + dark * exposure
        raw = signal + bias
        rng = _stream(seed, 1, band.code, i)
        if noise:
            sigma = np.sqrt(sky.read_noise_sigma**2 + np.maximum(signal, 0.0))
            raw = raw + sigma * rng.standard_normal(shape)
        if art.cosmic_ray_rate > 0:
            for _ in range(rng.poisson(art.cosmic_ray_rate)):
                cx, cy = int(rng.integers(w)), int(rng.integers(h))
                raw[cy, cx] = max(raw[cy, cx], art.saturation_level * (1.0 + rng.random()))
                cosmic.append((cx, cy, i, band.value))
        raw = np.minimum(raw, art.saturation_level)
        frames.append(Frame(raw.astype(np.float32), i, t, band, exposure))

    truth = Truth(list(events), cosmic, list(extended_objects), shifts, gains)
    return FrameStack(tuple(frames)), cal, truth


# ---------------------------------------------------------------------------
# Randomised campaigns


@dataclass(frozen=True)
class SynthConfig:
    width: int = 512
    height: int = 512
    epochs: int = 50
    cadence: float = 1.0
    exposure: float = 60.0
    n_stars: int = 400
    star_flux_min: float = 300.0
    star_flux_max: float = 3.0e5
    n_bright: int = 3
    n_extended: int = 2
    extended_sigma: float = 20.0
    extended_flux: float = 2.0e5
    psf_sigma: float = 1.5
    sky_background: float = 100.0
    read_noise: float = 5.0
    bias_level: float = 200.0
    dark_rate: float = 0.02
    flat_rms: float = 0.02
    cosmic_ray_rate: float = 2.0
    saturation_level: float = 60000.0
    max_shift: int = 2
    gain_jitter: float = 0.03
    n_events: int = 10
    u0_min: float = 0.1
    u0_max: float = 1.0
    tE_min: float = 4.0
    tE_max: float = 10.0
    sig_min: float = 15.0
    sig_max: float = 40.0
    bands: tuple = ("R",)


@dataclass
class Campaign:
    stacks: dict  # band -> raw FrameStack
    calibrations: dict  # band -> CalibrationFrames
    truth: Truth
    sky: SkyModel


def _place_events(cfg: SynthConfig, static: np.ndarray, rng, times) -> list[InjectedEvent]:
    """Events on quiet sky, away from borders, stars and each other."""
    h, w = static.shape
    margin = 12
    quiet = np.abs(static - cfg.sky_background) < 0.5 * cfg.read_noise
    # quiet 9x9 box around the event pixel
    quiet = minimum_filter(quiet.astype(np.uint8), size=9).astype(bool)
    noise = math.sqrt(cfg.read_noise**2 + cfg.sky_background)
    peak_frac = psf_peak_fraction(cfg.psf_sigma)
    span = times[-1] - times[0]
    events: list[InjectedEvent] = []
    for k in range(cfg.n_events):
        for _ in range(10000):
            x = int(rng.integers(margin, w - margin))
            y = int(rng.integers(margin, h - margin))
            if quiet[y, x] and all((x - e.x) ** 2 + (y - e.y) ** 2 >= 15**2 for e in events):
                break
        else:
            raise RuntimeError("could not place event on quiet sky")
        u0 = float(rng.uniform(cfg.u0_min, cfg.u0_max))
        tE = float(rng.uniform(cfg.tE_min, cfg.tE_max))
        t0 = float(rng.uniform(times[0] + 0.25 * span, times[-1] - 0.25 * span))
        sig = float(rng.uniform(cfg.sig_min, cfg.sig_max))
        source_flux = sig * noise / (peak_frac * (float(amplification(u0)) - 1.0))
        events.append(InjectedEvent(x, y, u0, t0, tE, source_flux, f"ev{k:03d}"))
    return events


def generate_campaign(cfg: SynthConfig, seed: int) -> Campaign:
    """Draw a random field, artifacts and events, then render every band."""
    rng = _stream(seed, 0)
    h, w = cfg.height, cfg.width
    times = [i * cfg.cadence for i in range(cfg.epochs)]

    lo, hi = math.log(cfg.star_flux_min), math.log(cfg.star_flux_max)
    stars = [
        Star(float(rng.uniform(0, w - 1)), float(rng.uniform(0, h - 1)), float(math.exp(rng.uniform(lo, hi))))
        for _ in range(cfg.n_stars)
    ]
    for _ in range(cfg.n_bright):
        stars.append(Star(float(rng.uniform(20, w - 21)), float(rng.uniform(20, h - 21)), 3.0e6))
    extended = [
        Star(float(rng.uniform(0.2 * w, 0.8 * w)), float(rng.uniform(0.2 * h, 0.8 * h)),
             cfg.extended_flux, cfg.extended_sigma)
        for _ in range(cfg.n_extended)
    ]
    sky = SkyModel(stars, cfg.psf_sigma, cfg.sky_background, cfg.read_noise)

    static = render_static(sky, (h, w))
    for obj in extended:
        add_source(static, obj.x, obj.y, obj.flux, math.hypot(cfg.psf_sigma, obj.extent_sigma))
    events = _place_events(cfg, static, rng, times)

    shifts = [(0, 0)] + [
        (int(rng.integers(-cfg.max_shift, cfg.max_shift + 1)), int(rng.integers(-cfg.max_shift, cfg.max_shift + 1)))
        for _ in range(cfg.epochs - 1)
    ]
    gains = [1.0] + [float(1.0 + cfg.gain_jitter * rng.uniform(-1, 1)) for _ in range(cfg.epochs - 1)]
    bias_pattern = 2.0 * rng.standard_normal((h, w))
    colors = rng.uniform(0.6, 1.4, len(stars))

    stacks, cals = {}, {}
    truth = None
    for name in cfg.bands:
        band = Band(name)
        band_rng = _stream(seed, 0, band.code)
        if band is Band.R:
            band_sky = sky
            band_ext = extended
        else:
            band_sky = SkyModel(
                [Star(s.x, s.y, s.flux * c, s.extent_sigma) for s, c in zip(stars, colors)],
                cfg.psf_sigma, cfg.sky_background, cfg.read_noise,
            )
            band_ext = [Star(o.x, o.y, o.flux * 0.8, o.extent_sigma) for o in extended]
        art = ArtifactModel(
            bias_level=cfg.bias_level,
            bias_pattern=bias_pattern,
            dark_rate=cfg.dark_rate,
            flat_field=make_flat((h, w), cfg.flat_rms, band_rng),
            cosmic_ray_rate=cfg.cosmic_ray_rate,
            saturation_level=cfg.saturation_level,
            frame_shifts=shifts,
            photometric_gains=gains,
        )
        stack, cal, band_truth = render_campaign(
            band_sky, events, art, times, seed, (h, w), band, cfg.exposure, extended_objects=band_ext
        )
        stacks[band.value] = stack
        cals[band.value] = cal
        if truth is None:
            truth = band_truth
        else:
            truth.cosmic_rays.extend(band_truth.cosmic_rays)
    return Campaign(stacks, cals, truth, sky)


def write_truth(truth: Truth, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in truth.event_records():
            fh.write(json.dumps(rec) + "\n")


def read_truth(path) -> list[InjectedEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                events.append(InjectedEvent(**json.loads(line)))
    return events
