"""Synthetic intensified-camera frames, vertical binning, and trap-position
drift / standing-wave phase traces.

Frames are generated photon by photon: each detected photon deposits one
gain quantum of counts in the pixel it lands on, with its axial coordinate
drawn from the LSF density and its vertical coordinate from the radial
thermal spot.  Background is characterized per vertical bin (offset 2300,
rms 300 counts for 1 s) and applied as an even per-pixel share.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, PlacementError, TraceTooShortError
from .model import (
    AtomEnsemble,
    CameraModel,
    LatticeConfig,
    LsfModel,
    NoiseModel,
    lsf_cdf,
    lsf_sample,
)
from scipy.special import ndtr


@dataclass(frozen=True)
class Frame:
    """2D integer count image plus the metadata needed to analyze it."""

    counts: np.ndarray  # shape (frame_h, frame_w), int64
    pixel_um: float
    exposure_s: float
    seed: int

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise ParameterError("Frame counts must be a 2D array")
        if np.any(counts < 0):
            raise ParameterError("Frame counts must be >= 0")
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @property
    def height_px(self) -> int:
        return self.counts.shape[0]

    @property
    def width_px(self) -> int:
        return self.counts.shape[1]


@dataclass(frozen=True)
class BinnedProfile:
    """Vertical column sums of a frame with the object-plane bin centers."""

    counts: np.ndarray
    x_um: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=float))
        object.__setattr__(self, "x_um", np.asarray(self.x_um, dtype=float))
        if self.counts.shape != self.x_um.shape or self.counts.ndim != 1:
            raise ParameterError("profile counts and x positions must match 1D shapes")


@dataclass(frozen=True)
class DriftTrace:
    """Wiener path of the standing-wave axial offset; variance grows
    linearly with elapsed time (fluct_1s^2 per second)."""

    times_s: np.ndarray
    offsets_um: np.ndarray

    def offset_at(self, t_s):
        return np.interp(t_s, self.times_s, self.offsets_um)

    @property
    def duration_s(self) -> float:
        return float(self.times_s[-1])


@dataclass(frozen=True)
class PhaseTrace:
    """Standing-wave phase samples: phi = 2 pi * offset / period."""

    times_s: np.ndarray
    phi_rad: np.ndarray

    @property
    def duration_s(self) -> float:
        return float(self.times_s[-1])


def gen_drift_trace(
    noise: NoiseModel, duration_s: float, dt_s: float, rng: np.random.Generator
) -> DriftTrace:
    """Sample a Wiener drift path with independent Gaussian increments of
    standard deviation fluct_1s * sqrt(dt)."""
    if dt_s <= 0:
        raise ParameterError("dt_s must be > 0")
    if duration_s < dt_s:
        raise ParameterError("duration_s must be >= dt_s")
    n = int(np.ceil(duration_s / dt_s - 1e-12))
    times = np.arange(n + 1) * dt_s
    increments = rng.normal(0.0, noise.fluct_1s_um * np.sqrt(dt_s), n)
    offsets = np.concatenate([[0.0], np.cumsum(increments)])
    return DriftTrace(times_s=times, offsets_um=offsets)


def drift_to_phase(trace: DriftTrace, lattice: LatticeConfig) -> PhaseTrace:
    return PhaseTrace(
        times_s=trace.times_s,
        phi_rad=2.0 * np.pi * trace.offsets_um / lattice.period_um,
    )


def phase_to_drift(trace: PhaseTrace, lattice: LatticeConfig) -> DriftTrace:
    return DriftTrace(
        times_s=trace.times_s,
        offsets_um=trace.phi_rad * lattice.period_um / (2.0 * np.pi),
    )


def render_frame(
    atoms: AtomEnsemble,
    lsf: LsfModel,
    camera: CameraModel,
    noise: NoiseModel,
    drift: DriftTrace | None = None,
    rng: np.random.Generator | None = None,
    shot_noise: bool = True,
    background: bool = True,
    seed_label: int = 0,
) -> Frame:
    """Render one exposure.

    With ``shot_noise`` the photon count per atom is Poisson distributed and
    every photon lands individually; without it the expected (noise-free)
    signal is deposited instead, which isolates background noise in tests.
    ``drift``, when given, displaces each photon by the trap offset at its
    uniformly distributed emission time (ignored in expected-signal mode).
    """
    if rng is None:
        if shot_noise or (background and noise.bg_noise > 0):
            raise ParameterError("rng is required for stochastic rendering")
        rng = np.random.default_rng(0)
    h, w = camera.frame_h, camera.frame_w
    width_um = camera.width_um
    y_center = camera.height_um / 2.0
    exposure = camera.exposure_s

    for pos in atoms.positions_um:
        if not (0.0 <= pos < width_um):
            raise PlacementError(f"atom at {pos:.3f} um outside frame [0, {width_um:.3f})")

    canvas = np.zeros((h, w), dtype=float)
    mean_photons = noise.photons_per_s * exposure

    for pos in atoms.positions_um:
        if shot_noise:
            n_ph = int(rng.poisson(mean_photons))
            if n_ph == 0:
                continue
            x = np.full(n_ph, pos)
            if drift is not None:
                t_emit = rng.uniform(0.0, exposure, n_ph)
                x = x + drift.offset_at(t_emit)
            x = x + lsf_sample(lsf, rng, n_ph)
            y = rng.normal(y_center, atoms.radial_sigma_um, n_ph)
            ix = np.floor(x / camera.pixel_um).astype(int)
            iy = np.floor(y / camera.pixel_um).astype(int)
            inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
            np.add.at(canvas, (iy[inside], ix[inside]), camera.gain)
        else:
            col_edges = np.arange(w + 1) * camera.pixel_um - pos
            p_col = np.diff(lsf_cdf(lsf, col_edges))
            row_edges = (np.arange(h + 1) * camera.pixel_um - y_center) / atoms.radial_sigma_um
            p_row = np.diff(ndtr(row_edges))
            canvas += mean_photons * camera.gain * np.outer(p_row, p_col)

    if background:
        scale = exposure / 1.0
        canvas += noise.bg_offset * scale / h
        if noise.bg_noise > 0:
            canvas += rng.normal(0.0, noise.bg_noise * np.sqrt(scale) / np.sqrt(h), (h, w))

    counts = np.maximum(np.rint(canvas), 0.0).astype(np.int64)
    return Frame(counts=counts, pixel_um=camera.pixel_um, exposure_s=exposure, seed=seed_label)


def bin_columns(frame: Frame) -> BinnedProfile:
    """Sum pixel counts vertically; bin centers at (i + 0.5) * pixel_um."""
    counts = frame.counts.sum(axis=0).astype(float)
    x = (np.arange(frame.width_px) + 0.5) * frame.pixel_um
    return BinnedProfile(counts=counts, x_um=x)


# ---------------------------------------------------------------------------
# Frame file format
# ---------------------------------------------------------------------------

def frame_to_json(frame: Frame) -> str:
    """Serialize to the canonical single-document JSON frame format."""
    doc = {
        "width_px": frame.width_px,
        "height_px": frame.height_px,
        "pixel_um": frame.pixel_um,
        "exposure_s": frame.exposure_s,
        "seed": frame.seed,
        "counts": frame.counts.tolist(),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def frame_from_json(text: str) -> Frame:
    try:
        doc = json.loads(text)
        counts = np.asarray(doc["counts"], dtype=np.int64)
        if counts.shape != (doc["height_px"], doc["width_px"]):
            raise ParameterError(
                f"counts shape {counts.shape} does not match "
                f"({doc['height_px']}, {doc['width_px']})"
            )
        return Frame(
            counts=counts,
            pixel_um=float(doc["pixel_um"]),
            exposure_s=float(doc["exposure_s"]),
            seed=int(doc["seed"]),
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ParameterError(f"invalid frame JSON: {exc}") from exc
