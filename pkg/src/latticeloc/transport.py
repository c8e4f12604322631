"""Conveyor-belt motion profiles, synthesizer quantization, and the
closed-loop measure-transport-measure placement simulation.

Moving the standing-wave pattern means mutually detuning the two trap beams:
a velocity v corresponds to a detuning of 2 v / lambda.  The transported
distance L is covered by uniform acceleration over the first half and
uniform deceleration over the second half.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import BudgetError, ParameterError, PlacementError
from .fitting import fit_gaussian_1d
from .imaging import DriftTrace, bin_columns, render_frame
from .model import (
    AtomEnsemble,
    CameraModel,
    LatticeConfig,
    LsfModel,
    NoiseModel,
)

M_PER_S2_TO_UM = 1e6  # acceleration unit conversion

DEFAULT_ACCEL_M_S2 = 1000.0

# Synthesizer defaults.  The frequency granularity is calibrated (see
# tools/calibrate_synth.py) so that the rms displacement error over the
# reference transport ensemble (L ~ Normal(30 um, 5 um), uniform trigger
# phase) equals the 190 nm transport error the control budget attributes to
# synthesizer discretization.  The quantizer also carries a small systematic
# undershoot (the low-velocity ramp ends round to zero detuning), common to
# every transport and irrelevant for placement spreads and for calibration
# shifts measured against a reference campaign.
DEFAULT_UPDATE_INTERVAL_S = 10e-6
DEFAULT_FREQ_STEP_HZ = 49660.0

# Inter-exposure trap drift over the default 1.5 s measure-transport-measure
# cycle.  Kept as its own parameter: the slow drifts it describes exceed the
# sqrt(t) extrapolation of the fast fluctuation scale.
DEFAULT_SIGMA_DRIFT_UM = 0.140

DEFAULT_MOT_SIGMA_UM = 5.0


@dataclass(frozen=True)
class MotionProfile:
    """Triangular velocity profile covering a signed displacement."""

    length_um: float
    accel_m_s2: float
    wavelength_um: float = 1.064

    def __post_init__(self):
        if self.accel_m_s2 <= 0:
            raise ParameterError("acceleration must be > 0")

    @property
    def accel_um_s2(self) -> float:
        return self.accel_m_s2 * M_PER_S2_TO_UM

    @property
    def t_half_s(self) -> float:
        return math.sqrt(abs(self.length_um) / self.accel_um_s2)

    @property
    def t_total_s(self) -> float:
        return 2.0 * self.t_half_s

    @property
    def v_peak_um_s(self) -> float:
        return math.sqrt(abs(self.length_um) * self.accel_um_s2)

    def velocity(self, t_s):
        """Signed pattern velocity, zero outside [0, t_total]."""
        t = np.asarray(t_s, dtype=float)
        a = self.accel_um_s2
        sign = math.copysign(1.0, self.length_um) if self.length_um else 0.0
        up = a * t
        down = a * (self.t_total_s - t)
        v = sign * np.where(t <= self.t_half_s, up, down)
        return np.where((t < 0) | (t > self.t_total_s), 0.0, v)

    def displacement(self, t_s):
        """Distance covered by time t (analytic, exact)."""
        t = np.clip(np.asarray(t_s, dtype=float), 0.0, self.t_total_s)
        a = self.accel_um_s2
        sign = math.copysign(1.0, self.length_um) if self.length_um else 0.0
        first = 0.5 * a * t**2
        second = abs(self.length_um) - 0.5 * a * (self.t_total_s - t) ** 2
        return sign * np.where(t <= self.t_half_s, first, second)

    def detuning_hz(self, t_s):
        """Mutual beam detuning producing the profile: 2 v / lambda."""
        return 2.0 * self.velocity(t_s) / self.wavelength_um


def motion_profile(
    length_um: float,
    accel_m_s2: float = DEFAULT_ACCEL_M_S2,
    wavelength_um: float = 1.064,
) -> MotionProfile:
    return MotionProfile(length_um, accel_m_s2, wavelength_um)


@dataclass(frozen=True)
class SynthesizerModel:
    """Digital dual-frequency synthesizer: the detuning waveform is updated
    every ``update_interval_s`` and each value sits on a ``freq_step_hz``
    grid."""

    freq_step_hz: float = DEFAULT_FREQ_STEP_HZ
    update_interval_s: float = DEFAULT_UPDATE_INTERVAL_S

    def __post_init__(self):
        if self.freq_step_hz <= 0 or self.update_interval_s <= 0:
            raise ParameterError("synthesizer granularities must be > 0")


@dataclass(frozen=True)
class QuantizedProfile:
    """Piecewise-constant detuning program and its displacement error."""

    times_s: np.ndarray
    durations_s: np.ndarray
    detuning_hz: np.ndarray
    velocity_um_s: np.ndarray
    displacement_um: float
    displacement_error_um: float


def _round_half_away(values):
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def quantize_profile(
    profile: MotionProfile, synth: SynthesizerModel, trigger_phase: float = 0.0
):
    """Program the profile on the synthesizer grid and integrate the error.

    Each update interval is programmed with the interval's mean detuning
    rounded half-away-from-zero to the frequency grid; the displacement
    error is the exact integral of the quantized-minus-ideal velocity.
    ``trigger_phase`` in [0, 1) is the profile start relative to the
    synthesizer's free-running update clock: ramps trigger asynchronously,
    which decorrelates the rounding pattern between repeated transports.
    Returns ``(QuantizedProfile, displacement_error_um)``.
    """
    if not (0.0 <= trigger_phase < 1.0):
        raise ParameterError("trigger_phase must be in [0, 1)")
    t_total = profile.t_total_s
    dt = synth.update_interval_s
    if t_total <= 0.0:
        empty = np.array([])
        return QuantizedProfile(empty, empty, empty, empty, 0.0, 0.0), 0.0
    # Update-clock boundaries (trigger_phase + k) * dt overlapping [0, t_total],
    # plus the partial interval before the first boundary when present.
    first = trigger_phase * dt
    if trigger_phase > 0.0 and first < t_total:
        boundary_times = np.concatenate([[0.0], first + dt * np.arange(
            int(math.ceil((t_total - first) / dt - 1e-12))
        )])
    elif trigger_phase > 0.0:
        boundary_times = np.array([0.0])
    else:
        boundary_times = dt * np.arange(int(math.ceil(t_total / dt - 1e-12)))
    times = boundary_times
    durations = np.diff(np.append(times, t_total))
    ends = times + durations
    # interval-mean detuning = displacement difference / (duration * lambda/2)
    mean_v = (profile.displacement(ends) - profile.displacement(times)) / durations
    mean_detuning = 2.0 * mean_v / profile.wavelength_um
    detuning_q = _round_half_away(mean_detuning / synth.freq_step_hz) * synth.freq_step_hz
    v_q = detuning_q * profile.wavelength_um / 2.0
    displacement = float(v_q @ durations)
    error = displacement - profile.length_um
    quantized = QuantizedProfile(
        times_s=times,
        durations_s=durations,
        detuning_hz=detuning_q,
        velocity_um_s=v_q,
        displacement_um=displacement,
        displacement_error_um=error,
    )
    return quantized, error


def transport_rms_error_um(
    synth: SynthesizerModel,
    mean_length_um: float = 30.0,
    sigma_length_um: float = DEFAULT_MOT_SIGMA_UM,
    accel_m_s2: float = DEFAULT_ACCEL_M_S2,
    wavelength_um: float = 1.064,
    n_samples: int = 2000,
    seed: int = 0,
) -> float:
    """Rms displacement error over the reference transport ensemble:
    lengths from the MOT position spread (L ~ Normal(30 um, 5 um)) and a
    uniform trigger phase per transport."""
    rng = np.random.default_rng(seed)
    lengths = rng.normal(mean_length_um, sigma_length_um, n_samples)
    triggers = rng.random(n_samples)
    errors = [
        quantize_profile(
            motion_profile(length, accel_m_s2, wavelength_um), synth, trigger
        )[1]
        for length, trigger in zip(lengths, triggers)
    ]
    return float(np.sqrt(np.mean(np.square(errors))))


def execute_transport(
    start_um: float,
    target_um: float,
    measured_start_um: float | None = None,
    accel_m_s2: float = DEFAULT_ACCEL_M_S2,
    wavelength_um: float = 1.064,
    synth: SynthesizerModel | None = None,
    trigger_phase: float = 0.0,
    drift: DriftTrace | float | None = None,
    lattice: LatticeConfig | None = None,
    length_scale_error: float = 0.0,
) -> float:
    """Move the pattern by L = target - measured start and return the true
    final position.

    The emitter rides the pattern, so it ends displaced by the quantized
    (and possibly length-miscalibrated) command plus whatever the trap
    drifted over the cycle; ``drift`` is that accrued offset, either a
    number or a trace evaluated at the profile end.  The final coordinate is
    snapped to the displaced lattice, a no-op when the start sits on a well.
    """
    if measured_start_um is None:
        measured_start_um = start_um
    commanded = target_um - measured_start_um
    if synth is not None:
        _, q_error = quantize_profile(
            motion_profile(commanded, accel_m_s2, wavelength_um), synth, trigger_phase
        )
    else:
        q_error = 0.0
    executed = (commanded + q_error) * (1.0 + length_scale_error)
    if drift is None:
        drift_offset = 0.0
    elif isinstance(drift, DriftTrace):
        t_total = motion_profile(commanded, accel_m_s2, wavelength_um).t_total_s
        drift_offset = float(drift.offset_at(min(t_total, drift.duration_s)))
    else:
        drift_offset = float(drift)
    final = start_um + executed + drift_offset
    if lattice is not None:
        final = lattice.nearest_well(final, origin_shift_um=executed + drift_offset)
    return final


@dataclass(frozen=True)
class PlacementResult:
    initial_um: float
    measured_initial_um: float
    final_um: float
    measured_final_um: float
    target_um: float

    @property
    def error_um(self) -> float:
        return self.final_um - self.target_um

    @property
    def measured_error_um(self) -> float:
        return self.measured_final_um - self.target_um


def closed_loop_place(
    target_um: float,
    lsf: LsfModel,
    lattice: LatticeConfig,
    camera: CameraModel,
    noise: NoiseModel,
    rng: np.random.Generator,
    synth: SynthesizerModel | None = None,
    mot_center_um: float | None = None,
    mot_sigma_um: float = DEFAULT_MOT_SIGMA_UM,
    sigma_drift_um: float = DEFAULT_SIGMA_DRIFT_UM,
    accel_m_s2: float = DEFAULT_ACCEL_M_S2,
    length_scale_error: float = 0.0,
    shot_noise: bool = True,
    background: bool = True,
    quantization: bool = True,
    drift: bool = True,
) -> PlacementResult:
    """One measure-transport-measure cycle.

    The emitter loads at a lattice site drawn from the MOT position spread,
    is located by a simple-Gaussian fit of one exposure, transported to the
    target, and located again.  The noise toggles isolate individual error
    sources for budget decomposition.  Fit failures propagate as the
    fitters' domain errors; campaign drivers count and exclude such trials.
    """
    if synth is None:
        synth = SynthesizerModel()
    if mot_center_um is None:
        mot_center_um = target_um + 30.0
    initial = lattice.nearest_well(rng.normal(mot_center_um, mot_sigma_um))
    width = camera.frame_w * camera.pixel_um
    if not (0.0 <= initial < width):
        raise PlacementError(f"initial position {initial:.2f} um outside frame")

    bg_sigma = noise.bg_noise * math.sqrt(camera.exposure_s) if background else 0.0

    def measure(position_um: float) -> float:
        frame = render_frame(
            AtomEnsemble((position_um,)),
            lsf,
            camera,
            noise,
            rng=rng,
            shot_noise=shot_noise,
            background=background,
        )
        fit = fit_gaussian_1d(
            bin_columns(frame),
            bg_sigma=bg_sigma,
            variance_shape=lsf,
            weighting="shot" if shot_noise else "uniform",
        )
        if not fit.converged:
            raise PlacementError("position fit did not converge")
        return fit.center_um

    measured_initial = measure(initial)
    drift_offset = rng.normal(0.0, sigma_drift_um) if drift else 0.0
    trigger = float(rng.random()) if quantization else 0.0
    final = execute_transport(
        initial,
        target_um,
        measured_start_um=measured_initial,
        accel_m_s2=accel_m_s2,
        wavelength_um=lattice.wavelength_um,
        synth=synth if quantization else None,
        trigger_phase=trigger,
        drift=drift_offset,
        lattice=lattice,
        length_scale_error=length_scale_error,
    )
    if not (0.0 <= final < width):
        raise PlacementError(f"final position {final:.2f} um outside frame")
    measured_final = measure(final)
    return PlacementResult(
        initial_um=initial,
        measured_initial_um=measured_initial,
        final_um=final,
        measured_final_um=measured_final,
        target_um=target_um,
    )


def control_budget(
    dx_stat_um: float, sigma_drift_um: float, sigma_transp_um: float
) -> float:
    """Placement-accuracy quadrature: two position fits, inter-exposure
    drift, and the transport error."""
    for name, v in (
        ("dx_stat_um", dx_stat_um),
        ("sigma_drift_um", sigma_drift_um),
        ("sigma_transp_um", sigma_transp_um),
    ):
        if v < 0:
            raise ParameterError(f"{name} must be >= 0")
    return math.sqrt(2.0 * dx_stat_um**2 + sigma_drift_um**2 + sigma_transp_um**2)


def control_budget_inverse(
    sigma_control_um: float, dx_stat_um: float, sigma_drift_um: float
) -> float:
    """Transport error implied by a measured placement accuracy."""
    disc = sigma_control_um**2 - 2.0 * dx_stat_um**2 - sigma_drift_um**2
    if disc < 0:
        raise BudgetError(
            "no real transport error: control variance below the "
            "fit-and-drift floor"
        )
    return math.sqrt(disc)
