"""Instrument parameters, the double-Gaussian line spread function and its
calibration, and the deterministic random-number-stream contract.

Internal unit conventions (used consistently across the package):

* lengths in micrometers (um),
* times in seconds,
* camera signal in counts, photon rates in photons per second.

All parameter types are frozen dataclasses; operations on them are pure
functions, so instances can be shared freely between parallel workers.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .errors import CalibrationError, ConfigError, ParameterError

DEFAULT_WAVELENGTH_UM = 1.064
DEFAULT_PIXEL_UM = 0.933
DEFAULT_GAIN = 350.0
DEFAULT_W_AX_UM = 1.3
DEFAULT_GAUSS_BIAS_UM = 0.042

# Half-width of the Gaussian-bias measurement window used during LSF
# calibration, in units of the profile half-width.  Chosen to span the same
# physical range as the profile fitters' default window (+-8 bins of
# 0.933 um at the default 1.3 um half-width), so the calibrated bias and the
# bias seen on camera-sampled profiles agree.
_CAL_WINDOW_HALFWIDTHS = 8 * DEFAULT_PIXEL_UM / DEFAULT_W_AX_UM


@dataclass(frozen=True)
class LatticeConfig:
    """Standing-wave trap geometry: wells repeat every half wavelength."""

    wavelength_um: float = DEFAULT_WAVELENGTH_UM
    period_um: float | None = None
    phase_origin_um: float = 0.0

    def __post_init__(self):
        if self.period_um is None:
            object.__setattr__(self, "period_um", self.wavelength_um / 2.0)

    def well_position(self, n: int) -> float:
        return self.phase_origin_um + n * self.period_um

    def nearest_well(self, x_um: float, origin_shift_um: float = 0.0) -> float:
        """Center of the well closest to ``x_um`` on a lattice whose origin
        is displaced by ``origin_shift_um``."""
        origin = self.phase_origin_um + origin_shift_um
        n = math.floor((x_um - origin) / self.period_um + 0.5)
        return origin + n * self.period_um


@dataclass(frozen=True)
class CameraModel:
    """Intensified camera geometry and response, in object-plane units.

    The default frame spans 74.6 um x 14.9 um: wide enough for the 5 um MOT
    position spread around a loading point 30 um from a placement target,
    with a full fit window of margin on either side.
    """

    pixel_um: float = DEFAULT_PIXEL_UM
    gain: float = DEFAULT_GAIN  # mean counts per detected photon
    frame_w: int = 80
    frame_h: int = 16
    exposure_s: float = 1.0
    readout_s: float = 0.5

    @property
    def width_um(self) -> float:
        return self.frame_w * self.pixel_um

    @property
    def height_um(self) -> float:
        return self.frame_h * self.pixel_um


@dataclass(frozen=True)
class NoiseModel:
    """Photon statistics, binned-background statistics, and trap-position
    fluctuation scale.

    ``bg_offset`` and ``bg_noise`` are counts per vertical bin for a 1 s
    exposure; the offset scales linearly with exposure time, the noise rms
    with its square root.  ``fluct_1s_um`` is the rms axial displacement of
    the standing wave accumulated over 1 s.
    """

    photons_per_s: float = 200.0
    bg_offset: float = 2300.0
    bg_noise: float = 300.0
    fluct_1s_um: float = 0.042
    drift_model: str = "paper-additive"  # or "trace-based"


@dataclass(frozen=True)
class AtomEnsemble:
    """Axial emitter positions (normally lattice-well centers) plus the
    radial spot width, which vertical binning later removes."""

    positions_um: tuple[float, ...]
    radial_sigma_um: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "positions_um", tuple(float(p) for p in self.positions_um))


# ---------------------------------------------------------------------------
# Line spread function
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LsfModel:
    """Sum of a narrow and a broad Gaussian (height ratio ``height_ratio``
    narrow:broad, width ratio 1:``width_ratio``), the broad one displaced by
    ``offset_um``.  Peak-normalized: :func:`lsf_eval` returns 1 at the
    composite maximum, and its argument is measured from that maximum.

    Derived attributes (computed once, cached on the instance):

    * ``sigma2_um``       broad-component width,
    * ``peak_offset_um``  position of the composite maximum in the raw frame
      where the narrow Gaussian sits at 0,
    * ``peak_value``      raw profile value at the maximum,
    * ``area_um``         integral of the raw profile (for the photon
      density normalization),
    * ``narrow_weight``   probability that a photon comes from the narrow
      component.
    """

    sigma1_um: float
    width_ratio: float = 3.2
    height_ratio: float = 4.4
    offset_um: float = 0.0

    sigma2_um: float = field(init=False, repr=False)
    peak_offset_um: float = field(init=False, repr=False)
    peak_value: float = field(init=False, repr=False)
    area_um: float = field(init=False, repr=False)
    narrow_weight: float = field(init=False, repr=False)

    def __post_init__(self):
        if not (self.sigma1_um > 0 and self.width_ratio > 0 and self.height_ratio > 0):
            raise ParameterError(
                "LsfModel requires sigma1_um, width_ratio and height_ratio > 0"
            )
        s2 = self.width_ratio * self.sigma1_um
        object.__setattr__(self, "sigma2_um", s2)
        lo = min(0.0, self.offset_um) - self.sigma1_um
        hi = max(0.0, self.offset_um) + self.sigma1_um
        res = minimize_scalar(
            lambda u: -self._raw(u),
            bounds=(lo, hi),
            method="bounded",
            options={"xatol": 1e-13},
        )
        object.__setattr__(self, "peak_offset_um", float(res.x))
        object.__setattr__(self, "peak_value", float(self._raw(res.x)))
        area = math.sqrt(2 * math.pi) * (self.sigma1_um + s2 / self.height_ratio)
        object.__setattr__(self, "area_um", area)
        object.__setattr__(
            self, "narrow_weight", self.sigma1_um / (self.sigma1_um + s2 / self.height_ratio)
        )

    def _raw(self, u):
        """Two-Gaussian sum in the raw frame (narrow component centered at 0)."""
        u = np.asarray(u, dtype=float)
        g1 = np.exp(-0.5 * (u / self.sigma1_um) ** 2)
        g2 = np.exp(-0.5 * ((u - self.offset_um) / self.sigma2_um) ** 2)
        return g1 + g2 / self.height_ratio

    def _raw_grad(self, u):
        u = np.asarray(u, dtype=float)
        g1 = np.exp(-0.5 * (u / self.sigma1_um) ** 2)
        g2 = np.exp(-0.5 * ((u - self.offset_um) / self.sigma2_um) ** 2)
        return -u / self.sigma1_um**2 * g1 - (u - self.offset_um) / (
            self.height_ratio * self.sigma2_um**2
        ) * g2


def lsf_eval(model: LsfModel, x_um):
    """Peak-normalized profile value at offset ``x_um`` from the maximum."""
    return model._raw(np.asarray(x_um, float) + model.peak_offset_um) / model.peak_value


def lsf_grad(model: LsfModel, x_um):
    """Derivative of :func:`lsf_eval` with respect to ``x_um``."""
    return model._raw_grad(np.asarray(x_um, float) + model.peak_offset_um) / model.peak_value


def lsf_density(model: LsfModel, x_um):
    """Photon-position probability density (integrates to 1 over ``x_um``)."""
    return model._raw(np.asarray(x_um, float) + model.peak_offset_um) / model.area_um


def lsf_cdf(model: LsfModel, x_um):
    """Cumulative photon-position distribution, argument measured from the
    profile maximum."""
    u = np.asarray(x_um, float) + model.peak_offset_um
    p1 = model.narrow_weight
    c1 = _norm_cdf(u / model.sigma1_um)
    c2 = _norm_cdf((u - model.offset_um) / model.sigma2_um)
    return p1 * c1 + (1.0 - p1) * c2


def lsf_sample(model: LsfModel, rng: np.random.Generator, n: int):
    """Draw ``n`` photon offsets from the peak-centered LSF density."""
    narrow = rng.random(n) < model.narrow_weight
    draws = np.where(
        narrow,
        rng.normal(0.0, model.sigma1_um, n),
        rng.normal(model.offset_um, model.sigma2_um, n),
    )
    return draws - model.peak_offset_um


def lsf_bin_average(model: LsfModel, x_um, half_width_um: float):
    """Profile averaged over a bin of half-width ``half_width_um`` centered
    at ``x_um``, normalized to 1 for the bin centered on the maximum.

    This is the shape that pixel-integrated counts actually follow; fitting
    the point-evaluated profile to binned data instead leaves a
    few-nanometer center systematic.
    """
    h = half_width_um
    norm = lsf_cdf(model, h) - lsf_cdf(model, -h)
    return (lsf_cdf(model, np.asarray(x_um, float) + h) - lsf_cdf(model, np.asarray(x_um, float) - h)) / norm


def lsf_bin_average_grad(model: LsfModel, x_um, half_width_um: float):
    """Derivative of :func:`lsf_bin_average` with respect to ``x_um``."""
    h = half_width_um
    norm = lsf_cdf(model, h) - lsf_cdf(model, -h)
    x = np.asarray(x_um, float)
    return (lsf_density(model, x + h) - lsf_density(model, x - h)) / norm


def _norm_cdf(z):
    from scipy.special import ndtr

    return ndtr(z)


def measure_half_width(model: LsfModel) -> float:
    """Half-width at 1/sqrt(e) of the maximum: half the full width between
    the two crossings (equals one sigma for a pure Gaussian)."""
    level = 1.0 / math.sqrt(math.e)
    span = 8.0 * model.sigma2_um

    def crossing(sign):
        return brentq(
            lambda w: lsf_eval(model, sign * w) - level, 1e-9, span, xtol=1e-12
        )

    return 0.5 * (crossing(-1.0) + crossing(+1.0))


def measure_gaussian_bias(
    model: LsfModel,
    window_halfwidths: float = _CAL_WINDOW_HALFWIDTHS,
    points_per_halfwidth: int = 32,
) -> float:
    """Center displacement obtained by fitting a simple Gaussian to a
    noise-free, finely sampled rendering of the profile.

    The sampling window spans ``window_halfwidths`` profile half-widths on
    each side of the maximum with ``points_per_halfwidth`` samples per
    half-width, so the measurement is invariant under rescaling the model.
    Positive bias means the fitted center lies on the broad component's side.
    """
    from .fitting import fit_gaussian_1d

    w = measure_half_width(model)
    step = w / points_per_halfwidth
    n = int(math.ceil(window_halfwidths * w / step))
    x = np.arange(-n, n + 1) * step
    from .imaging import BinnedProfile

    profile = BinnedProfile(counts=lsf_eval(model, x), x_um=x)
    fit = fit_gaussian_1d(
        profile, window=(0, x.size), sigma_init_um=w, weighting="uniform"
    )
    if not fit.converged:
        raise CalibrationError("Gaussian bias fit did not converge")
    return fit.center_um


def calibrate_lsf(
    w_ax_target_um: float = DEFAULT_W_AX_UM,
    gaussian_bias_target_um: float = DEFAULT_GAUSS_BIAS_UM,
    width_ratio: float = 3.2,
    height_ratio: float = 4.4,
    tol_um: float = 1e-3,
) -> LsfModel:
    """Pin (sigma1, offset) of the double-Gaussian profile to the two
    published observables: the 1/sqrt(e) half-width and the center bias of a
    simple-Gaussian fit.

    Both constraints scale linearly with the model, so the search reduces to
    a one-dimensional root-find on the offset/sigma1 ratio followed by an
    overall rescale.  Raises :class:`CalibrationError`, listing the achieved
    residuals, when no ratio in the search box matches or the verification
    misses the targets by more than ``tol_um``.
    """
    if w_ax_target_um <= 0:
        raise ParameterError("w_ax_target_um must be > 0")
    if gaussian_bias_target_um < 0:
        raise ParameterError("gaussian_bias_target_um must be >= 0")
    if gaussian_bias_target_um >= w_ax_target_um / 5:
        raise ParameterError("bias target must be small compared to the half-width")

    target_ratio = gaussian_bias_target_um / w_ax_target_um

    def shape_ratio(r: float) -> float:
        m = LsfModel(1.0, width_ratio, height_ratio, r)
        return measure_gaussian_bias(m) / measure_half_width(m)

    if gaussian_bias_target_um == 0.0:
        r_star = 0.0
    else:
        r_lo, f_lo = 0.0, -target_ratio
        r_star = None
        for r_hi in (0.25, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0):
            f_hi = shape_ratio(r_hi) - target_ratio
            if f_hi == 0.0:
                r_star = r_hi
                break
            if f_lo * f_hi < 0:
                r_star = brentq(
                    lambda r: shape_ratio(r) - target_ratio, r_lo, r_hi, xtol=1e-10
                )
                break
            r_lo, f_lo = r_hi, f_hi
        if r_star is None:
            raise CalibrationError(
                f"no offset/sigma ratio in [0, 3] gives bias/width = {target_ratio:.3e}"
            )

    shape = LsfModel(1.0, width_ratio, height_ratio, r_star)
    scale = w_ax_target_um / measure_half_width(shape)
    model = LsfModel(scale, width_ratio, height_ratio, r_star * scale)

    w_achieved = measure_half_width(model)
    bias_achieved = measure_gaussian_bias(model)
    if (
        abs(w_achieved - w_ax_target_um) > tol_um
        or abs(bias_achieved - gaussian_bias_target_um) > tol_um
    ):
        raise CalibrationError(
            "calibration residuals too large: "
            f"half-width {w_achieved:.6f} um (target {w_ax_target_um}), "
            f"bias {bias_achieved:.6f} um (target {gaussian_bias_target_um})"
        )
    return model


# ---------------------------------------------------------------------------
# Deterministic randomness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RngStreams:
    """Derives statistically independent, reproducible generator streams
    from one 64-bit master seed.

    ``stream(i)`` depends only on ``(master_seed, i)``, so campaigns produce
    identical results regardless of trial execution order or parallelism.
    """

    master_seed: int

    def stream(self, index: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(self.master_seed, spawn_key=(index,))
        )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _is_unimodal(model: LsfModel) -> bool:
    span = 8.0 * model.sigma2_um
    x = np.linspace(-span, span, 4001)
    y = model._raw(x)
    interior = (y[1:-1] > y[:-2]) & (y[1:-1] >= y[2:])
    return int(np.count_nonzero(interior)) <= 1


def validate_config(
    lattice: LatticeConfig | None = None,
    camera: CameraModel | None = None,
    lsf: LsfModel | None = None,
    noise: NoiseModel | None = None,
    atoms: AtomEnsemble | None = None,
) -> list[str]:
    """Check every type invariant and return all violations (empty = ok)."""
    bad: list[str] = []
    if lattice is not None:
        if not lattice.wavelength_um > 0:
            bad.append("LatticeConfig: wavelength_um > 0")
        elif lattice.period_um != lattice.wavelength_um / 2.0:
            bad.append("LatticeConfig: period_um = wavelength_um / 2 exactly")
    if camera is not None:
        if not camera.pixel_um > 0:
            bad.append("CameraModel: pixel_um > 0")
        if not camera.gain >= 1:
            bad.append("CameraModel: gain >= 1")
        if not camera.exposure_s > 0:
            bad.append("CameraModel: exposure_s > 0")
        if camera.frame_w < 1 or camera.frame_h < 1:
            bad.append("CameraModel: frame dimensions >= 1")
        if camera.readout_s < 0:
            bad.append("CameraModel: readout_s >= 0")
    if lsf is not None:
        if not lsf.sigma1_um > 0:
            bad.append("LsfModel: sigma1_um > 0")
        if not _is_unimodal(lsf):
            bad.append("LsfModel: composite profile unimodal")
    if noise is not None:
        if noise.photons_per_s < 0:
            bad.append("NoiseModel: photons_per_s >= 0")
        if noise.bg_offset < 0 or noise.bg_noise < 0:
            bad.append("NoiseModel: background levels >= 0")
        if noise.fluct_1s_um < 0:
            bad.append("NoiseModel: fluct_1s_um >= 0")
        if noise.drift_model not in ("paper-additive", "trace-based"):
            bad.append("NoiseModel: drift_model in {paper-additive, trace-based}")
    if atoms is not None:
        if atoms.radial_sigma_um <= 0:
            bad.append("AtomEnsemble: radial_sigma_um > 0")
    return bad


# ---------------------------------------------------------------------------
# Aggregate instrument configuration and its flat key=value file format
# ---------------------------------------------------------------------------

_CONFIG_KEYS = (
    "wavelength_um",
    "pixel_um",
    "gain",
    "frame_w",
    "frame_h",
    "exposure_s",
    "readout_s",
    "photons_per_s",
    "bg_offset",
    "bg_noise",
    "fluct_1s_nm",
    "drift_model",
    "w_ax_um",
    "gauss_bias_nm",
    "seed",
)


@dataclass(frozen=True)
class Instrument:
    """Everything a campaign needs: trap, camera, noise statistics, the LSF
    calibration targets and the master seed."""

    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    camera: CameraModel = field(default_factory=CameraModel)
    noise: NoiseModel = field(default_factory=NoiseModel)
    w_ax_um: float = DEFAULT_W_AX_UM
    gauss_bias_nm: float = DEFAULT_GAUSS_BIAS_UM * 1e3
    seed: int = 0

    def calibrate(self) -> LsfModel:
        return calibrate_lsf(self.w_ax_um, self.gauss_bias_nm * 1e-3)

    def streams(self) -> RngStreams:
        return RngStreams(self.seed)

    def config_text(self) -> str:
        """Render back to the flat key=value format (canonical key order)."""
        values = {
            "wavelength_um": self.lattice.wavelength_um,
            "pixel_um": self.camera.pixel_um,
            "gain": self.camera.gain,
            "frame_w": self.camera.frame_w,
            "frame_h": self.camera.frame_h,
            "exposure_s": self.camera.exposure_s,
            "readout_s": self.camera.readout_s,
            "photons_per_s": self.noise.photons_per_s,
            "bg_offset": self.noise.bg_offset,
            "bg_noise": self.noise.bg_noise,
            "fluct_1s_nm": self.noise.fluct_1s_um * 1e3,
            "drift_model": self.noise.drift_model,
            "w_ax_um": self.w_ax_um,
            "gauss_bias_nm": self.gauss_bias_nm,
            "seed": self.seed,
        }
        return "".join(f"{k} = {values[k]!r}\n" for k in _CONFIG_KEYS).replace("'", "")

    def config_hash(self) -> str:
        return hashlib.sha256(self.config_text().encode()).hexdigest()[:16]


def parse_config_text(text: str) -> Instrument:
    """Parse the flat ``key = value`` configuration format ('#' comments)."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value

    def f(key: str, default: float) -> float:
        try:
            return float(raw[key]) if key in raw else default
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: not a number: {raw[key]!r}") from exc

    def i(key: str, default: int) -> int:
        try:
            return int(raw[key]) if key in raw else default
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: not an integer: {raw[key]!r}") from exc

    drift_model = raw.get("drift_model", "paper-additive")
    if drift_model not in ("paper-additive", "trace-based"):
        raise ConfigError(f"key 'drift_model': unknown mode {drift_model!r}")

    instrument = Instrument(
        lattice=LatticeConfig(wavelength_um=f("wavelength_um", DEFAULT_WAVELENGTH_UM)),
        camera=CameraModel(
            pixel_um=f("pixel_um", DEFAULT_PIXEL_UM),
            gain=f("gain", DEFAULT_GAIN),
            frame_w=i("frame_w", 80),
            frame_h=i("frame_h", 16),
            exposure_s=f("exposure_s", 1.0),
            readout_s=f("readout_s", 0.5),
        ),
        noise=NoiseModel(
            photons_per_s=f("photons_per_s", 200.0),
            bg_offset=f("bg_offset", 2300.0),
            bg_noise=f("bg_noise", 300.0),
            fluct_1s_um=f("fluct_1s_nm", 42.0) * 1e-3,
            drift_model=drift_model,
        ),
        w_ax_um=f("w_ax_um", DEFAULT_W_AX_UM),
        gauss_bias_nm=f("gauss_bias_nm", DEFAULT_GAUSS_BIAS_UM * 1e3),
        seed=i("seed", 0),
    )
    violations = validate_config(
        lattice=instrument.lattice, camera=instrument.camera, noise=instrument.noise
    )
    if violations:
        raise ConfigError("; ".join(violations))
    return instrument


def load_config(path: str | Path) -> Instrument:
    return parse_config_text(Path(path).read_text())
