"""Exception hierarchy shared by all latticeloc modules.

Every domain error carries a short machine-readable ``code`` so the CLI can
emit single-line ``ERROR:<code>:<message>`` diagnostics and exit with
status 1 (usage errors exit 2, handled by the CLI layer itself).
"""


class LatticeLocError(Exception):
    """Base class for all domain errors raised by this package."""

    code = "error"


class ParameterError(LatticeLocError):
    """A model parameter or argument is outside its valid domain."""

    code = "param"


class ConfigError(LatticeLocError):
    """A configuration file could not be parsed or contains unknown keys."""

    code = "config"


class CalibrationError(LatticeLocError):
    """The line-spread-function calibration found no acceptable solution."""

    code = "calibration"


class PlacementError(LatticeLocError):
    """An emitter was placed outside the camera frame."""

    code = "placement"


class NoPeakError(LatticeLocError):
    """No peak exceeding the noise threshold was found in the profile."""

    code = "no-peak"


class NoSecondPeakError(LatticeLocError):
    """A two-peak fit was requested but only one candidate peak exists."""

    code = "no-second-peak"


class OverlapError(LatticeLocError):
    """Two candidate peaks are closer than the resolvable-separation floor."""

    code = "overlap"


class TooFewSamplesError(LatticeLocError):
    """A statistic was requested on fewer samples than it needs."""

    code = "too-few-samples"


class DegenerateSamplesError(LatticeLocError):
    """Samples have no spread, so a distribution shape test is undefined."""

    code = "degenerate"


class AmbiguousDistanceError(LatticeLocError):
    """Distance uncertainty is too large to identify a unique well count."""

    code = "ambiguous"


class InsufficientSpanError(LatticeLocError):
    """Too few pairs or too narrow a distance span for a staircase fit."""

    code = "insufficient-span"


class TraceTooShortError(LatticeLocError):
    """A time trace is shorter than the requested analysis interval."""

    code = "trace-too-short"


class BudgetError(LatticeLocError):
    """An error-budget inversion has no real solution."""

    code = "budget"
