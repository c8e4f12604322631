"""Pair-distance statistics, lattice-well-count inference, and the
staircase fit of the cumulative distance distribution.

Distances between simultaneously trapped emitters are multiples of the
532 nm standing-wave period; averaging repeated distance measurements makes
the discretization resolvable and identifies the integer well count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar, nnls
from scipy.special import ndtr

from .errors import (
    AmbiguousDistanceError,
    InsufficientSpanError,
    ParameterError,
    TooFewSamplesError,
)
from .fitting import FitResult
from .model import LatticeConfig


@dataclass(frozen=True)
class PairCampaignResult:
    """Per-pair distance statistics over repeated pictures."""

    distances_um: tuple[float, ...]
    mean_um: float
    std_um: float          # single-picture spread (N-1 denominator)
    std_of_mean_um: float  # std_um / sqrt(N_pic)

    @property
    def n_pic(self) -> int:
        return len(self.distances_um)


@dataclass(frozen=True)
class WellAssignment:
    n: int
    residual_um: float       # d_mean - n * period, in (-period/2, period/2]
    misassign_prob: float    # two-sided Gaussian tail beyond the half-period


@dataclass(frozen=True)
class StaircaseFit:
    step_width_um: float
    step_positions_um: tuple[float, ...]
    weights: tuple[float, ...]
    chi2: float


def pair_distance(fit: FitResult) -> float:
    """Separation from a converged two-peak fit (centers are sorted)."""
    if fit.n_peaks != 2:
        raise ParameterError("pair_distance needs a two-peak fit result")
    if not fit.converged:
        raise ParameterError("pair_distance needs a converged fit")
    return fit.centers_um[1] - fit.centers_um[0]


def average_distance(distances_um) -> PairCampaignResult:
    """Sample mean, single-picture std and std of the mean."""
    d = tuple(float(v) for v in distances_um)
    if len(d) < 2:
        raise TooFewSamplesError(f"need >= 2 distances, got {len(d)}")
    arr = np.asarray(d)
    std = float(arr.std(ddof=1))
    return PairCampaignResult(
        distances_um=d,
        mean_um=float(arr.mean()),
        std_um=std,
        std_of_mean_um=std / math.sqrt(len(d)),
    )


def infer_well_count(
    d_mean_um: float, d_mean_unc_um: float, lattice: LatticeConfig
) -> WellAssignment:
    """Nearest well count n = round(d/period) with the probability that the
    true count differs, modeling the distance error as Gaussian.

    Refuses when the uncertainty reaches half a period: every count is then
    plausible.  A returned probability >= 0.5 flags an unreliable
    assignment (distance sitting near a half-period boundary).
    """
    if d_mean_um <= 0:
        raise ParameterError("d_mean_um must be > 0")
    if d_mean_unc_um <= 0:
        raise ParameterError("d_mean_unc_um must be > 0")
    period = lattice.period_um
    if d_mean_unc_um >= period / 2:
        raise AmbiguousDistanceError(
            f"uncertainty {d_mean_unc_um:.3f} um >= period/2 = {period / 2:.3f} um: "
            "well count is ambiguous"
        )
    n = math.floor(d_mean_um / period + 0.5)
    residual = d_mean_um - n * period
    margin = period / 2 - abs(residual)
    prob = min(1.0, 2.0 * float(ndtr(-margin / d_mean_unc_um)))
    return WellAssignment(n=n, residual_um=residual, misassign_prob=prob)


def staircase_fit(
    d_means_um,
    lattice: LatticeConfig | None = None,
    min_pairs: int = 20,
    min_steps: int = 3,
) -> StaircaseFit:
    """Fit the empirical CDF of mean distances with error-function steps
    fixed at integer multiples of the lattice period.

    Free parameters are the per-step weights (non-negative, summing to one)
    and one common step width, the reported distance resolution.  For a
    trial width the weights follow from non-negative least squares; the
    width minimizes the residual via a bounded scalar search.
    """
    lattice = lattice or LatticeConfig()
    period = lattice.period_um
    d = np.sort(np.asarray([float(v) for v in d_means_um]))
    if d.size < min_pairs:
        raise InsufficientSpanError(f"need >= {min_pairs} pairs, got {d.size}")
    n_values = np.unique(np.floor(d / period + 0.5).astype(int))
    if n_values.size < min_steps:
        raise InsufficientSpanError(
            f"distances span {n_values.size} steps, need >= {min_steps}"
        )
    positions = n_values * period
    # Evaluate on a uniform grid rather than at the samples: between steps
    # both the empirical CDF and the zero-width model are flat, so the
    # zero-noise residual vanishes as the width shrinks.
    grid = np.arange(positions[0] - period / 2, positions[-1] + period / 2, period / 50)
    ecdf = np.searchsorted(d, grid, side="right") / d.size
    constraint_scale = 10.0  # soft row enforcing sum(weights) = 1

    def sum_sq(log10_width: float):
        width = 10.0**log10_width
        design = ndtr((grid[:, None] - positions[None, :]) / width)
        a = np.vstack([design, np.full((1, positions.size), constraint_scale)])
        b = np.concatenate([ecdf, [constraint_scale]])
        weights, _ = nnls(a, b)
        resid = design @ weights - ecdf
        return float(resid @ resid), weights

    result = minimize_scalar(
        lambda t: sum_sq(t)[0],
        bounds=(math.log10(1e-5), math.log10(period)),
        method="bounded",
        options={"xatol": 1e-6},
    )
    width = 10.0**float(result.x)
    chi2, weights = sum_sq(float(result.x))
    total = weights.sum()
    if total > 0:
        weights = weights / total
    return StaircaseFit(
        step_width_um=width,
        step_positions_um=tuple(float(p) for p in positions),
        weights=tuple(float(w) for w in weights),
        chi2=chi2,
    )
