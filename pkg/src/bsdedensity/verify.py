"""Kernel density estimates, envelope comparison and the positivity report.

The density theorems assert that the law of Y_t (resp. Z_t) has a density
squeezed between the Gaussian envelopes; the checks here compare a
kernel density estimate of the simulated samples against those envelopes on
the central quantile range (KDE tails are unreliable and the bounds hold for
almost all z).  Absolute continuity of Z_t is probed through the sampled
positivity of D_theta Z_t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .nvdensity import Envelope

__all__ = [
    "DensityEstimate",
    "DensityReport",
    "BouleauHirschReport",
    "kde",
    "envelope_check",
    "positivity_report",
]

_GAUSS_NORM = 1.0 / np.sqrt(2.0 * np.pi)
_ROUGHNESS = 1.0 / (2.0 * np.sqrt(np.pi))  # integral of the squared Gaussian kernel


@dataclass
class DensityEstimate:
    """Gaussian-kernel density estimate over a fixed grid."""

    z_grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    n_samples: int
    samples_sorted: np.ndarray

    def standard_error(self) -> np.ndarray:
        """Pointwise KDE standard error sqrt(rho R(K) / (n h))."""
        return np.sqrt(
            np.maximum(self.density, 0.0) * _ROUGHNESS / (self.n_samples * self.bandwidth)
        )

    def bias_estimate(self) -> np.ndarray:
        """Leading-order smoothing bias h^2 |rho''| / 2.

        rho'' is the exact second derivative of the kernel estimate
        (mean of Gaussian-kernel second derivatives), which tracks the
        curvature of the underlying density to O(h^2)."""
        h = self.bandwidth
        x = self.samples_sorted
        n = self.n_samples
        d2 = np.empty_like(self.z_grid)
        chunk = max(1, int(4e6 // max(n, 1)))
        for start in range(0, len(self.z_grid), chunk):
            zz = self.z_grid[start : start + chunk, None]
            u = (zz - x[None, :]) / h
            d2[start : start + chunk] = (
                (u * u - 1.0) * np.exp(-0.5 * u * u)
            ).mean(axis=1)
        d2 *= _GAUSS_NORM / h**3
        return 0.5 * h * h * np.abs(d2)

    def sample_quantile(self, q: float) -> float:
        return float(np.quantile(self.samples_sorted, q))


def kde(samples: np.ndarray, grid: np.ndarray, bandwidth: float | None = None) -> DensityEstimate:
    """Gaussian-kernel estimate; default bandwidth 1.06 sigma n^{-1/5}.

    The default rule needs at least 1000 samples; pass an explicit bandwidth
    for smaller sets.  Degenerate (zero-variance) samples are rejected.
    """
    x = np.asarray(samples, dtype=float).ravel()
    z = np.asarray(grid, dtype=float)
    n = x.size
    sd = float(x.std())
    if sd == 0.0:
        raise DomainError("samples are degenerate (zero variance); no density exists")
    if bandwidth is None:
        if n < 1000:
            raise DomainError(
                "the default bandwidth rule needs >= 1000 samples; "
                "pass bandwidth explicitly"
            )
        bandwidth = 1.06 * sd * n ** (-0.2)
    if bandwidth <= 0:
        raise DomainError("bandwidth must be positive")
    dens = np.empty_like(z)
    chunk = max(1, int(4e6 // max(n, 1)))
    for start in range(0, len(z), chunk):
        zz = z[start : start + chunk, None]
        u = (zz - x[None, :]) / bandwidth
        dens[start : start + chunk] = np.exp(-0.5 * u * u).mean(axis=1)
    dens *= _GAUSS_NORM / bandwidth
    return DensityEstimate(
        z_grid=z,
        density=dens,
        bandwidth=float(bandwidth),
        n_samples=n,
        samples_sorted=np.sort(x),
    )


@dataclass
class DensityReport:
    """Outcome of the KDE-vs-envelope comparison."""

    verdict: str  # "pass" | "fail"
    comparison_range: tuple[float, float]
    quantile_range: float
    tol: float
    max_violation_fraction: float
    lower_violation_fraction: float
    upper_violation_fraction: float
    lower_max_violation: float
    upper_max_violation: float
    n_compared: int
    envelope: Envelope = field(repr=False)
    kde: DensityEstimate = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "comparison_range": list(self.comparison_range),
            "quantile_range": self.quantile_range,
            "tol": self.tol,
            "max_violation_fraction": self.max_violation_fraction,
            "lower_violation_fraction": self.lower_violation_fraction,
            "upper_violation_fraction": self.upper_violation_fraction,
            "lower_max_violation": self.lower_max_violation,
            "upper_max_violation": self.upper_max_violation,
            "n_compared": self.n_compared,
        }


def envelope_check(
    kde_est: DensityEstimate,
    env: Envelope,
    quantile_range: float = 0.99,
    tol: float = 0.0,
    max_violation_fraction: float = 0.0,
) -> DensityReport:
    """Check lower(z) - slack <= kde(z) <= upper(z) + slack on the central range.

    The slack at z is tol * upper(z) plus the KDE's own error budget (three
    standard errors plus the leading smoothing bias), so the comparison is
    scale-free across problems and tol = 0 already tolerates pure estimation
    error.  Violation magnitudes are reported relative to the upper envelope.
    The verdict passes iff the violation fraction on each side is at most
    ``max_violation_fraction``.
    """
    if not 0 < quantile_range < 1:
        raise DomainError("quantile_range must lie in (0, 1)")
    if not np.array_equal(kde_est.z_grid, env.z_grid):
        raise DomainError("kde and envelope grids are not aligned")
    lo = kde_est.sample_quantile(0.5 * (1.0 - quantile_range))
    hi = kde_est.sample_quantile(1.0 - 0.5 * (1.0 - quantile_range))
    mask = (kde_est.z_grid >= lo) & (kde_est.z_grid <= hi)
    if not mask.any():
        raise DomainError("empty comparison range: grid misses the central quantiles")

    dens = kde_est.density[mask]
    lower = env.lower[mask]
    upper = env.upper[mask]
    slack = (
        tol * upper
        + 3.0 * kde_est.standard_error()[mask]
        + kde_est.bias_estimate()[mask]
    )

    low_excess = (lower - slack) - dens
    high_excess = dens - (upper + slack)
    low_viol = low_excess > 0
    high_viol = high_excess > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        low_mag = float(np.max(np.where(low_viol, (lower - dens) / upper, 0.0), initial=0.0))
        high_mag = float(np.max(np.where(high_viol, (dens - upper) / upper, 0.0), initial=0.0))
    frac_low = float(np.mean(low_viol))
    frac_high = float(np.mean(high_viol))
    verdict = (
        "pass"
        if frac_low <= max_violation_fraction and frac_high <= max_violation_fraction
        else "fail"
    )
    return DensityReport(
        verdict=verdict,
        comparison_range=(lo, hi),
        quantile_range=quantile_range,
        tol=tol,
        max_violation_fraction=max_violation_fraction,
        lower_violation_fraction=frac_low,
        upper_violation_fraction=frac_high,
        lower_max_violation=low_mag,
        upper_max_violation=high_mag,
        n_compared=int(mask.sum()),
        envelope=env,
        kde=kde_est,
    )


@dataclass
class BouleauHirschReport:
    """Sampled positivity of D_theta Z_t: the absolute-continuity criterion."""

    min_value: float
    nonpositive_fraction: float
    verdict: str
    witness_indices: list[int]
    n_samples: int
    noise_floor: float

    def to_dict(self) -> dict:
        return {
            "min_value": self.min_value,
            "nonpositive_fraction": self.nonpositive_fraction,
            "verdict": self.verdict,
            "witness_indices": self.witness_indices,
            "n_samples": self.n_samples,
            "noise_floor": self.noise_floor,
        }


def positivity_report(dz_samples: np.ndarray, noise_floor: float = 0.0) -> BouleauHirschReport:
    """Report extrema and the non-positive fraction of the sampled D_theta Z_t.

    Almost-sure positivity of the derivative makes the law of Z_t absolutely
    continuous, so the verdict passes iff the non-positive fraction does not
    exceed the declared Monte Carlo noise floor.
    """
    flat = np.asarray(dz_samples, dtype=float).ravel()
    if flat.size == 0:
        raise DomainError("positivity report needs a non-empty sample set")
    nonpos = flat <= 0.0
    frac = float(nonpos.mean())
    witnesses = np.nonzero(nonpos)[0][:20]
    return BouleauHirschReport(
        min_value=float(flat.min()),
        nonpositive_fraction=frac,
        verdict="pass" if frac <= noise_floor else "fail",
        witness_indices=[int(i) for i in witnesses],
        n_samples=int(flat.size),
        noise_floor=noise_floor,
    )
