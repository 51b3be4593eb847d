"""Inverse-square propagation priors.

A source placed uniformly at random inside a ball of radius ``R`` around a
detector has a distance density ``3 r**2 / R**3``.  Pushing that density
through the inverse-square coupling ``a = 1 / (4 pi r**2)`` gives a prior on a
mixing-matrix element proportional to ``a**(-5/2)`` on
``[1 / (4 pi R**2), inf)``.

An optional inner radius ``r_min`` turns the ball into a shell, which caps the
coupling at ``1 / (4 pi r_min**2)``; the default ``r_min = 0`` keeps the plain
ball, whose coupling density is already integrable.
"""

from dataclasses import dataclass

import numpy as np

FOUR_PI = 4.0 * np.pi


@dataclass(frozen=True)
class BallPrior:
    """Uniform source position within ``R`` of a detector (shell if ``r_min > 0``)."""

    R: float
    r_min: float = 0.0

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError(f"R must be positive, got {self.R}")
        if not 0 <= self.r_min < self.R:
            raise ValueError(f"r_min must lie in [0, R), got {self.r_min}")

    @property
    def a_min(self) -> float:
        return coupling_lower_bound(self.R)

    @property
    def a_max(self) -> float:
        return np.inf if self.r_min == 0 else 1.0 / (FOUR_PI * self.r_min**2)


def coupling_lower_bound(R):
    """Smallest coupling reachable inside the ball, ``1 / (4 pi R**2)``."""
    return 1.0 / (FOUR_PI * R**2)


def _check_radius(R, r_min=0.0):
    if not R > 0:
        raise ValueError(f"R must be positive, got {R}")
    if not 0 <= r_min < R:
        raise ValueError(f"r_min must lie in [0, R), got {r_min}")


def distance_prior_pdf(r, R, r_min=0.0):
    """Density of the source-detector distance, ``3 r**2 / (R**3 - r_min**3)``.

    Zero outside ``[r_min, R]``.  Negative distances raise ``ValueError``.
    """
    _check_radius(R, r_min)
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("distance must be nonnegative")
    inside = (r >= r_min) & (r <= R)
    out = np.where(inside, 3.0 * r**2 / (R**3 - r_min**3), 0.0)
    return out[()] if out.ndim == 0 else out


def mixing_element_prior_const(R, r_min=0.0):
    """Normalizing constant ``c`` of ``p(a) = c * a**(-5/2)``."""
    _check_radius(R, r_min)
    return 3.0 / (16.0 * np.pi**1.5 * (R**3 - r_min**3))


def mixing_element_prior_pdf(a, R, r_min=0.0):
    """Prior density of a single inverse-square coupling coefficient.

    ``3 / (16 pi**1.5 R**3) * a**(-5/2)`` for ``a >= 1/(4 pi R**2)`` and zero
    below that bound (a source beyond ``R`` is impossible).  Non-positive
    ``a`` is outside the support and evaluates to 0.
    """
    a = np.asarray(a, dtype=float)
    c = mixing_element_prior_const(R, r_min)
    a_hi = np.inf if r_min == 0 else 1.0 / (FOUR_PI * r_min**2)
    inside = (a >= coupling_lower_bound(R)) & (a <= a_hi)
    safe = np.where(inside, a, 1.0)
    out = np.where(inside, c * safe**-2.5, 0.0)
    return out[()] if out.ndim == 0 else out


def mixing_element_log_prior(a, R, r_min=0.0):
    """Elementwise log of :func:`mixing_element_prior_pdf`; ``-inf`` off support."""
    a = np.asarray(a, dtype=float)
    c = mixing_element_prior_const(R, r_min)
    a_hi = np.inf if r_min == 0 else 1.0 / (FOUR_PI * r_min**2)
    inside = (a >= coupling_lower_bound(R)) & (a <= a_hi)
    safe = np.where(inside, a, 1.0)
    out = np.where(inside, np.log(c) - 2.5 * np.log(safe), -np.inf)
    return out[()] if out.ndim == 0 else out


def mixing_element_prior_cdf(a, R, r_min=0.0):
    """CDF of the coupling prior.

    Derived from the antiderivative ``-(2/3) c a**(-3/2)``; for the plain ball
    this is ``1 - (a_min / a)**1.5``.
    """
    a = np.asarray(a, dtype=float)
    c = mixing_element_prior_const(R, r_min)
    a_lo = coupling_lower_bound(R)
    a_hi = np.inf if r_min == 0 else 1.0 / (FOUR_PI * r_min**2)
    clipped = np.clip(a, a_lo, a_hi)
    out = (2.0 / 3.0) * c * (a_lo**-1.5 - clipped**-1.5)
    out = np.where(a < a_lo, 0.0, np.where(a >= a_hi, 1.0, out))
    return out[()] if out.ndim == 0 else out


def mixing_element_prior_ppf(p, R, r_min=0.0):
    """Inverse of :func:`mixing_element_prior_cdf` for ``p`` in ``[0, 1]``."""
    p = np.asarray(p, dtype=float)
    c = mixing_element_prior_const(R, r_min)
    a_lo = coupling_lower_bound(R)
    a_hi = np.inf if r_min == 0 else 1.0 / (FOUR_PI * r_min**2)
    base = np.maximum(a_lo**-1.5 - 1.5 * p / c, 0.0)
    with np.errstate(divide="ignore"):
        out = np.where(p >= 1.0, a_hi, base ** (-2.0 / 3.0))
    return out[()] if out.ndim == 0 else out


def sample_ball(R, n, seed, center=None):
    """Uniform points in a ball of radius ``R`` by rejection from the cube.

    Points are drawn in the unit ball and scaled by ``R``, so the same seed
    with a different ``R`` gives exactly rescaled positions.
    """
    _check_radius(R)
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    out = np.empty((n, 3))
    filled = 0
    while filled < n:
        # acceptance rate is pi/6, oversample to finish in about one pass
        batch = rng.uniform(-1.0, 1.0, size=(int(2.1 * (n - filled)) + 16, 3))
        keep = batch[np.einsum("ij,ij->i", batch, batch) <= 1.0]
        take = min(len(keep), n - filled)
        out[filled:filled + take] = keep[:take]
        filled += take
    out *= R
    if center is not None:
        out += np.asarray(center, dtype=float)
    return out


def monte_carlo_mixing_samples(R, n, seed):
    """Couplings ``1 / (4 pi r**2)`` for ``n`` uniform positions in the ball."""
    pts = sample_ball(R, n, seed)
    r2 = np.einsum("ij,ij->i", pts, pts)
    with np.errstate(divide="ignore"):
        return 1.0 / (FOUR_PI * r2)


@dataclass(frozen=True)
class HistogramComparison:
    edges: np.ndarray
    expected: np.ndarray
    observed: np.ndarray
    l1: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.l1 < self.tolerance


def l1_tolerance(n):
    """Pass threshold for the equal-probability-bin L1 statistic.

    0.02 at large ``n``.  The statistic's mean scales as ``1/sqrt(n)``
    (about ``7.9/sqrt(n)`` for 100 bins), so below 1e6 samples the threshold
    grows as ``0.1 * sqrt(1e4 / n)``, reaching 0.1 at the 1e4 minimum.
    """
    return max(0.02, 0.1 * np.sqrt(1e4 / n))


def compare_histogram(samples, R, bins=100, tolerance=None):
    """Compare coupling samples with the analytic prior on equal-probability bins.

    The L1 distance is ``sum |observed_fraction - 1/bins|``.
    """
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    probs = np.linspace(0.0, 1.0, bins + 1)
    edges = mixing_element_prior_ppf(probs, R)
    # binning through the CDF keeps the unbounded top bin well defined
    idx = np.minimum((mixing_element_prior_cdf(samples, R) * bins).astype(int), bins - 1)
    observed = np.bincount(idx, minlength=bins) / n
    expected = np.diff(probs)
    l1 = float(np.abs(observed - expected).sum())
    tol = l1_tolerance(n) if tolerance is None else tolerance
    return HistogramComparison(edges, expected, observed, l1, tol)


@dataclass(frozen=True)
class RescaleReport:
    R: float
    a: float
    distance_error: float
    coupling_error: float
    tolerance: float = 1e-12

    @property
    def passed(self) -> bool:
        return max(self.distance_error, self.coupling_error) < self.tolerance


def rescale_distance_prior(R, a, n_grid=1001):
    """Check invariance of both priors under the rescaling ``r -> a r, R -> a R``.

    Distance prior: ``a * p(a r | a R) == p(r | R)``.  Coupling prior (which
    maps ``A -> A / a**2``): ``p(A / a**2 | a R) / a**2 == p(A | R)``.  The
    returned report carries the max absolute error of each identity over a
    grid covering the support.
    """
    _check_radius(R)
    if not a > 0:
        raise ValueError(f"scale factor must be positive, got {a}")
    r = np.linspace(0.0, R, n_grid)
    lhs = a * distance_prior_pdf(a * r, a * R)
    rhs = distance_prior_pdf(r, R)
    d_err = float(np.max(np.abs(lhs - rhs)))

    # couplings from distances in [R/100, R); the exact support edge is left
    # out because rounding can put A/a**2 on either side of the rescaled bound
    A = 1.0 / (FOUR_PI * np.linspace(R / 100.0, R * (1 - 1e-9), n_grid) ** 2)
    lhs = mixing_element_prior_pdf(A / a**2, a * R) / a**2
    rhs = mixing_element_prior_pdf(A, R)
    c_err = float(np.max(np.abs(lhs - rhs)))
    return RescaleReport(R, a, d_err, c_err)
