"""Source amplitude densities and mixing-matrix priors.

Every amplitude family exposes ``log_density`` and ``score`` (the derivative of
the log density).  The score is the nonlinearity of the Infomax learning rule:
the logistic family reproduces the classic ``1 - 2 g(u)`` rule, the Laplacian
gives ``-sign(u)`` and the Gaussian gives ``-u``.

All families are strictly positive on the real line, so the score is defined
everywhere; it raises :class:`DomainError` only for non-finite input.
"""

import numpy as np
from scipy.special import expit

from . import propagation

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class DomainError(ValueError):
    """Density or score evaluated outside its domain."""


def _finite(u):
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise DomainError("amplitude must be finite")
    return u


class AmplitudeDensity:
    """Base class for a source amplitude density q(s)."""

    name = "abstract"

    def log_density(self, s):
        raise NotImplementedError

    def score(self, u):
        raise NotImplementedError

    def params(self) -> dict:
        raise NotImplementedError

    def breakpoints(self):
        """Points where the density is not smooth (for quadrature)."""
        return ()

    def to_dict(self) -> dict:
        return {"family": self.name, **self.params()}

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}({args})"

    def __eq__(self, other):
        return type(self) is type(other) and self.params() == other.params()

    def __hash__(self):
        return hash((type(self), tuple(self.params().items())))


class LogisticDensity(AmplitudeDensity):
    """Derivative of the logistic sigmoid, ``g'(u) = g(u) (1 - g(u))``.

    With scale ``b`` the density is ``g'((s - loc)/b) / b`` and the score is
    ``(1 - 2 g((u - loc)/b)) / b``.
    """

    name = "logistic"

    def __init__(self, scale=1.0, loc=0.0):
        if not scale > 0:
            raise ValueError(f"scale must be positive, got {scale}")
        self.scale = float(scale)
        self.loc = float(loc)

    def log_density(self, s):
        z = np.abs((_finite(s) - self.loc) / self.scale)
        # log g'(z) = -z - 2 log(1 + e^-z), stable for large |z|
        return -z - 2.0 * np.log1p(np.exp(-z)) - np.log(self.scale)

    def score(self, u):
        z = (_finite(u) - self.loc) / self.scale
        return (1.0 - 2.0 * expit(z)) / self.scale

    def params(self):
        return {"scale": self.scale, "loc": self.loc}


class LaplacianDensity(AmplitudeDensity):
    """``exp(-|s - loc| / b) / (2 b)``.

    The score is ``-sign(u - loc) / b``; at the kink it returns 0, the
    midpoint of the one-sided derivatives.
    """

    name = "laplacian"

    def __init__(self, scale=1.0, loc=0.0):
        if not scale > 0:
            raise ValueError(f"scale must be positive, got {scale}")
        self.scale = float(scale)
        self.loc = float(loc)

    def log_density(self, s):
        return -np.log(2.0 * self.scale) - np.abs(_finite(s) - self.loc) / self.scale

    def score(self, u):
        return -np.sign(_finite(u) - self.loc) / self.scale

    def breakpoints(self):
        return (self.loc,)

    def params(self):
        return {"scale": self.scale, "loc": self.loc}


class GaussianDensity(AmplitudeDensity):
    name = "gaussian"

    def __init__(self, sigma=1.0, mu=0.0):
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        self.sigma = float(sigma)
        self.mu = float(mu)

    def log_density(self, s):
        z = (_finite(s) - self.mu) / self.sigma
        return -0.5 * z**2 - HALF_LOG_2PI - np.log(self.sigma)

    def score(self, u):
        return -(_finite(u) - self.mu) / self.sigma**2

    def params(self):
        return {"sigma": self.sigma, "mu": self.mu}


class BimodalDensity(AmplitudeDensity):
    """Equal-weight mixture of ``N(+mu, sigma**2)`` and ``N(-mu, sigma**2)``.

    Matches the two-horned amplitude histogram of a sinusoid.  The score
    simplifies to ``(mu tanh(mu u / sigma**2) - u) / sigma**2``, which has
    three zeros (0 and two symmetric modes) whenever ``mu > sigma``.
    """

    name = "bimodal"

    def __init__(self, mu=1.0, sigma=0.5):
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        if mu < 0:
            raise ValueError(f"mu must be nonnegative, got {mu}")
        self.mu = float(mu)
        self.sigma = float(sigma)

    def log_density(self, s):
        s = _finite(s)
        v = self.sigma**2
        a = np.abs(s) * self.mu / v
        # log cosh(a) = a + log1p(e^{-2a}) - log 2
        log_cosh = a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)
        return -(s**2 + self.mu**2) / (2.0 * v) + log_cosh - HALF_LOG_2PI - np.log(self.sigma)

    def score(self, u):
        u = _finite(u)
        v = self.sigma**2
        return (self.mu * np.tanh(self.mu * u / v) - u) / v

    def params(self):
        return {"mu": self.mu, "sigma": self.sigma}


def moment_matched_bimodal(variance=1.0, excess_kurtosis=-1.5) -> BimodalDensity:
    """Bimodal density with the given variance and excess kurtosis.

    With ``mu**2 + sigma**2 = v`` the excess kurtosis is
    ``(v**2 + 4 v sigma**2 - 2 sigma**4) / v**2 - 3``, a quadratic in
    ``sigma**2``; the smaller root is taken.  Reachable excess kurtosis lies
    in ``[-2, 0]``.  The defaults match a sinusoid (arcsine amplitudes) of
    unit variance.
    """
    if not variance > 0:
        raise ValueError("variance must be positive")
    if not -2.0 <= excess_kurtosis <= 0.0:
        raise ValueError("a two-Gaussian mixture has excess kurtosis in [-2, 0]")
    k = excess_kurtosis + 2.0  # = (4 x - 2 x**2) with x = sigma**2 / v
    x = (4.0 - np.sqrt(16.0 - 8.0 * k)) / 4.0
    return BimodalDensity(mu=np.sqrt(variance * (1.0 - x)), sigma=np.sqrt(variance * x))


def sinusoid_matched(variance=1.0) -> BimodalDensity:
    """Bimodal density matching the amplitude moments of a sinusoid."""
    return moment_matched_bimodal(variance, -1.5)


FAMILIES = {
    "logistic": LogisticDensity,
    "laplacian": LaplacianDensity,
    "gaussian": GaussianDensity,
    "bimodal": BimodalDensity,
    "sinusoid-matched": sinusoid_matched,
}

ALIASES = {
    "logistic-sigmoid-derivative": "logistic",
    "sigmoid": "logistic",
    "laplace": "laplacian",
    "normal": "gaussian",
    "bimodal-mixture": "bimodal",
}


def make_density(family, **params) -> AmplitudeDensity:
    """Build a density from its string identifier (as used in configs)."""
    key = ALIASES.get(family, family)
    try:
        factory = FAMILIES[key]
    except KeyError:
        raise ValueError(f"unknown density family {family!r}; choose from {sorted(FAMILIES)}") from None
    return factory(**params)


def density_from_dict(d) -> AmplitudeDensity:
    d = dict(d)
    return make_density(d.pop("family"), **d)


def log_density(d: AmplitudeDensity, s):
    return d.log_density(s)


def score(d: AmplitudeDensity, u):
    return d.score(u)


class MatrixPrior:
    """Prior on the mixing matrix, factorized over its elements.

    kinds:
      ``none``            flat, contributes 0
      ``uniform-box``     each element uniform on ``[a_min, a_max]``
      ``inverse-square``  each element follows the inverse-square coupling
                          prior of radius ``R`` (see :mod:`bayesbss.propagation`)
    """

    KINDS = ("none", "uniform-box", "inverse-square")

    def __init__(self, kind="none", a_min=None, a_max=None, R=None, r_min=0.0):
        if kind not in self.KINDS:
            raise ValueError(f"unknown matrix prior {kind!r}; choose from {self.KINDS}")
        self.kind = kind
        if kind == "uniform-box":
            if a_min is None or a_max is None or not a_min < a_max:
                raise ValueError("uniform-box needs a_min < a_max")
            self.a_min, self.a_max = float(a_min), float(a_max)
        elif kind == "inverse-square":
            propagation.BallPrior(R, r_min)  # validates
            self.R, self.r_min = float(R), float(r_min)

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def uniform_box(cls, a_min, a_max):
        return cls("uniform-box", a_min=a_min, a_max=a_max)

    @classmethod
    def inverse_square(cls, R, r_min=0.0):
        return cls("inverse-square", R=R, r_min=r_min)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(d.pop("kind"), **d)

    def to_dict(self):
        if self.kind == "uniform-box":
            return {"kind": self.kind, "a_min": self.a_min, "a_max": self.a_max}
        if self.kind == "inverse-square":
            return {"kind": self.kind, "R": self.R, "r_min": self.r_min}
        return {"kind": "none"}

    def __repr__(self):
        return f"MatrixPrior({self.to_dict()})"

    def log_prior(self, A) -> float:
        """Sum of elementwise log prior terms; ``-inf`` if any element is off support."""
        A = np.asarray(A, dtype=float)
        if self.kind == "none":
            return 0.0
        if self.kind == "uniform-box":
            if np.any(A < self.a_min) or np.any(A > self.a_max):
                return -np.inf
            # product of A.size equal factors c, c = 1 / (a_max - a_min)
            return -A.size * np.log(self.a_max - self.a_min)
        return float(np.sum(propagation.mixing_element_log_prior(A, self.R, self.r_min)))

    def gradient(self, A):
        """Gradient of :meth:`log_prior` with respect to the elements of ``A``.

        Zero for the flat priors (inside the box); ``-(5/2) / A`` for the
        inverse-square prior.
        """
        A = np.asarray(A, dtype=float)
        if self.kind == "inverse-square":
            return -2.5 / A
        return np.zeros_like(A)


def log_matrix_prior(p: MatrixPrior, A) -> float:
    return p.log_prior(A)
