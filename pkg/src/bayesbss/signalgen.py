"""Synthetic sources, instantaneous mixtures and trial ensembles.

Generators are pure functions of their arguments and seed; identical seeds give
bit-identical arrays.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class SourceSpec:
    """One synthetic source.

    families and params:
      laplacian  scale (1), loc (0)
      logistic   scale (1), loc (0)
      gaussian   sigma (1), mu (0)
      sinusoid   freq in cycles/sample, strictly inside (0, 0.5); phase (0); amplitude (1)
      bimodal    mu (1), sigma (0.25): equal-weight Gaussians at +-mu
    """

    family: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        check_spec(self)

    def to_dict(self):
        return {"family": self.family, "params": dict(self.params), "seed": self.seed}


DEFAULTS = {
    "laplacian": {"scale": 1.0, "loc": 0.0},
    "logistic": {"scale": 1.0, "loc": 0.0},
    "gaussian": {"sigma": 1.0, "mu": 0.0},
    "sinusoid": {"freq": None, "phase": 0.0, "amplitude": 1.0},
    "bimodal": {"mu": 1.0, "sigma": 0.25},
}


def _resolved(spec):
    p = dict(DEFAULTS[spec.family])
    p.update(spec.params)
    return p


def check_spec(spec):
    if spec.family not in DEFAULTS:
        raise ValueError(f"unknown source family {spec.family!r}")
    unknown = set(spec.params) - set(DEFAULTS[spec.family])
    if unknown:
        raise ValueError(f"unknown parameters for {spec.family}: {sorted(unknown)}")
    p = _resolved(spec)
    for key in ("scale", "sigma"):
        if key in p and not p[key] > 0:
            raise ValueError(f"{spec.family} {key} must be positive, got {p[key]}")
    if spec.family == "sinusoid":
        f = p["freq"]
        if f is None or not 0 < f < 0.5:
            raise ValueError(f"sinusoid freq must be in (0, 0.5) cycles/sample, got {f}")
    if spec.family == "bimodal" and p["mu"] < 0:
        raise ValueError("bimodal mu must be nonnegative")
    if spec.seed < 0:
        raise ValueError("seed must be a nonnegative integer")


def gen_source(spec: SourceSpec, T: int) -> np.ndarray:
    p = _resolved(spec)
    rng = np.random.default_rng(spec.seed)
    if spec.family == "laplacian":
        return rng.laplace(p["loc"], p["scale"], T)
    if spec.family == "logistic":
        return rng.logistic(p["loc"], p["scale"], T)
    if spec.family == "gaussian":
        return rng.normal(p["mu"], p["sigma"], T)
    if spec.family == "bimodal":
        signs = np.where(rng.random(T) < 0.5, -1.0, 1.0)
        return signs * p["mu"] + rng.normal(0.0, p["sigma"], T)
    t = np.arange(T)
    return p["amplitude"] * np.sin(2.0 * np.pi * p["freq"] * t + p["phase"])


def gen_sources(specs, T) -> np.ndarray:
    """Stack one row per spec into an ``N x T`` source matrix."""
    specs = list(specs)
    if not specs:
        raise ValueError("need at least one source spec")
    if T < 1:
        raise ValueError("T must be at least 1")
    return np.vstack([gen_source(s, T) for s in specs])


def family_moments(spec: SourceSpec):
    """Analytic (mean, variance, excess kurtosis) of a random family."""
    p = _resolved(spec)
    if spec.family == "laplacian":
        return p["loc"], 2.0 * p["scale"] ** 2, 3.0
    if spec.family == "logistic":
        return p["loc"], (np.pi * p["scale"]) ** 2 / 3.0, 1.2
    if spec.family == "gaussian":
        return p["mu"], p["sigma"] ** 2, 0.0
    if spec.family == "bimodal":
        m2 = p["mu"] ** 2 + p["sigma"] ** 2
        m4 = p["mu"] ** 4 + 6 * p["mu"] ** 2 * p["sigma"] ** 2 + 3 * p["sigma"] ** 4
        return 0.0, m2, m4 / m2**2 - 3.0
    raise ValueError("sinusoid sources are deterministic")


@dataclass(frozen=True)
class Recording:
    """``M x T`` detector recordings and the noise level used to make them."""

    values: np.ndarray
    noise_sigma: float = 0.0


def mix(A, S, sigma=0.0, seed=0) -> Recording:
    """``X = A S`` plus i.i.d. Gaussian noise of std ``sigma``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if A.shape[1] != S.shape[0]:
        raise ValueError(f"mixing matrix has {A.shape[1]} columns but there are {S.shape[0]} sources")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    X = A @ S
    if sigma > 0:
        X = X + np.random.default_rng(seed).normal(0.0, sigma, X.shape)
    return Recording(X, float(sigma))


def random_mixing(N, seed, cond_max=10.0):
    """Random ``N x N`` Gaussian matrix, redrawn until its condition number is below ``cond_max``."""
    rng = np.random.default_rng(seed)
    while True:
        A = rng.normal(size=(N, N))
        if np.linalg.cond(A) < cond_max:
            return A


def shift(s, tau):
    """Zero-padded delay: ``out[..., t] = s[..., t - tau]``, no wraparound."""
    s = np.asarray(s, dtype=float)
    tau = int(tau)
    out = np.zeros_like(s)
    T = s.shape[-1]
    if tau >= T or -tau >= T:
        return out
    if tau >= 0:
        out[..., tau:] = s[..., :T - tau]
    else:
        out[..., :T + tau] = s[..., -tau:]
    return out


def default_tau_max(T):
    """Largest integer strictly below ``T / 4``."""
    return int(np.ceil(T / 4.0)) - 1


@dataclass(frozen=True)
class EnsembleTruth:
    waveshapes: np.ndarray  # N x T
    C: np.ndarray           # M x N
    alpha: np.ndarray       # N x R
    tau: np.ndarray         # N x R, integer samples
    sigma: float
    noise: Optional[np.ndarray] = None  # M x R x T


@dataclass(frozen=True)
class TrialEnsemble:
    """Recordings ``values[m, r, t]`` of ``R`` trials at ``M`` detectors."""

    values: np.ndarray
    truth: Optional[EnsembleTruth] = None
    tau_max: Optional[int] = None

    @property
    def shape(self):
        return self.values.shape


def model_ensemble(waveshapes, C, alpha, tau):
    """Noise-free ``x[m, r, t] = sum_n C[m, n] alpha[n, r] s_n(t - tau[n, r])``."""
    S = np.atleast_2d(np.asarray(waveshapes, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    tau = np.atleast_2d(np.asarray(tau))
    N, T = S.shape
    R = alpha.shape[1]
    Z = np.empty((N, R, T))
    for n in range(N):
        for r in range(R):
            Z[n, r] = alpha[n, r] * shift(S[n], tau[n, r])
    return np.einsum("mn,nrt->mrt", C, Z)


def gen_trial_ensemble(waveshapes, C, alpha, tau, sigma=0.0, seed=0, tau_max=None) -> TrialEnsemble:
    """Simulate the multi-detector trial model with per-trial amplitude and latency."""
    S = np.atleast_2d(np.asarray(waveshapes, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    tau_arr = np.atleast_2d(np.asarray(tau))
    N, T = S.shape
    if C.shape[1] != N:
        raise ValueError(f"coupling has {C.shape[1]} columns for {N} waveshapes")
    if alpha.shape[0] != N or tau_arr.shape != alpha.shape:
        raise ValueError("alpha and tau must both be N x R")
    if not np.all(tau_arr == np.round(tau_arr)):
        raise ValueError("latencies must be integer samples")
    tau_arr = tau_arr.astype(int)
    if tau_max is None:
        tau_max = default_tau_max(T)
    if not tau_max < T / 4:
        raise ValueError(f"tau_max={tau_max} must be below T/4={T / 4}")
    if np.any(np.abs(tau_arr) > tau_max):
        raise ValueError(f"latency exceeds bound {tau_max}")
    if np.any(alpha <= 0):
        raise ValueError("amplitudes must be positive")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    clean = model_ensemble(S, C, alpha, tau_arr)
    M, R = C.shape[0], alpha.shape[1]
    noise = np.random.default_rng(seed).normal(0.0, sigma, (M, R, T)) if sigma > 0 else np.zeros((M, R, T))
    truth = EnsembleTruth(S.copy(), C.copy(), alpha.copy(), tau_arr, float(sigma), noise)
    return TrialEnsemble(clean + noise, truth, int(tau_max))


def gabor(T, center, width, freq, phase=0.0):
    """Gaussian-windowed cosine, a convenient evoked-response waveshape."""
    t = np.arange(T)
    return np.exp(-0.5 * ((t - center) / width) ** 2) * np.cos(2 * np.pi * freq * (t - center) + phase)
