"""Source localization through a physical forward model.

Replacing the mixing matrix by the forward-model gains ``A_ij = F(d_i, p_j, q_j)``
and using a Gaussian likelihood turns the posterior over positions,
orientations and waveshapes into the chi-squared cost

    chi2 = sum_it (x_it - xhat_it)**2 / (2 sigma_i**2),   xhat = F s

(the Gaussian normalization is constant and left out).  For fixed geometry the
waveshapes are a weighted linear least-squares problem, so the search runs over
positions (and dipole orientations) only, with the waveshapes re-solved exactly
after every move.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi
MODELS = ("point", "dipole")


class SingularityError(ValueError):
    """Source placed on a detector."""


@dataclass(frozen=True)
class GeometryConfig:
    """Detector layout, search region and forward model.

    The search region is a ball of radius ``radius`` around ``center``.
    ``sigma`` is either one value for all detectors or one per detector.
    """

    detectors: np.ndarray
    radius: float
    model: str = "point"
    sigma: object = 1.0
    center: object = (0.0, 0.0, 0.0)

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.detectors, dtype=float))
        if d.shape[1] != 3:
            raise ValueError("detectors must be an M x 3 array")
        object.__setattr__(self, "detectors", d)
        M = d.shape[0]
        sig = np.broadcast_to(np.asarray(self.sigma, dtype=float), (M,)).copy()
        if np.any(sig <= 0):
            raise ValueError("detector sigmas must be positive")
        object.__setattr__(self, "sigma", sig)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        if self.model not in MODELS:
            raise ValueError(f"forward model must be one of {MODELS}")
        if not self.radius > 0:
            raise ValueError("search radius must be positive")
        gaps = np.linalg.norm(d[:, None, :] - d[None, :, :], axis=-1) + np.eye(M)
        if np.any(gaps == 0):
            raise ValueError("detector positions must be pairwise distinct")

    @property
    def n_detectors(self):
        return self.detectors.shape[0]

    def contains(self, p):
        return np.linalg.norm(np.asarray(p) - self.center) <= self.radius * (1 + 1e-12)

    def to_dict(self):
        return {
            "detectors": self.detectors.tolist(),
            "radius": float(self.radius),
            "model": self.model,
            "sigma": self.sigma.tolist(),
            "center": self.center.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["detectors"], dtype=float), float(d["radius"]), d.get("model", "point"),
                   d.get("sigma", 1.0), d.get("center", (0.0, 0.0, 0.0)))


@dataclass(frozen=True)
class SourceEstimate:
    positions: np.ndarray                  # N x 3
    waveshapes: np.ndarray                 # N x T
    orientations: Optional[np.ndarray] = None  # N x 3 unit vectors, dipole model
    chi_squared: float = np.nan
    trace: tuple = field(default=())

    @property
    def n_sources(self):
        return self.positions.shape[0]


def cube_detectors(half_width=1.0):
    """Eight detectors at the corners of a cube centred on the origin."""
    c = half_width * np.array([-1.0, 1.0])
    return np.array([[x, y, z] for x in c for y in c for z in c])


def forward_gain(geometry: GeometryConfig, p, q=None):
    """Gains from a source at ``p`` to every detector.

    point:  ``1 / (4 pi |d - p|**2)``
    dipole: ``q . (d - p) / (4 pi |d - p|**3)``
    """
    diff = geometry.detectors - np.asarray(p, dtype=float)
    dist = np.linalg.norm(diff, axis=1)
    if np.any(dist <= 1e-12 * max(1.0, geometry.radius)):
        raise SingularityError("source position coincides with a detector")
    if geometry.model == "point":
        return 1.0 / (FOUR_PI * dist**2)
    if q is None:
        raise ValueError("dipole model needs an orientation")
    return diff @ np.asarray(q, dtype=float) / (FOUR_PI * dist**3)


def gain_matrix(geometry, positions, orientations=None):
    positions = np.atleast_2d(np.asarray(positions, dtype=float)).reshape(-1, 3)
    if positions.shape[0] == 0:
        return np.zeros((geometry.n_detectors, 0))
    cols = []
    for j, p in enumerate(positions):
        q = None if orientations is None else orientations[j]
        cols.append(forward_gain(geometry, p, q))
    return np.column_stack(cols)


def predict(geometry, estimate: SourceEstimate):
    F = gain_matrix(geometry, estimate.positions, estimate.orientations)
    return F @ np.asarray(estimate.waveshapes, dtype=float).reshape(F.shape[1], -1)


def chi_squared(X, geometry: GeometryConfig, estimate: SourceEstimate) -> float:
    """``sum_i sum_t (x_it - xhat_it)**2 / (2 sigma_i**2)`` with ``xhat = F s``."""
    X = np.atleast_2d(np.asarray(getattr(X, "values", X), dtype=float))
    if X.shape[0] != geometry.n_detectors:
        raise ValueError(f"{X.shape[0]} recording rows for {geometry.n_detectors} detectors")
    if estimate.n_sources == 0:
        resid = X
    else:
        if estimate.waveshapes.shape[-1] != X.shape[1]:
            raise ValueError("waveshape length differs from recording length")
        resid = X - predict(geometry, estimate)
    return float(np.sum(resid**2 / (2.0 * geometry.sigma[:, None] ** 2)))


def fit_waveshapes(X, F, sigma):
    """Weighted least-squares waveshapes for fixed gains ``F`` (M x N)."""
    w = 1.0 / np.asarray(sigma)[:, None]
    S, *_ = np.linalg.lstsq(w * F, w * X, rcond=None)
    return S


def _projected_chi2(X, F, sigma):
    if not np.all(np.isfinite(F)):
        return np.inf
    S = fit_waveshapes(X, F, sigma)
    resid = X - F @ S
    return float(np.sum(resid**2 / (2.0 * sigma[:, None] ** 2)))


def angles_to_unit(theta, phi):
    st = np.sin(theta)
    return np.array([st * np.cos(phi), st * np.sin(phi), np.cos(theta)])


def unit_to_angles(q):
    q = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return float(np.arccos(np.clip(q[2], -1.0, 1.0))), float(np.arctan2(q[1], q[0]))


def golden_hemisphere(n):
    """``n`` near-uniform directions on the upper hemisphere (golden-angle spiral).

    A hemisphere suffices: flipping the orientation flips the waveshape sign.
    """
    k = np.arange(n) + 0.5
    z = 1.0 - k / n
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    theta = np.arccos(z)
    return np.column_stack([theta, np.mod(phi, 2 * np.pi)])


def grid_points(geometry, step):
    """Cubic grid of spacing ``step`` clipped to the search ball."""
    n = int(np.floor(geometry.radius / step))
    ax = np.arange(-n, n + 1) * step
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    g = g[np.linalg.norm(g, axis=1) <= geometry.radius] + geometry.center
    dmin = np.min(np.linalg.norm(g[:, None, :] - geometry.detectors[None], axis=-1), axis=1)
    return g[dmin > 1e-9]


class _Model:
    """Parameter vector handling: per source (x, y, z) or (x, y, z, theta, phi)."""

    def __init__(self, geometry, n_sources):
        self.g = geometry
        self.n = n_sources
        self.k = 3 if geometry.model == "point" else 5

    def unpack(self, theta):
        theta = theta.reshape(self.n, self.k)
        pos = theta[:, :3]
        if self.k == 3:
            return pos, None
        ori = np.array([angles_to_unit(t, p) for t, p in theta[:, 3:]])
        return pos, ori

    def gains(self, theta):
        pos, ori = self.unpack(theta)
        if not all(self.g.contains(p) for p in pos):
            return None
        try:
            return gain_matrix(self.g, pos, ori)
        except SingularityError:
            return None

    def cost(self, X, theta):
        F = self.gains(theta)
        return np.inf if F is None else _projected_chi2(X, F, self.g.sigma)


def _check_conditioning(geometry):
    if geometry.model != "dipole" or geometry.n_detectors < 3:
        return
    d = geometry.detectors - geometry.detectors.mean(axis=0)
    sv = np.linalg.svd(d, compute_uv=False)
    if sv[1] <= 1e-9 * sv[0]:
        warnings.warn("detectors are collinear; dipole orientations are poorly determined",
                      RuntimeWarning, stacklevel=3)


def localize(X, geometry: GeometryConfig, n_sources, grid_step=0.1, n_orientations=64,
             refine_tol=1e-10, max_refine=20000, rounds=3, seed=0) -> SourceEstimate:
    """Fit ``n_sources`` sources by grid search plus compass-search refinement.

    Sources are placed one at a time on the grid (holding earlier ones fixed),
    then each round re-places every source on the grid given the others and
    polishes all parameters by coordinate descent with step halving down to
    ``refine_tol``.  Waveshapes are re-solved by weighted least squares for
    every candidate geometry, so each accepted move lowers chi-squared.
    ``seed`` only permutes the grid visiting order, which breaks exact ties.
    """
    X = np.atleast_2d(np.asarray(getattr(X, "values", X), dtype=float))
    if n_sources < 0:
        raise ValueError("n_sources must be nonnegative")
    if X.shape[0] != geometry.n_detectors:
        raise ValueError(f"{X.shape[0]} recording rows for {geometry.n_detectors} detectors")
    _check_conditioning(geometry)
    sigma = geometry.sigma
    if n_sources == 0:
        empty = SourceEstimate(np.zeros((0, 3)), np.zeros((0, X.shape[1])))
        return SourceEstimate(empty.positions, empty.waveshapes, None, chi_squared(X, geometry, empty))

    model = _Model(geometry, n_sources)
    grid = grid_points(geometry, grid_step)
    if len(grid) == 0:
        raise ValueError("search region contains no grid points; reduce grid_step")
    grid = grid[np.random.default_rng(seed).permutation(len(grid))]
    orients = golden_hemisphere(n_orientations) if model.k == 5 else np.zeros((1, 0))
    candidates = np.array([np.concatenate([p, o]) for p in grid for o in orients])

    theta = np.zeros((0,))
    for _ in range(n_sources):
        theta = _best_candidate(X, geometry, theta, None, candidates)
    trace = [model.cost(X, theta)]

    steps = np.array([grid_step] * 3 + ([np.pi / np.sqrt(n_orientations)] * 2 if model.k == 5 else []))
    for _ in range(rounds):
        if n_sources > 1:
            for j in range(n_sources):
                # alternation: re-place one source given the others; never worse than staying put
                cand = _best_candidate(X, geometry, theta, j, candidates)
                if model.cost(X, cand) < model.cost(X, theta):
                    theta = cand
        theta, best = _compass(X, model, theta, np.tile(steps, n_sources) / 2, refine_tol, max_refine)
        improved = best < trace[-1] * (1 - 1e-9)
        trace.append(best)
        if not improved or best == 0:
            break

    pos, ori = model.unpack(theta)
    if ori is not None:
        ori = ori / np.linalg.norm(ori, axis=1, keepdims=True)
    F = gain_matrix(geometry, pos, ori)
    S = fit_waveshapes(X, F, sigma)
    est = SourceEstimate(pos.copy(), S, ori, 0.0, tuple(trace))
    return SourceEstimate(est.positions, est.waveshapes, est.orientations, chi_squared(X, geometry, est), est.trace)


def _best_candidate(X, geometry, theta, slot, candidates):
    """Best grid candidate for source ``slot``, or for a new source if ``slot`` is None."""
    k = candidates.shape[1]
    current = theta.reshape(-1, k) if theta.size else np.zeros((0, k))
    n = current.shape[0] + (1 if slot is None else 0)
    model = _Model(geometry, n)
    best_cost, best_row = np.inf, None
    for row in candidates:
        if slot is None:
            trial = np.vstack([current, row])
        else:
            trial = current.copy()
            trial[slot] = row
        c = model.cost(X, trial.ravel())
        if c < best_cost:
            best_cost, best_row = c, row
    if best_row is None:
        raise ValueError("no feasible grid candidate")
    if slot is None:
        return np.concatenate([theta, best_row])
    out = current.copy()
    out[slot] = best_row
    return out.ravel()


def _compass(X, model, theta, steps, tol, max_evals):
    """Coordinate (compass) search with per-coordinate step halving."""
    theta = theta.copy()
    best = model.cost(X, theta)
    steps = steps.copy()
    evals = 0
    while np.max(steps) > tol and evals < max_evals:
        improved = False
        for i in range(theta.size):
            for sgn in (1.0, -1.0):
                cand = theta.copy()
                cand[i] += sgn * steps[i]
                c = model.cost(X, cand)
                evals += 1
                if c < best:
                    theta, best, improved = cand, c, True
                    # keep moving while it pays off
                    while evals < max_evals:
                        nxt = theta.copy()
                        nxt[i] += sgn * steps[i]
                        c = model.cost(X, nxt)
                        evals += 1
                        if c < best:
                            theta, best = nxt, c
                        else:
                            break
                    break
        if not improved:
            steps *= 0.5
    return theta, best
