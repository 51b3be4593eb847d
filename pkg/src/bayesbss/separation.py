"""MAP Infomax separation.

With a noise-free square model ``X = A S``, marginalizing the sources against
a delta likelihood leaves

    log p(A | X) = K + log p(A) - T log|det A| + sum_jt log q_j(u_jt),   u = A^-1 X

(one ``1/|det A|`` factor per time step).  Infomax ascends this in the
separation matrix ``W = A^-1``:

    dL/dW = T W^-T + psi(U) X^T + (prior term),   U = W X,  psi = q'/q

The density of ``W`` itself picks up the Jacobian of matrix inversion,
``|det W|^(-2N)``, so the mode of ``p(W | X)`` is not the inverse of the mode
of ``p(A | X)``.  Both objectives are available through
``SeparationConfig.objective``.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .densities import AmplitudeDensity, LogisticDensity, MatrixPrior
from .metrics import amari_index

logger = logging.getLogger(__name__)

MIN_ABS_DET = 1e-12
OBJECTIVES = ("posterior-A", "jacobian-W")
MODES = ("vanilla", "natural")
INITS = ("identity", "random-orthogonal")


class ModelError(ValueError):
    """Data or matrix incompatible with the square noise-free model."""


class SingularMatrixError(ModelError):
    pass


@dataclass(frozen=True)
class SeparationConfig:
    """Search settings for :func:`separate`.

    ``step`` multiplies the per-sample gradient (the gradient divided by T);
    ``tol`` is the per-sample increase of the objective below which the
    search stops.
    """

    densities: Union[AmplitudeDensity, Sequence[AmplitudeDensity]] = field(default_factory=LogisticDensity)
    matrix_prior: MatrixPrior = field(default_factory=MatrixPrior.none)
    step: float = 0.1
    max_iter: int = 2000
    tol: float = 1e-9
    mode: str = "natural"
    objective: str = "posterior-A"
    init: str = "identity"
    seed: int = 0
    whiten: bool = False
    min_step: float = 1e-12

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if self.max_iter < 0:
            raise ValueError("max_iter must be nonnegative")

    def density_list(self, N):
        if isinstance(self.densities, AmplitudeDensity):
            return [self.densities] * N
        dens = list(self.densities)
        if len(dens) != N:
            raise ModelError(f"{len(dens)} densities configured for {N} sources")
        return dens


def _as_recordings(X):
    X = getattr(X, "values", X)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise ModelError("recordings contain non-finite values")
    return X


def _source_log_density(U, dens):
    return sum(float(np.sum(d.log_density(U[j]))) for j, d in enumerate(dens))


def _source_scores(U, dens):
    return np.vstack([d.score(U[j]) for j, d in enumerate(dens)])


def log_posterior_A(A, X, cfg: SeparationConfig) -> float:
    """Log posterior of the mixing matrix, constant dropped.

    ``log p(A) - T log|det A| + sum_jt log q_j((A^-1 X)_jt)``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    X = _as_recordings(X)
    N, T = X.shape
    if A.shape != (N, N):
        raise ModelError(f"mixing matrix {A.shape} incompatible with {N} detectors")
    sign, logdet = np.linalg.slogdet(A)
    if sign == 0 or logdet < np.log(MIN_ABS_DET):
        raise SingularMatrixError("mixing matrix is singular")
    lp = cfg.matrix_prior.log_prior(A)
    if lp == -np.inf:
        return -np.inf
    U = np.linalg.solve(A, X)
    return lp - T * logdet + _source_log_density(U, cfg.density_list(N))


def log_posterior_W(W, X, cfg: SeparationConfig) -> float:
    """Log density of the separation matrix: ``log p(A = W^-1 | X) - 2N log|det W|``.

    The second term is the log Jacobian of ``W -> W^-1``, whose linear map
    ``dW -> -A dW A`` has determinant magnitude ``|det A|^(2N)``.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    sign, logdet = np.linalg.slogdet(W)
    if sign == 0 or logdet < np.log(MIN_ABS_DET):
        raise SingularMatrixError("separation matrix is singular")
    N = W.shape[0]
    return log_posterior_A(np.linalg.inv(W), X, cfg) - 2 * N * logdet


def _evaluate(W, X, cfg, want_grad=True):
    """Objective (and its W-gradient) evaluated directly in separation-matrix form."""
    N, T = X.shape
    sign, logdet = np.linalg.slogdet(W)
    if sign == 0 or logdet < np.log(MIN_ABS_DET):
        return -np.inf, None
    A = np.linalg.inv(W)
    lp = cfg.matrix_prior.log_prior(A)
    if lp == -np.inf:
        return -np.inf, None
    dens = cfg.density_list(N)
    U = W @ X
    det_weight = T - (2 * N if cfg.objective == "jacobian-W" else 0)
    value = lp + det_weight * logdet + _source_log_density(U, dens)
    if not want_grad:
        return value, None
    grad = det_weight * A.T + _source_scores(U, dens) @ X.T
    if cfg.matrix_prior.kind != "none":
        # dA = -A dW A  =>  dL/dW = -A^T (dL/dA) A^T
        grad -= A.T @ cfg.matrix_prior.gradient(A) @ A.T
    return value, grad


def objective(W, X, cfg: SeparationConfig) -> float:
    """Configured objective as a function of ``W`` (``-inf`` when infeasible)."""
    return _evaluate(np.atleast_2d(np.asarray(W, dtype=float)), _as_recordings(X), cfg, want_grad=False)[0]


def objective_gradient(W, X, cfg: SeparationConfig):
    """Analytic gradient of :func:`objective` with respect to ``W``."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    value, grad = _evaluate(W, _as_recordings(X), cfg)
    if grad is None:
        raise SingularMatrixError("objective is not finite at this W")
    return grad


def ascent_direction(W, grad, cfg):
    if cfg.mode == "natural":
        return grad @ W.T @ W
    return grad


@dataclass(frozen=True)
class StepResult:
    W: np.ndarray
    value: float
    step: float
    accepted: bool


def gradient_step(W, X, cfg: SeparationConfig, step=None, V=None) -> StepResult:
    """One backtracking ascent step.

    The step is halved until the objective strictly increases or the step
    falls below ``cfg.min_step``; in the latter case ``W`` is returned
    unchanged with ``accepted=False``.  ``V`` is an optional whitening
    matrix: the search variable is then ``W' `` with ``W = W' V``.
    """
    X = _as_recordings(X)
    W = np.atleast_2d(np.asarray(W, dtype=float))
    V = np.eye(X.shape[0]) if V is None else V
    T = X.shape[1]
    step = cfg.step if step is None else step
    value, grad = _evaluate(W @ V, X, cfg)
    if grad is None:
        raise SingularMatrixError("starting point has zero posterior probability")
    direction = ascent_direction(W, grad @ V.T, cfg) / T
    while step >= cfg.min_step:
        cand = W + step * direction
        new_value, _ = _evaluate(cand @ V, X, cfg, want_grad=False)
        if new_value > value:
            return StepResult(cand, new_value, step, True)
        step *= 0.5
    return StepResult(W, value, step, False)


@dataclass(frozen=True)
class SeparationResult:
    W: np.ndarray
    unmixed: np.ndarray
    log_posterior_trace: np.ndarray
    converged: bool
    n_iter: int
    amari_index: Optional[float] = None

    @property
    def A(self):
        return np.linalg.inv(self.W)


def initial_matrix(N, cfg):
    if cfg.init == "identity":
        return np.eye(N)
    rng = np.random.default_rng(cfg.seed)
    Q, R = np.linalg.qr(rng.normal(size=(N, N)))
    return Q * np.sign(np.diag(R))


def whitening_matrix(X):
    cov = np.cov(X)
    evals, evecs = np.linalg.eigh(np.atleast_2d(cov))
    if np.min(evals) <= 0:
        raise ModelError("recordings are rank deficient; cannot whiten")
    return evecs @ np.diag(evals**-0.5) @ evecs.T


def separate(X, cfg: SeparationConfig = None, W0=None, A_true=None) -> SeparationResult:
    """Maximize the configured posterior over the separation matrix.

    Starts from ``W0`` if given, otherwise from ``cfg.init``.  Stops when the
    per-sample increase of an accepted step falls below ``cfg.tol``, when
    backtracking cannot find an improving step, or after ``cfg.max_iter``
    iterations.
    """
    cfg = SeparationConfig() if cfg is None else cfg
    X = _as_recordings(X)
    N, T = X.shape
    if N != getattr(W0, "shape", (N, N))[0]:
        raise ModelError("initial matrix does not match the number of detectors")
    V = whitening_matrix(X) if cfg.whiten else np.eye(N)
    if W0 is None:
        Wp = initial_matrix(N, cfg)
    else:
        Wp = np.asarray(W0, dtype=float) @ np.linalg.inv(V)

    value, _ = _evaluate(Wp @ V, X, cfg, want_grad=False)
    if not np.isfinite(value):
        raise ModelError("initial separation matrix has zero posterior probability "
                         "(singular, or outside the matrix prior's support)")
    trace = [value]
    step = cfg.step
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        res = gradient_step(Wp, X, cfg, step=step, V=V)
        if not res.accepted:
            converged = True
            logger.debug("no improving step at iteration %d", it)
            break
        gain = (res.value - trace[-1]) / T
        Wp = res.W
        trace.append(res.value)
        step = min(res.step * 1.25, 10 * cfg.step)
        if gain < cfg.tol:
            converged = True
            break
    W = Wp @ V
    ai = amari_index(W, A_true) if A_true is not None else None
    return SeparationResult(W, W @ X, np.asarray(trace), converged, it, ai)
