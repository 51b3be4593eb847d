"""Trial-ensemble estimators: the signal-plus-noise average and dVCA.

dVCA (differentially variable component analysis) models each detector and
trial as

    x[m, r, t] = sum_n C[m, n] alpha[n, r] s_n(t - tau[n, r]) + noise

Under a Gaussian likelihood with flat priors every block of parameters has an
exact conditional maximizer, so the fit cycles through them:

  (a) alpha[n, r]  scalar least squares (clipped at 0)
  (b) tau[n, r]    exhaustive integer search over [-tau_max, tau_max], with
                   alpha re-solved for each candidate shift
  (c) s_n          per-sample least squares over back-shifted, amplitude
                   weighted residuals
  (d) C            linear least squares

followed by a gauge normalization (unit-norm waveshapes, unit-mean
amplitudes, latencies centred on 0).  Each step is a block maximization, so
the residual power never increases.

Shifts are integer samples with zero padding; samples moved past either edge
are dropped, matching :func:`bayesbss.signalgen.shift`.
"""

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .signalgen import TrialEnsemble, default_tau_max, model_ensemble, shift

logger = logging.getLogger(__name__)


def _values(ensemble):
    X = np.asarray(getattr(ensemble, "values", ensemble), dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError("ensemble must be an M x R x T array")
    return X


def average_trials(ensemble):
    """Trial mean at every detector and sample (the signal-plus-noise MAP estimate)."""
    X = _values(ensemble)
    if X.shape[1] == 0 or X.size == 0:
        raise ValueError("ensemble has no trials")
    return X.mean(axis=1)


def spn_log_posterior(ensemble, s, sigma=1.0):
    """Signal-plus-noise log posterior ``-sum_rt (x_r(t) - s(t))**2 / (2 sigma**2)``, constant dropped.

    ``s`` is ``M x T`` (one waveform per detector); the sum runs over all
    detectors.
    """
    X = _values(ensemble)
    s = np.atleast_2d(np.asarray(s, dtype=float))
    return float(-np.sum((X - s[:, None, :]) ** 2) / (2.0 * sigma**2))


@dataclass(frozen=True)
class DvcaEstimate:
    waveshapes: np.ndarray  # N x T, unit norm
    C: np.ndarray           # M x N
    alpha: np.ndarray       # N x R, mean 1 per component
    tau: np.ndarray         # N x R integers
    residual_power: float
    iterations: int
    trace: tuple = ()
    converged: bool = False

    @property
    def n_components(self):
        return self.waveshapes.shape[0]


@dataclass(frozen=True)
class DvcaOptions:
    tau_max: int = None
    max_sweeps: int = 200
    tol: float = 1e-9
    fix_alpha: bool = False
    fix_tau: bool = False
    normalize: bool = True
    seed: int = 0


def predict(estimate: DvcaEstimate):
    return model_ensemble(estimate.waveshapes, estimate.C, estimate.alpha, estimate.tau)


def residual_power(ensemble, estimate: DvcaEstimate) -> float:
    """``sum_mrt (x - xhat)**2`` with ``xhat`` the noise-free model."""
    X = _values(ensemble)
    xhat = predict(estimate)
    if xhat.shape != X.shape:
        raise ValueError(f"estimate predicts {xhat.shape}, data is {X.shape}")
    return float(np.sum((X - xhat) ** 2))


def from_truth(ensemble: TrialEnsemble) -> DvcaEstimate:
    """Wrap the generating parameters of a synthetic ensemble as an estimate."""
    t = ensemble.truth
    if t is None:
        raise ValueError("ensemble has no ground truth")
    est = DvcaEstimate(t.waveshapes, t.C, t.alpha, t.tau, 0.0, 0)
    return replace(est, residual_power=residual_power(ensemble, est))


def _shift_energies(s, tau_max):
    """``sum_t shift(s, tau)**2`` for every tau in the window, via prefix sums."""
    T = s.size
    c = np.concatenate([[0.0], np.cumsum(s**2)])
    taus = np.arange(-tau_max, tau_max + 1)
    # shift by tau keeps s[max(0,-tau) : T - max(0,tau)]
    lo = np.maximum(0, -taus)
    hi = T - np.maximum(0, taus)
    return taus, c[hi] - c[lo]


def _cross(y, s, tau_max):
    """``sum_t y[t] * s[t - tau]`` for every tau in the window."""
    T = s.size
    full = np.correlate(y, s, mode="full")  # index k <-> lag k - (T - 1)
    return full[T - 1 - tau_max:T + tau_max]


def _pick_tau(costs, taus):
    """Minimum cost; ties go to the smallest |tau|, then the negative one."""
    best = np.min(costs)
    tied = taus[costs <= best]
    return int(sorted(tied, key=lambda t: (abs(t), t))[0])


class _Fitter:
    def __init__(self, X, N, opts):
        self.X = X
        self.M, self.R, self.T = X.shape
        self.N = N
        self.opts = opts
        self.tau_max = default_tau_max(self.T) if opts.tau_max is None else int(opts.tau_max)
        if not self.tau_max < self.T / 4:
            raise ValueError(f"tau_max={self.tau_max} must be below T/4")

    def components(self, s, alpha, tau):
        Z = np.empty((self.N, self.R, self.T))
        for n in range(self.N):
            for r in range(self.R):
                Z[n, r] = alpha[n, r] * shift(s[n], tau[n, r])
        return Z

    def residual(self, s, C, alpha, tau):
        return self.X - np.einsum("mn,nrt->mrt", C, self.components(s, alpha, tau))

    def update_alpha_tau(self, s, C, alpha, tau, E):
        """Steps (a) and (b), updating the residual ``E`` in place."""
        o = self.opts
        for n in range(self.N):
            cn = C[:, n]
            cc = cn @ cn
            if cc == 0:
                continue
            if not o.fix_tau:
                taus, energy = _shift_energies(s[n], self.tau_max)
            for r in range(self.R):
                z_old = alpha[n, r] * shift(s[n], tau[n, r])
                Er = E[:, r] + np.outer(cn, z_old)  # residual with component n removed
                y = cn @ Er
                if not o.fix_alpha:
                    z = shift(s[n], tau[n, r])
                    zz = z @ z
                    alpha[n, r] = max(y @ z / (cc * zz), 0.0) if zz > 0 else 0.0
                if not o.fix_tau:
                    cross = _cross(y, s[n], self.tau_max)
                    if o.fix_alpha:
                        a = np.full(taus.shape, alpha[n, r])
                    else:
                        with np.errstate(invalid="ignore", divide="ignore"):
                            a = np.where(energy > 0, np.maximum(cross / (cc * energy), 0.0), 0.0)
                    # residual power up to a constant: -2 a <y, z> + a^2 |c|^2 |z|^2
                    costs = -2.0 * a * cross + a**2 * cc * energy
                    k = _pick_tau(costs, taus)
                    tau[n, r] = k
                    alpha[n, r] = a[k + self.tau_max]
                E[:, r] = Er - np.outer(cn, alpha[n, r] * shift(s[n], tau[n, r]))

    def update_waveshapes(self, s, C, alpha, tau, E):
        """Step (c): exact per-sample least squares for each waveshape in turn."""
        T = self.T
        for n in range(self.N):
            cn = C[:, n]
            cc = cn @ cn
            num = np.zeros(T)
            den = np.zeros(T)
            for r in range(self.R):
                a = alpha[n, r]
                k = tau[n, r]
                E[:, r] += np.outer(cn, a * shift(s[n], k))
                # s_n(v) sits at t = v + k; back-shift the residual onto v
                y = shift(cn @ E[:, r], -k)
                valid = shift(np.ones(T), -k)
                num += a * y
                den += a**2 * cc * valid
            s[n] = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
            for r in range(self.R):
                E[:, r] -= np.outer(cn, alpha[n, r] * shift(s[n], tau[n, r]))

    def update_coupling(self, s, alpha, tau):
        """Step (d): least-squares coupling matrix."""
        Z = self.components(s, alpha, tau).reshape(self.N, -1)
        G = Z @ Z.T
        B = self.X.reshape(self.M, -1) @ Z.T
        if np.linalg.matrix_rank(G) < self.N:
            warnings.warn("component count exceeds what the data support; coupling is ill-conditioned",
                          RuntimeWarning, stacklevel=4)
        C, *_ = np.linalg.lstsq(G, B.T, rcond=None)
        return C.T


def normalize(s, C, alpha, tau, X=None, tau_max=None):
    """Fix the gauge: ``|s_n| = 1``, ``mean_r alpha[n] = 1``, ``round(mean_r tau[n]) = 0``.

    Scale factors move into ``C``.  Latencies are centred by the nearest
    integer to their mean, with the waveshape shifted the opposite way.
    When ``X`` is given, a centring that would drop nonzero samples past the
    edge and raise the residual is skipped for that component.  Returns new
    arrays; inputs are untouched.
    """
    s, C, alpha, tau = s.copy(), C.copy(), alpha.copy(), tau.copy()
    N = s.shape[0]
    for n in range(N):
        k = int(np.round(np.mean(tau[n])))
        if k != 0:
            s_new = shift(s[n], k)
            tau_new = tau[n] - k
            ok = tau_max is None or np.all(np.abs(tau_new) <= tau_max)
            if ok and X is not None:
                before = _rp(X, s, C, alpha, tau)
                s2, t2 = s.copy(), tau.copy()
                s2[n], t2[n] = s_new, tau_new
                ok = _rp(X, s2, C, alpha, t2) <= before * (1 + 1e-12) + 1e-300
            if ok:
                s[n], tau[n] = s_new, tau_new
        m = alpha[n].mean()
        if m > 0:
            alpha[n] /= m
            C[:, n] *= m
        norm = np.linalg.norm(s[n])
        if norm > 0:
            s[n] /= norm
            C[:, n] *= norm
    return s, C, alpha, tau


def _rp(X, s, C, alpha, tau):
    return float(np.sum((X - model_ensemble(s, C, alpha, tau)) ** 2))


def initial_waveshapes(X, N, seed=0):
    """Top ``N`` temporal singular vectors of all single trials stacked together.

    When the data have fewer than ``N`` singular vectors the rest are seeded
    Gaussian noise, scaled to unit norm.
    """
    M, R, T = X.shape
    _, sv, Vt = np.linalg.svd(X.reshape(M * R, T), full_matrices=False)
    s = Vt[:N].copy()
    if s.shape[0] < N:
        extra = np.random.default_rng(seed).normal(size=(N - s.shape[0], T))
        s = np.vstack([s, extra / np.linalg.norm(extra, axis=1, keepdims=True)])
    return s


def dvca_fit(ensemble, N, opts: DvcaOptions = None, init=None) -> DvcaEstimate:
    """Fit ``N`` differentially variable components to an ``M x R x T`` ensemble.

    ``init`` may be a :class:`DvcaEstimate` to start from; otherwise the
    waveshapes start from the leading singular vectors of the stacked trials
    with unit amplitudes and zero latencies.  Sweeps stop when the relative
    decrease of residual power falls below ``opts.tol``.
    """
    opts = DvcaOptions() if opts is None else opts
    X = _values(ensemble)
    if N < 1:
        raise ValueError("need at least one component")
    M, R, T = X.shape
    if N > min(M * R, T):
        warnings.warn("component count exceeds the rank the data can support", RuntimeWarning, stacklevel=2)
    fit = _Fitter(X, N, opts)
    if init is None:
        s = initial_waveshapes(X, N, opts.seed)
        alpha = np.ones((N, R))
        tau = np.zeros((N, R), dtype=int)
        C = fit.update_coupling(s, alpha, tau)
    else:
        s, C = init.waveshapes.astype(float).copy(), init.C.astype(float).copy()
        alpha, tau = init.alpha.astype(float).copy(), init.tau.astype(int).copy()

    power = _rp(X, s, C, alpha, tau)
    trace = [power]
    converged = False
    sweep = 0
    for sweep in range(1, opts.max_sweeps + 1):
        E = fit.residual(s, C, alpha, tau)
        if not (opts.fix_alpha and opts.fix_tau):
            fit.update_alpha_tau(s, C, alpha, tau, E)
        fit.update_waveshapes(s, C, alpha, tau, E)
        C_new = fit.update_coupling(s, alpha, tau)
        # least squares is optimal, but guard against rank-deficient solves
        if _rp(X, s, C_new, alpha, tau) <= _rp(X, s, C, alpha, tau):
            C = C_new
        if opts.normalize:
            s, C, alpha, tau = normalize(s, C, alpha, tau, X, fit.tau_max)
        new_power = _rp(X, s, C, alpha, tau)
        trace.append(new_power)
        decrease = power - new_power
        power = new_power
        if decrease <= opts.tol * max(trace[0], np.finfo(float).tiny):
            converged = True
            break
    return DvcaEstimate(s, C, alpha, tau, power, sweep, tuple(trace), converged)
