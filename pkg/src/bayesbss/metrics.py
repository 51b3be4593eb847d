"""Separation-quality metrics and component matching."""

import itertools
from dataclasses import dataclass

import numpy as np

from .signalgen import shift


def amari_index(W, A_true):
    """Amari performance index of ``P = W @ A_true``, normalized to ``[0, 1]``.

        sum_i (sum_j |p_ij| / max_k |p_ik| - 1) + sum_j (sum_i |p_ij| / max_k |p_kj| - 1)

    divided by ``2 N (N - 1)``.  Zero exactly when ``P`` is a scaled
    permutation; 1 when every entry of ``P`` has the same magnitude.  For
    ``N = 1`` the index is always 0.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    A_true = np.atleast_2d(np.asarray(A_true, dtype=float))
    if W.shape[0] != W.shape[1] or A_true.shape != W.shape:
        raise ValueError(f"need square matrices of equal size, got {W.shape} and {A_true.shape}")
    N = W.shape[0]
    if N == 1:
        return 0.0
    P = np.abs(W @ A_true)
    rows = (P.sum(axis=1) / P.max(axis=1) - 1.0).sum()
    cols = (P.sum(axis=0) / P.max(axis=0) - 1.0).sum()
    return float((rows + cols) / (2.0 * N * (N - 1)))


def _standardize(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X = X - X.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(norms > 0, norms, 1.0)


def correlation_matrix(est, true):
    """``corr[i, j]`` between estimated row ``i`` and true row ``j`` (mean removed, unit norm)."""
    return _standardize(est) @ _standardize(true).T


@dataclass(frozen=True)
class MatchReport:
    """Assignment of estimated components to true ones.

    ``permutation[j]`` is the estimated index matched to true component ``j``;
    ``correlations[j]`` is the sign-corrected correlation of that pair and
    ``flipped[j]`` records whether the estimate had to be negated.
    ``lags[j]`` is the delay applied to the estimate before comparing (all
    zero unless matching was asked to absorb a latency offset).
    """

    permutation: tuple
    correlations: tuple
    flipped: tuple
    lags: tuple = ()

    def to_dict(self):
        return {
            "permutation": list(self.permutation),
            "correlations": list(self.correlations),
            "flipped": list(self.flipped),
            "lags": list(self.lags) or [0] * len(self.permutation),
        }


def lagged_correlation_matrix(est, true, max_lag):
    """Like :func:`correlation_matrix`, maximized in magnitude over delays of ``est``.

    Returns ``(corr, lags)``; ``lags[i, j]`` is the zero-padded delay of
    ``est[i]`` that best matches ``true[j]`` (smallest ``|lag|`` on ties).
    """
    est = np.atleast_2d(np.asarray(est, dtype=float))
    true = np.atleast_2d(np.asarray(true, dtype=float))
    order = sorted(range(-max_lag, max_lag + 1), key=lambda k: (abs(k), k))
    corr = np.zeros((est.shape[0], true.shape[0]))
    lags = np.zeros(corr.shape, dtype=int)
    for k in order:
        c = correlation_matrix(shift(est, k), true)
        better = np.abs(c) > np.abs(corr) + 1e-12
        corr[better] = c[better]
        lags[better] = k
    return corr, lags


def match_components(est, true, max_lag=0) -> MatchReport:
    """Pair estimated and true waveshapes by maximal total ``|correlation|``.

    Exhaustive over permutations for ``N <= 6``; greedy on the largest
    remaining ``|correlation|`` above that.  With ``max_lag > 0`` each pair
    is compared at its best relative delay, which absorbs the latency offset
    that time-shift models cannot identify.
    """
    est = np.atleast_2d(np.asarray(est, dtype=float))
    true = np.atleast_2d(np.asarray(true, dtype=float))
    if est.shape[0] != true.shape[0]:
        raise ValueError(f"component count mismatch: {est.shape[0]} estimated vs {true.shape[0]} true")
    N = true.shape[0]
    if max_lag > 0:
        corr, lag_mat = lagged_correlation_matrix(est, true, max_lag)
    else:
        corr, lag_mat = correlation_matrix(est, true), np.zeros((N, N), dtype=int)
    mag = np.abs(corr)
    if N <= 6:
        best, perm = -np.inf, None
        for p in itertools.permutations(range(N)):
            total = sum(mag[p[j], j] for j in range(N))
            if total > best + 1e-15:
                best, perm = total, p
    else:
        perm = [None] * N
        used_est, used_true = set(), set()
        for flat in np.argsort(-mag, axis=None, kind="stable"):
            i, j = np.unravel_index(flat, mag.shape)
            if i in used_est or j in used_true:
                continue
            perm[j] = int(i)
            used_est.add(i)
            used_true.add(j)
        perm = tuple(perm)
    c = [float(corr[perm[j], j]) for j in range(N)]
    flipped = tuple(bool(x < 0) for x in c)
    lags = tuple(int(lag_mat[perm[j], j]) for j in range(N))
    return MatchReport(tuple(int(i) for i in perm), tuple(float(np.clip(abs(x), -1, 1)) for x in c), flipped, lags)


def align_to(est, true, report: MatchReport):
    """Reorder, delay, sign-correct and least-squares rescale ``est`` onto ``true``."""
    est = np.atleast_2d(np.asarray(est, dtype=float))
    true = np.atleast_2d(np.asarray(true, dtype=float))
    out = np.empty_like(true)
    lags = report.lags or (0,) * len(report.permutation)
    for j, i in enumerate(report.permutation):
        e = shift(est[i], lags[j])
        denom = e @ e
        out[j] = e * (e @ true[j] / denom if denom > 0 else 0.0)
    return out
