"""Config-driven experiment runner.

Each stage writes into ``<output_dir>/<stage name>/`` and hands its in-memory
products to later stages.  After the last stage (or the first failure) the
runner writes ``report.json``, ``summary.txt`` and, on failure,
``error.json``; ``manifest.json`` lists every artifact with its sha256.

Seeds: a stage's ``seed`` (default: the global seed) drives everything random
in it.  Derived sub-seeds are fixed offsets of it:

    mixture       source j: seed + j (unless the source gives its own),
                  random mixing: seed + 1000, detector noise: seed + 2000
    ensemble      coupling: seed + 1000, amplitudes: seed + 3000,
                  latencies: seed + 4000, noise: seed + 2000
    localization  source j signal: seed + j, detector noise: seed + 2000
    separate      random-orthogonal init: seed
    localize      grid visiting order: seed
    dvca          seed pads the initial waveshapes when the data rank is short
    validate-prior  ball samples: seed
"""

import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import io
from .config import ConfigError, apply_overrides, parse_config
from .densities import DomainError, MatrixPrior, density_from_dict
from .dvca import DvcaOptions, average_trials, dvca_fit
from .localization import GeometryConfig, SingularityError, cube_detectors, gain_matrix, localize
from .metrics import match_components
from .propagation import compare_histogram, monte_carlo_mixing_samples
from .report import build_report
from .separation import ModelError, SeparationConfig, separate
from .signalgen import (SourceSpec, default_tau_max, gabor, gen_source, gen_sources, gen_trial_ensemble, mix,
                        random_mixing)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_PARSE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
LOCK_NAME = ".lock"
TOP_LEVEL = ("manifest.json", "report.json", "summary.txt", "error.json")
NUMERICAL_ERRORS = (ModelError, SingularityError, DomainError, FloatingPointError, np.linalg.LinAlgError)


@dataclass
class Products:
    """What a stage hands downstream."""

    recordings: Optional[np.ndarray] = None
    mixing: Optional[np.ndarray] = None
    geometry: Optional[GeometryConfig] = None
    positions: Optional[np.ndarray] = None
    ensemble: object = None


@dataclass
class RunResult:
    status: int
    output_dir: Path
    report: Optional[dict] = None
    error: Optional[dict] = None
    stages: list = field(default_factory=list)


class LockError(OSError):
    pass


def exit_status(exc) -> int:
    if isinstance(exc, NUMERICAL_ERRORS):
        return EXIT_NUMERIC
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_PARSE


def _stage_seed_sources(st, seed):
    specs = []
    for j, s in enumerate(st["sources"]):
        specs.append(SourceSpec(s["family"], dict(s.get("params", {})), s.get("seed", seed + j)))
    return specs


def _simulate_mixture(st, d, seed):
    T = st["T"]
    specs = _stage_seed_sources(st, seed)
    S = gen_sources(specs, T)
    N = len(specs)
    mixing = st.get("mixing", {"random": {}})
    if isinstance(mixing, dict):
        A = random_mixing(N, seed + 1000, **mixing["random"])
    else:
        A = np.asarray(mixing, dtype=float)
        if A.shape != (N, N):
            raise ValueError(f"mixing must be {N} x {N}, got {A.shape}")
    rec = mix(A, S, st.get("sigma", 0.0), seed + 2000)
    io.write_bundle(d, {"sources": S, "mixing": A, "recordings": rec.values},
                    {"T": T, "sigma": rec.noise_sigma, "sources": [s.to_dict() for s in specs]})
    metrics = {"N": N, "T": T, "sigma": rec.noise_sigma, "mixing_condition": float(np.linalg.cond(A))}
    return metrics, {}, Products(recordings=rec.values, mixing=A)


def _simulate_ensemble(st, d, seed):
    T, R = st["T"], st["R"]
    S = np.array([gabor(T, c["center"], c["width"], c.get("freq", 0.0), c.get("phase", 0.0))
                  for c in st["components"]])
    N = S.shape[0]
    if "coupling" in st:
        C = np.atleast_2d(np.asarray(st["coupling"], dtype=float))
    else:
        C = np.random.default_rng(seed + 1000).normal(size=(st["M"], N))
    spread = st.get("alpha_spread", 0.3)
    alpha = np.exp(spread * np.random.default_rng(seed + 3000).normal(size=(N, R)))
    alpha /= alpha.mean(axis=1, keepdims=True)
    ts = st.get("tau_spread", 0)
    tau = np.random.default_rng(seed + 4000).integers(-ts, ts + 1, size=(N, R))
    # centre latencies so the generating parameters already sit in the fitted gauge
    tau -= np.round(tau.mean(axis=1, keepdims=True)).astype(int)
    tau_max = st.get("tau_max", min(default_tau_max(T), 2 * ts))
    clean = gen_trial_ensemble(S, C, alpha, tau, 0.0, tau_max=tau_max).values
    if "snr" in st:
        sigma = float(np.sqrt(np.mean(clean**2)) / st["snr"])
    else:
        sigma = float(st.get("sigma", 0.0))
    ens = gen_trial_ensemble(S, C, alpha, tau, sigma, seed + 2000, tau_max=tau_max)
    io.write_ensemble(d, ens)
    metrics = {"M": C.shape[0], "N": N, "R": R, "T": T, "sigma": sigma, "tau_max": ens.tau_max}
    return metrics, {}, Products(ensemble=ens)


def _geometry(g):
    g = dict(g)
    det = g.pop("detectors", "cube")
    hw = g.pop("half_width", 1.0)
    det = cube_detectors(hw) if det == "cube" else np.asarray(det, dtype=float)
    return GeometryConfig(det, float(g.pop("radius", 1.0)), g.pop("model", "point"),
                          g.pop("sigma", 1.0), g.pop("center", (0.0, 0.0, 0.0)))


def _simulate_localization(st, d, seed):
    T = st["T"]
    geo = _geometry(st["geometry"])
    P = np.array([s["position"] for s in st["sources"]], dtype=float).reshape(-1, 3)
    Q = None
    if geo.model == "dipole":
        Q = np.array([s["orientation"] for s in st["sources"]], dtype=float).reshape(-1, 3)
        Q = Q / np.linalg.norm(Q, axis=1, keepdims=True)
    S = np.array([gen_source(SourceSpec(s["signal"]["family"], dict(s["signal"].get("params", {})),
                                        s["signal"].get("seed", seed + j)), T)
                  for j, s in enumerate(st["sources"])]).reshape(-1, T)
    X = gain_matrix(geo, P, Q) @ S
    if st.get("noise", False):
        X = X + np.random.default_rng(seed + 2000).normal(size=X.shape) * geo.sigma[:, None]
    io.write_matrix(d / "recordings.csv", X)
    io.write_matrix(d / "truth_positions.csv", P)
    io.write_matrix(d / "truth_waveshapes.csv", S)
    if Q is not None:
        io.write_matrix(d / "truth_orientations.csv", Q)
    io.write_json(d / "geometry.json", geo.to_dict())
    metrics = {"n_detectors": geo.n_detectors, "n_sources": P.shape[0], "T": T}
    return metrics, {}, Products(recordings=X, geometry=geo, positions=P)


def _input_recordings(st, ctx, base):
    if "from" in st:
        return ctx[st["from"]]
    path = base / st["recordings"]
    X = io.read_matrix(path)
    truth = io.read_matrix(base / st["truth_mixing"]) if st.get("truth_mixing") else None
    return Products(recordings=X, mixing=truth)


def _separate(st, d, seed, ctx, base):
    src = _input_recordings(st, ctx, base)
    dens = st.get("density", {"family": "logistic"})
    dens = [density_from_dict(x) for x in dens] if isinstance(dens, list) else density_from_dict(dens)
    cfg = SeparationConfig(densities=dens, matrix_prior=MatrixPrior.from_dict(st.get("prior", {"kind": "none"})),
                           step=st.get("step", 0.1), max_iter=st.get("max_iter", 2000), tol=st.get("tol", 1e-9),
                           mode=st.get("mode", "natural"), objective=st.get("objective", "posterior-A"),
                           init=st.get("init", "identity"), seed=seed, whiten=st.get("whiten", False))
    res = separate(src.recordings, cfg, A_true=src.mixing)
    trace = np.column_stack([np.arange(len(res.log_posterior_trace)), res.log_posterior_trace])
    io.write_matrix(d / "W.csv", res.W)
    io.write_matrix(d / "unmixed.csv", res.unmixed)
    io.write_matrix(d / "trace.csv", trace)
    metrics = {"amari_index": res.amari_index, "trace_length": len(res.log_posterior_trace),
               "converged": res.converged, "n_iter": res.n_iter,
               "final_log_posterior": float(res.log_posterior_trace[-1])}
    return metrics, {"log_posterior": "trace.csv"}, Products()


def _localize(st, d, seed, ctx, base):
    if "from" in st:
        src = ctx[st["from"]]
        geo = src.geometry if "geometry" not in st else _geometry(st["geometry"])
        X, truth = src.recordings, src.positions
    else:
        X = io.read_matrix(base / st["recordings"])
        geo = _geometry(st["geometry"])
        truth = io.read_matrix(base / st["truth_positions"]) if st.get("truth_positions") else None
    est = localize(X, geo, st.get("n_sources", 1), grid_step=st.get("grid_step", 0.1),
                   n_orientations=st.get("n_orientations", 64), refine_tol=st.get("refine_tol", 1e-10),
                   rounds=st.get("rounds", 3), seed=seed)
    io.write_matrix(d / "positions.csv", est.positions)
    io.write_matrix(d / "waveshapes.csv", est.waveshapes)
    if est.orientations is not None:
        io.write_matrix(d / "orientations.csv", est.orientations)
    io.write_matrix(d / "trace.csv", np.column_stack([np.arange(len(est.trace)), est.trace]))
    errors = None
    if truth is not None and truth.shape == est.positions.shape and truth.shape[0] > 0:
        dist = np.linalg.norm(truth[:, None, :] - est.positions[None, :, :], axis=-1)
        rows, cols = linear_sum_assignment(dist)
        errors = dist[rows, cols]
    metrics = {"chi_squared": est.chi_squared,
               "position_error": None if errors is None else float(errors.max()),
               "position_errors": None if errors is None else errors.tolist(),
               "n_sources": est.n_sources, "grid_step": st.get("grid_step", 0.1)}
    return metrics, {"chi_squared": "trace.csv"}, Products()


def _input_ensemble(st, ctx, base):
    if "from" in st:
        return ctx[st["from"]].ensemble
    return io.read_ensemble(base / st["ensemble"])


def _dvca(st, d, seed, ctx, base):
    ens = _input_ensemble(st, ctx, base)
    tau_max = st.get("tau_max", ens.tau_max)
    opts = DvcaOptions(tau_max=tau_max, max_sweeps=st.get("max_sweeps", 200), tol=st.get("tol", 1e-9),
                       fix_alpha=st.get("fix_alpha", False), fix_tau=st.get("fix_tau", False), seed=seed)
    est = dvca_fit(ens, st.get("n_components", 1), opts)
    io.write_matrix(d / "waveshapes.csv", est.waveshapes)
    io.write_matrix(d / "coupling.csv", est.C)
    io.write_matrix(d / "alpha.csv", est.alpha)
    io.write_matrix(d / "tau.csv", est.tau)
    io.write_matrix(d / "trace.csv", np.column_stack([np.arange(len(est.trace)), est.trace]))
    trace = np.asarray(est.trace)
    metrics = {"residual_power": est.residual_power, "trace_length": len(est.trace),
               "iterations": est.iterations, "converged": est.converged,
               "monotone": bool(np.all(np.diff(trace) <= 1e-12 * trace[:-1])),
               "correlations": None, "alpha_correlations": None, "tau_accuracy": None, "match": None}
    t = ens.truth
    if t is not None and t.waveshapes.shape == est.waveshapes.shape:
        rep = match_components(est.waveshapes, t.waveshapes, max_lag=int(tau_max or 0))
        a_corr, acc = [], []
        for j, i in enumerate(rep.permutation):
            a_corr.append(float(np.corrcoef(est.alpha[i], t.alpha[j])[0, 1]))
            # a waveshape estimate delayed by k pairs with latencies shifted by +k
            err = est.tau[i] - rep.lags[j] - t.tau[j]
            acc.append(float(np.mean(np.abs(err) <= 1)))
        metrics.update(correlations=list(rep.correlations), alpha_correlations=a_corr, tau_accuracy=acc,
                       match=rep.to_dict())
    return metrics, {"residual_power": "trace.csv"}, Products()


def _average(st, d, seed, ctx, base):
    ens = _input_ensemble(st, ctx, base)
    avg = average_trials(ens)
    io.write_matrix(d / "average.csv", avg)
    return {"shape": list(avg.shape)}, {}, Products()


def _validate_prior(st, d, seed, ctx, base):
    R, n, bins = st.get("R", 1.0), st.get("n", 1_000_000), st.get("bins", 100)
    cmp = compare_histogram(monte_carlo_mixing_samples(R, n, seed), R, bins)
    table = np.column_stack([cmp.edges[:-1], cmp.edges[1:], cmp.expected, cmp.observed])
    io.write_matrix(d / "comparison.csv", table)
    metrics = {"l1": cmp.l1, "tolerance": cmp.tolerance, "passed": cmp.passed, "R": R, "n": n, "bins": bins}
    return metrics, {}, Products()


SIMULATORS = {"mixture": _simulate_mixture, "ensemble": _simulate_ensemble, "localization": _simulate_localization}
RUNNERS = {"separate": _separate, "localize": _localize, "dvca": _dvca, "average": _average,
           "validate-prior": _validate_prior}


def run_stage(st, stage_dir, ctx, base):
    if st["stage"] == "simulate":
        return SIMULATORS[st["kind"]](st, stage_dir, st["seed"])
    return RUNNERS[st["stage"]](st, stage_dir, st["seed"], ctx, base)


def _acquire_lock(out):
    try:
        fd = os.open(out / LOCK_NAME, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out} is locked by another run (remove {LOCK_NAME} if stale)") from None
    with os.fdopen(fd, "w") as f:
        f.write(f"{os.getpid()}\n")


def load_config(source, overrides=()):
    """Read a config from a path, JSON text or dict, apply overrides and validate."""
    if isinstance(source, dict):
        raw = source
    else:
        try:
            raw = json.loads(Path(source).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{source}: invalid JSON: {e}") from None
    return parse_config(apply_overrides(raw, overrides))


def run(cfg: dict, output_dir, base_dir=".") -> RunResult:
    """Execute a validated config; never raises for stage failures.

    ``base_dir`` resolves relative input paths inside stages.
    """
    out = Path(output_dir)
    base = Path(base_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _acquire_lock(out)
    except OSError as e:
        return RunResult(EXIT_IO, out, error={"type": type(e).__name__, "message": str(e)})

    status, error = EXIT_OK, None
    records, ctx = [], {}
    try:
        for name in TOP_LEVEL:
            (out / name).unlink(missing_ok=True)
        for st in cfg["stages"]:
            d = out / st["name"]
            if d.exists():
                shutil.rmtree(d)
            d.mkdir(parents=True)
            try:
                with np.errstate(over="ignore", under="ignore"):
                    metrics, traces, products = run_stage(st, d, ctx, base)
            except Exception as e:  # classified into an exit status below
                status = exit_status(e)
                error = {"stage": st["name"], "type": type(e).__name__, "message": str(e),
                         "status": status}
                logger.debug("stage %s failed", st["name"], exc_info=True)
                break
            ctx[st["name"]] = products
            files = [f"{st['name']}/{f}" for f in io.relative_files(d)]
            records.append({"name": st["name"], "stage": st["stage"], "seed": st["seed"], "metrics": metrics,
                            "files": files, "traces": {k: f"{st['name']}/{v}" for k, v in traces.items()}})

        echo = {k: v for k, v in cfg.items() if k != "output_dir"}
        report, summary = build_report({"config": echo, "stages": records})
        io.write_json(out / "report.json", report)
        if error is not None:
            io.write_json(out / "error.json", error)
            summary += f"FAILED at stage {error['stage']}: {error['type']}: {error['message']}\n"
        (out / "summary.txt").write_text(summary)
        write_manifest(out, cfg)
    except OSError as e:
        status = EXIT_IO
        error = {"type": type(e).__name__, "message": str(e), "status": status}
        report = None
    finally:
        (out / LOCK_NAME).unlink(missing_ok=True)
    return RunResult(status, out, report if status != EXIT_IO else None, error, records)


def write_manifest(out, cfg):
    """List every artifact (stage directories and top-level files) with its sha256.

    An empty stage list gives an empty manifest.
    """
    files = {}
    if cfg["stages"]:
        names = [st["name"] for st in cfg["stages"] if (out / st["name"]).is_dir()]
        for name in names:
            for f in io.relative_files(out / name):
                files[f"{name}/{f}"] = io.sha256_file(out / name / f)
        for f in ("report.json", "summary.txt", "error.json"):
            if (out / f).exists():
                files[f] = io.sha256_file(out / f)
    io.write_json(out / "manifest.json", {"files": files})
