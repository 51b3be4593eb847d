"""File formats.

Matrices are CSV with a one-line ``rows,cols`` header followed by the rows
(full ``%.17g`` precision, so values round-trip exactly).  Bundles and trial
ensembles are several CSV files tied together by a JSON manifest whose paths
are relative to the manifest's directory.
"""

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .signalgen import EnsembleTruth, TrialEnsemble, model_ensemble


def write_matrix(path, M):
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[None, :]
    if M.ndim != 2:
        raise ValueError("only 2-D matrices can be written")
    rows, cols = M.shape
    with open(path, "w", newline="\n") as f:
        f.write(f"{rows},{cols}\n")
        for row in M:
            f.write(",".join("%.17g" % v for v in row))
            f.write("\n")
    return Path(path)


def read_matrix(path):
    with open(path) as f:
        header = f.readline().strip()
        try:
            rows, cols = (int(x) for x in header.split(","))
        except ValueError:
            raise ValueError(f"{path}: first line must be 'rows,cols', got {header!r}") from None
        body = [line for line in f.read().splitlines() if line.strip()]
    if rows == 0 or cols == 0:
        return np.zeros((rows, cols))
    if len(body) != rows:
        raise ValueError(f"{path}: header says {rows} rows, found {len(body)}")
    M = np.array([[float(v) for v in line.split(",")] for line in body])
    if M.shape != (rows, cols):
        raise ValueError(f"{path}: header says {rows}x{cols}, found {M.shape}")
    return M


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, Path):
        return obj.as_posix()
    return obj


def dumps(obj):
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    with open(path, "w", newline="\n") as f:
        f.write(dumps(obj))
    return Path(path)


def read_json(path):
    with open(path) as f:
        return json.load(f)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_bundle(directory, matrices: dict, params: dict, name="bundle.json"):
    """Write each matrix to ``<key>.csv`` and a manifest linking them with ``params``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for key, M in matrices.items():
        write_matrix(directory / f"{key}.csv", M)
        files[key] = f"{key}.csv"
    return write_json(directory / name, {"files": files, "params": params})


def read_bundle(manifest_path):
    manifest_path = Path(manifest_path)
    meta = read_json(manifest_path)
    base = manifest_path.parent
    mats = {k: read_matrix(base / v) for k, v in meta["files"].items()}
    return mats, meta.get("params", {})


def write_ensemble(directory, ensemble: TrialEnsemble, name="ensemble.json"):
    """One ``R x T`` CSV per detector plus a manifest (and truth files when known)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    M, R, T = ensemble.values.shape
    detectors = []
    for m in range(M):
        fn = f"detector_{m}.csv"
        write_matrix(directory / fn, ensemble.values[m])
        detectors.append(fn)
    meta = {"M": M, "R": R, "T": T, "tau_max": ensemble.tau_max, "detectors": detectors}
    t = ensemble.truth
    if t is not None:
        truth_files = {}
        for key, val in (("waveshapes", t.waveshapes), ("coupling", t.C), ("alpha", t.alpha), ("tau", t.tau)):
            fn = f"truth_{key}.csv"
            write_matrix(directory / fn, val)
            truth_files[key] = fn
        meta["truth"] = {"files": truth_files, "sigma": t.sigma}
    return write_json(directory / name, meta)


def read_ensemble(manifest_path) -> TrialEnsemble:
    manifest_path = Path(manifest_path)
    meta = read_json(manifest_path)
    base = manifest_path.parent
    values = np.stack([read_matrix(base / fn) for fn in meta["detectors"]])
    if values.shape != (meta["M"], meta["R"], meta["T"]):
        raise ValueError(f"{manifest_path}: detector files do not match declared shape")
    truth = None
    if "truth" in meta:
        tf = meta["truth"]["files"]
        S = read_matrix(base / tf["waveshapes"])
        C = read_matrix(base / tf["coupling"])
        alpha = read_matrix(base / tf["alpha"])
        tau = read_matrix(base / tf["tau"]).astype(int)
        noise = values - model_ensemble(S, C, alpha, tau)
        truth = EnsembleTruth(S, C, alpha, tau, float(meta["truth"]["sigma"]), noise)
    return TrialEnsemble(values, truth, meta.get("tau_max"))


def relative_files(root):
    """All regular files under ``root`` as sorted POSIX paths relative to it."""
    root = Path(root)
    out = []
    for dirpath, _, names in os.walk(root):
        for n in names:
            out.append((Path(dirpath) / n).relative_to(root).as_posix())
    return sorted(out)
