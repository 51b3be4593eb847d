"""Strict experiment configuration.

A config is a JSON object::

    {
      "version": 1,
      "seed": 0,
      "output_dir": "runs/demo",          # optional, the CLI --out wins
      "stages": [ {"stage": "simulate", "kind": "mixture", ...}, ... ]
    }

Every stage has ``stage`` (its type), an optional unique ``name`` (defaults to
``<stage>_<index>``) and optional ``seed`` (defaults to the global seed).
Consumers pick their input with ``from`` (an earlier stage name) or an
explicit file path; without either they take the most recent stage that
produces what they need.  Unknown keys anywhere in a stage are rejected.
"""

import copy
import json
import re

from .densities import MatrixPrior, density_from_dict

CONFIG_VERSION = 1
TOP_KEYS = {"version", "seed", "output_dir", "stages", "description"}
COMMON = {"stage", "name", "seed"}

SIMULATE_KEYS = {
    "mixture": {"kind", "T", "sources", "mixing", "sigma"},
    "ensemble": {"kind", "T", "R", "M", "components", "coupling", "alpha_spread", "tau_spread",
                 "tau_max", "snr", "sigma"},
    "localization": {"kind", "T", "geometry", "sources", "noise"},
}

STAGE_KEYS = {
    "separate": {"from", "recordings", "truth_mixing", "density", "prior", "mode", "objective",
                 "step", "tol", "max_iter", "init", "whiten"},
    "localize": {"from", "recordings", "geometry", "n_sources", "grid_step", "n_orientations",
                 "refine_tol", "rounds", "truth_positions"},
    "dvca": {"from", "ensemble", "n_components", "tau_max", "max_sweeps", "tol", "fix_alpha", "fix_tau"},
    "average": {"from", "ensemble"},
    "validate-prior": {"R", "n", "bins"},
}

# what each stage needs from upstream, and what it provides downstream
NEEDS = {"separate": "recordings", "localize": "geometry", "dvca": "ensemble", "average": "ensemble"}
FILE_INPUT = {"separate": "recordings", "localize": "recordings", "dvca": "ensemble", "average": "ensemble"}
PROVIDES = {"mixture": {"recordings"}, "ensemble": {"ensemble"}, "localization": {"recordings", "geometry"}}

MIN_PRIOR_SAMPLES = 10_000
NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (exit status 2)."""


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _pos_int(st, key, default=None, minimum=1):
    v = st.get(key, default)
    _require(_is_int(v) and v >= minimum, f"{st['name']}.{key} must be an integer >= {minimum}, got {v!r}")
    return v


def _pos_num(st, key, default=None, allow_zero=False):
    v = st.get(key, default)
    ok = _is_num(v) and (v >= 0 if allow_zero else v > 0)
    _require(ok, f"{st['name']}.{key} must be a {'nonnegative' if allow_zero else 'positive'} number, got {v!r}")
    return v


def parse_config(text_or_dict):
    """Parse and validate a config; returns a normalized deep copy."""
    if isinstance(text_or_dict, (str, bytes)):
        try:
            cfg = json.loads(text_or_dict)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}") from None
    else:
        cfg = copy.deepcopy(text_or_dict)
    _require(isinstance(cfg, dict), "config must be a JSON object")
    unknown = set(cfg) - TOP_KEYS
    _require(not unknown, f"unknown top-level keys: {sorted(unknown)}")
    _require(cfg.get("version") == CONFIG_VERSION, f"config version must be {CONFIG_VERSION}")
    cfg.setdefault("seed", 0)
    _require(_is_int(cfg["seed"]) and cfg["seed"] >= 0, "seed must be a nonnegative integer")
    stages = cfg.setdefault("stages", [])
    _require(isinstance(stages, list), "stages must be a list")

    provided = []  # (name, set of products) in order
    names = set()
    for i, st in enumerate(stages):
        _require(isinstance(st, dict), f"stage {i} must be an object")
        kind = st.get("stage")
        _require(kind == "simulate" or kind in STAGE_KEYS, f"stage {i}: unknown stage type {kind!r}")
        st.setdefault("name", f"{kind}_{i}")
        name = st["name"]
        _require(isinstance(name, str) and NAME_RE.match(name), f"stage {i}: invalid name {name!r}")
        _require(name not in names, f"duplicate stage name {name!r}")
        names.add(name)
        st.setdefault("seed", cfg["seed"])
        _require(_is_int(st["seed"]) and st["seed"] >= 0, f"{name}.seed must be a nonnegative integer")

        if kind == "simulate":
            sim = st.get("kind")
            _require(sim in SIMULATE_KEYS, f"{name}: simulate kind must be one of {sorted(SIMULATE_KEYS)}")
            allowed = SIMULATE_KEYS[sim] | COMMON
        else:
            allowed = STAGE_KEYS[kind] | COMMON
        unknown = set(st) - allowed
        _require(not unknown, f"{name}: unknown keys {sorted(unknown)}")

        _validate_stage(st, kind)

        if kind in NEEDS:
            need = NEEDS[kind]
            if "from" in st:
                src = dict(provided).get(st["from"])
                _require(src is not None, f"{name}: 'from' refers to {st['from']!r}, which is not an earlier stage")
                _require(need in src, f"{name}: stage {st['from']!r} does not produce {need}")
            elif FILE_INPUT[kind] not in st:
                candidates = [n for n, prods in provided if need in prods]
                _require(candidates, f"{name}: no earlier stage produces {need} and no input file given")
                st["from"] = candidates[-1]
            if kind == "localize" and "from" not in st:
                _require("geometry" in st, f"{name}: a file-based localize stage needs 'geometry'")
        provided.append((name, PROVIDES.get(st.get("kind"), set()) if kind == "simulate" else set()))
    return cfg


def _validate_stage(st, kind):
    name = st["name"]
    if kind == "simulate":
        _pos_int(st, "T")
        sim = st["kind"]
        if sim == "mixture":
            src = st.get("sources")
            _require(isinstance(src, list) and src, f"{name}.sources must be a nonempty list")
            for s in src:
                _require(isinstance(s, dict) and "family" in s, f"{name}: each source needs a family")
                _require(set(s) <= {"family", "params", "seed"}, f"{name}: unknown source keys {sorted(set(s))}")
            _pos_num(st, "sigma", 0.0, allow_zero=True)
            mixing = st.get("mixing", {"random": {}})
            _require(isinstance(mixing, (list, dict)), f"{name}.mixing must be a matrix or {{'random': {{...}}}}")
            if isinstance(mixing, dict):
                _require(set(mixing) == {"random"} and isinstance(mixing["random"], dict)
                         and set(mixing["random"]) <= {"cond_max"},
                         f"{name}.mixing must be {{'random': {{'cond_max': ...}}}}")
        elif sim == "ensemble":
            _pos_int(st, "R")
            comps = st.get("components")
            _require(isinstance(comps, list) and comps, f"{name}.components must be a nonempty list")
            for c in comps:
                _require(isinstance(c, dict) and set(c) <= {"center", "width", "freq", "phase"}
                         and {"center", "width"} <= set(c), f"{name}: components need center and width")
            _require("coupling" in st or "M" in st, f"{name}: give either coupling or M")
            _pos_num(st, "alpha_spread", 0.3, allow_zero=True)
            _pos_int(st, "tau_spread", 0, minimum=0)
            if "tau_max" in st:
                _pos_int(st, "tau_max", minimum=0)
                _require(st["tau_max"] < st["T"] / 4, f"{name}.tau_max must be below T/4")
            _require(not ("snr" in st and "sigma" in st), f"{name}: give snr or sigma, not both")
            if "snr" in st:
                _pos_num(st, "snr")
            if "sigma" in st:
                _pos_num(st, "sigma", allow_zero=True)
        else:
            geo = st.get("geometry")
            _require(isinstance(geo, dict), f"{name}.geometry must be an object")
            _require(set(geo) <= {"detectors", "half_width", "radius", "model", "sigma", "center"},
                     f"{name}.geometry has unknown keys")
            src = st.get("sources")
            _require(isinstance(src, list), f"{name}.sources must be a list")
            for s in src:
                _require(isinstance(s, dict) and "position" in s and "signal" in s
                         and set(s) <= {"position", "orientation", "signal"},
                         f"{name}: sources need position and signal")
            _require(isinstance(st.get("noise", False), bool), f"{name}.noise must be true or false")
    elif kind == "separate":
        dens = st.get("density", {"family": "logistic"})
        try:
            if isinstance(dens, list):
                [density_from_dict(d) for d in dens]
            else:
                density_from_dict(dens)
            MatrixPrior.from_dict(st.get("prior", {"kind": "none"}))
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"{name}: {e}") from None
        _require(st.get("mode", "natural") in ("vanilla", "natural"), f"{name}.mode must be vanilla or natural")
        _require(st.get("objective", "posterior-A") in ("posterior-A", "jacobian-W"),
                 f"{name}.objective must be posterior-A or jacobian-W")
        _require(st.get("init", "identity") in ("identity", "random-orthogonal"),
                 f"{name}.init must be identity or random-orthogonal")
        _pos_num(st, "step", 0.1)
        _pos_num(st, "tol", 1e-9)
        _pos_int(st, "max_iter", 2000, minimum=0)
        _require(isinstance(st.get("whiten", False), bool), f"{name}.whiten must be true or false")
    elif kind == "localize":
        _pos_int(st, "n_sources", 1, minimum=0)
        _pos_num(st, "grid_step", 0.1)
        _pos_int(st, "n_orientations", 64)
        _pos_num(st, "refine_tol", 1e-10)
        _pos_int(st, "rounds", 3)
    elif kind == "dvca":
        _pos_int(st, "n_components", 1)
        if "tau_max" in st:
            _pos_int(st, "tau_max", minimum=0)
        _pos_int(st, "max_sweeps", 200, minimum=0)
        _pos_num(st, "tol", 1e-9)
        for k in ("fix_alpha", "fix_tau"):
            _require(isinstance(st.get(k, False), bool), f"{name}.{k} must be true or false")
    elif kind == "validate-prior":
        _pos_num(st, "R", 1.0)
        n = _pos_int(st, "n", 1_000_000)
        _require(n >= MIN_PRIOR_SAMPLES, f"{name}.n must be at least {MIN_PRIOR_SAMPLES}, got {n}")
        _pos_int(st, "bins", 100, minimum=2)


def apply_overrides(cfg: dict, overrides):
    """Apply ``key=value`` overrides; keys are dotted paths, list indices numeric.

    Values are parsed as JSON when possible, otherwise taken as strings.
    """
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        _require(sep == "=" and key, f"override {item!r} must look like key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            node = _descend(node, p, item)
        last = parts[-1]
        if isinstance(node, list):
            _require(last.isdigit() and int(last) < len(node), f"override {item!r}: bad list index {last}")
            node[int(last)] = value
        else:
            _require(isinstance(node, dict), f"override {item!r}: cannot set a key inside a non-object")
            node[last] = value
    return cfg


def _descend(node, p, item):
    if isinstance(node, list):
        if not p.isdigit():
            # list elements may be addressed by name, e.g. stages.fit.step=0.2
            named = [x for x in node if isinstance(x, dict) and x.get("name") == p]
            _require(len(named) == 1, f"override {item!r}: no unique element named {p!r}")
            return named[0]
        _require(int(p) < len(node), f"override {item!r}: bad list index {p}")
        return node[int(p)]
    _require(isinstance(node, dict), f"override {item!r}: path goes through a non-object")
    if p not in node:
        node[p] = {}
    return node[p]
