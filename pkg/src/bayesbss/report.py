"""Experiment report assembly.

A report is a deterministic function of the run record: no timestamps, no
absolute paths, keys sorted.  Traces are referenced by path relative to the
output directory rather than inlined.
"""

from . import io

SCHEMA_VERSION = 1

# metric keys every stage kind must provide (value may be null when no ground truth exists)
REQUIRED_METRICS = {
    "simulate": (),
    "separate": ("amari_index", "trace_length", "converged"),
    "localize": ("chi_squared", "position_error"),
    "dvca": ("correlations", "alpha_correlations", "tau_accuracy", "residual_power", "trace_length"),
    "average": ("shape",),
    "validate-prior": ("l1", "tolerance", "passed"),
}


class ReportError(ValueError):
    pass


def build_report(run: dict):
    """Assemble ``(report_dict, summary_text)`` from a completed run record.

    ``run`` must contain ``config`` and ``stages``; each stage record needs
    ``name``, ``stage``, ``seed``, ``metrics`` and ``files``, and the metric
    keys listed in :data:`REQUIRED_METRICS` for its kind.
    """
    for key in ("config", "stages"):
        if key not in run:
            raise ReportError(f"run record is missing {key!r}")
    stages = []
    for i, st in enumerate(run["stages"]):
        for key in ("name", "stage", "seed", "metrics", "files"):
            if key not in st:
                raise ReportError(f"stage {i} ({st.get('name', '?')}) is missing {key!r}")
        missing = [k for k in REQUIRED_METRICS.get(st["stage"], ()) if k not in st["metrics"]]
        if missing:
            raise ReportError(f"stage {st['name']!r} lacks metrics {missing}")
        stages.append({
            "name": st["name"],
            "stage": st["stage"],
            "seed": st["seed"],
            "metrics": st["metrics"],
            "files": sorted(st["files"]),
            "traces": st.get("traces", {}),
        })
    report = io.to_jsonable({
        "schema_version": SCHEMA_VERSION,
        "config": run["config"],
        "seed": run["config"].get("seed"),
        "stages": stages,
    })
    return report, summarize(report)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k}: {_fmt(v[k])}" for k in sorted(v)) + "}"
    return str(v)


def summarize(report) -> str:
    lines = [f"report schema {report['schema_version']}, seed {report['seed']}"]
    for st in report["stages"]:
        lines.append(f"[{st['stage']}] {st['name']} (seed {st['seed']})")
        for k in sorted(st["metrics"]):
            lines.append(f"    {k}: {_fmt(st['metrics'][k])}")
    return "\n".join(lines) + "\n"
