"""Command-line entry point.

    bayesbss run CONFIG|demo:NAME --out DIR [--set key=value ...]
    bayesbss simulate --kind mixture --out DIR [--set ...]
    bayesbss separate --recordings FILE --out DIR [--set ...]
    bayesbss localize --recordings FILE --geometry FILE --out DIR
    bayesbss dvca --ensemble FILE --out DIR
    bayesbss average --ensemble FILE --out DIR
    bayesbss validate-prior --R 1 --n 1000000 --out DIR
    bayesbss demos

Single-stage subcommands build a one-stage config; ``--set`` keys address
that stage directly (``--set step=0.2``).  For ``run`` they are dotted paths
into the whole config (``--set stages.0.T=2000`` or ``stages.fit.step=0.2``).
Exit status: 0 ok, 2 bad config or parameters, 3 numerical failure, 4 I/O.
"""

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from . import io
from .config import ConfigError, parse_config
from .pipeline import EXIT_IO, EXIT_OK, EXIT_PARSE, load_config, run

DEMO_PREFIX = "demo:"


def demo_names():
    root = resources.files("bayesbss") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def demo_config(name):
    path = resources.files("bayesbss") / "configs" / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"unknown demo {name!r}; available: {', '.join(demo_names())}")
    return json.loads(path.read_text())


def _stage_config(stage, params, seed, overrides):
    st = {"stage": stage, "name": stage, **params}
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like key=value")
        try:
            st[key] = json.loads(raw)
        except json.JSONDecodeError:
            st[key] = raw
    return parse_config({"version": 1, "seed": seed, "stages": [st]})


def _absolute(path):
    return str(Path(path).resolve())


def build_parser():
    p = argparse.ArgumentParser(prog="bayesbss", description="Bayesian source separation experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    sp = sub.add_parser("run", help="run a config file or bundled demo (demo:NAME)")
    sp.add_argument("config")
    sp.add_argument("--out", help="output directory (default: the config's output_dir)")
    sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    sp = sub.add_parser("simulate", help="generate synthetic data")
    sp.add_argument("--kind", choices=("mixture", "ensemble", "localization"), required=True)
    sp.add_argument("--params", help="JSON file with the stage parameters")
    common(sp)

    sp = sub.add_parser("separate", help="MAP separation of recordings")
    sp.add_argument("--recordings", required=True)
    sp.add_argument("--truth-mixing")
    common(sp)

    sp = sub.add_parser("localize", help="fit source positions")
    sp.add_argument("--recordings", required=True)
    sp.add_argument("--geometry", required=True, help="JSON geometry file")
    sp.add_argument("--n-sources", type=int, default=1)
    common(sp)

    for name, text in (("dvca", "fit differentially variable components"), ("average", "trial average")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--ensemble", required=True, help="ensemble.json manifest")
        common(sp)

    sp = sub.add_parser("validate-prior", help="Monte Carlo check of the coupling prior")
    sp.add_argument("--R", type=float, default=1.0)
    sp.add_argument("--n", type=int, default=1_000_000)
    sp.add_argument("--bins", type=int, default=100)
    common(sp)

    sub.add_parser("demos", help="list bundled demo configs")
    return p


def _config_from_args(args):
    """Returns ``(config, output_dir, base_dir)``."""
    if args.command == "run":
        if args.config.startswith(DEMO_PREFIX):
            cfg = load_config(demo_config(args.config[len(DEMO_PREFIX):]), args.overrides)
            base = Path.cwd()
        else:
            cfg = load_config(args.config, args.overrides)
            base = Path(args.config).resolve().parent
        out = args.out or cfg.get("output_dir")
        if out is None:
            raise ConfigError("no output directory: pass --out or set output_dir in the config")
        return cfg, Path(out) if args.out else base / out, base

    if args.command == "simulate":
        params = io.read_json(args.params) if args.params else {}
        params["kind"] = args.kind
    elif args.command == "separate":
        params = {"recordings": _absolute(args.recordings)}
        if args.truth_mixing:
            params["truth_mixing"] = _absolute(args.truth_mixing)
    elif args.command == "localize":
        params = {"recordings": _absolute(args.recordings), "geometry": io.read_json(args.geometry),
                  "n_sources": args.n_sources}
    elif args.command in ("dvca", "average"):
        params = {"ensemble": _absolute(args.ensemble)}
    else:
        params = {"R": args.R, "n": args.n, "bins": args.bins}
    return _stage_config(args.command, params, args.seed, args.overrides), Path(args.out), Path.cwd()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "demos":
        print("\n".join(demo_names()))
        return EXIT_OK
    try:
        cfg, out, base = _config_from_args(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    result = run(cfg, out, base)
    if result.error is not None:
        print(f"error: {result.error.get('type')}: {result.error.get('message')}", file=sys.stderr)
    summary = out / "summary.txt"
    if summary.exists():
        sys.stdout.write(summary.read_text())
    return result.status


if __name__ == "__main__":
    sys.exit(main())
