"""``dquant`` command line.

    dquant [--config FILE] [--seed N] [--out DIR] [--set SECTION.KEY=VALUE ...] MODE

MODE is one of capacity, posthoc, train, analyze, ablate, synth.  Values
from ``--config`` are applied first, then ``--set`` overrides, then the
global flags.  Exit codes: 0 success, 2 usage, 3 invalid config, 4 file
or format error, 5 training diverged.
"""

from __future__ import annotations

import argparse
import configparser
import sys

from .config import MODES, ConfigError, ExperimentConfig, load_config, parse_config
from .experiment import run_experiment
from .formats import FormatError, ShapeMismatchError
from .optim import DivergenceError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_DIVERGED = 5


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="INI config file")
    p.add_argument("--seed", type=int, default=default, help="override [run] seed")
    p.add_argument("--out", default=default, help="output directory (overrides [run] out)")
    p.add_argument("--set", action="append", default=argparse.SUPPRESS if suppress else [],
                   metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")
    p.add_argument("--reproducible", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="omit timestamps so reruns give byte-identical reports")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dquant", description="Depthwise quantization experiments.")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="mode", required=True, metavar="MODE")
    helps = {
        "capacity": "quantization cost and capacity table",
        "posthoc": "fit quantizers to a feature stream along channel and pixel axes",
        "train": "train the hierarchical autoencoder",
        "analyze": "entropy / MI report of a trained autoencoder",
        "ablate": "sweep M and K over several seeds",
        "synth": "write a synthetic feature stream as tensor files",
    }
    for mode in MODES:
        sp = sub.add_parser(mode, help=helps[mode])
        # global flags are accepted after the mode too
        _global_flags(sp, suppress=True)
    return p


def _overrides(items) -> dict:
    text = {}
    for item in items:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        text.setdefault(section, {})[name] = value
    return text


def resolve_config(args) -> ExperimentConfig:
    base = load_config(args.config) if args.config else ExperimentConfig()
    sets = _overrides(args.set)
    if sets:
        # appended sections merge over the echoed config, so overrides are
        # typed and validated exactly like file values
        extra = "".join(f"[{sec}]\n" + "".join(f"{k} = {v}\n" for k, v in vals.items())
                        for sec, vals in sets.items())
        base = _merge_ini(base.to_ini() + "\n" + extra)
    run = {"mode": args.mode}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.out is not None:
        run["out"] = args.out
    if args.reproducible:
        run["reproducible"] = True
    return base.with_overrides(run=run)


def _merge_ini(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=False)
    cp.optionxform = str
    cp.read_string(text)
    flat = []
    for section in cp.sections():
        flat.append(f"[{section}]")
        flat += [f"{k} = {v}" for k, v in cp[section].items()]
    return parse_config("\n".join(flat), "<--set>")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"dquant: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"dquant: cannot read config: {e}", file=sys.stderr)
        return EXIT_IO

    try:
        res = run_experiment(cfg)
    except (FormatError, ShapeMismatchError, OSError) as e:
        print(f"dquant: {e}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as e:
        print(f"dquant: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as e:
        print(f"dquant: invalid input: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{cfg.run.mode}: wrote {res.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
