"""Command-line front end: ``flagtime {leak,sweep,mitigate,analyze,replay}``.

Every run writes ``manifest.json`` to the output directory before anything
else. The manifest carries the fully resolved configuration, so ``replay``
reproduces the data files byte for byte even if the original config file has
since changed. Data goes to files; stdout gets a short summary and stderr
gets diagnostics.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .analysis import (
    SWEEP_PARAMS,
    AnalysisError,
    Histogram,
    blocks_from_timings_csv,
    histogram_csv,
    histograms_from_passes_csv,
    mean_profile,
    mean_profile_csv,
    sweep,
    sweep_csv,
    timings_csv,
)
from .attack import collect_passes, leak_string
from .config import RunConfig, load_config, parse_config
from .core import ConfigError, SimulationError
from .gadgets import Gadget, GadgetError
from .isa import IsaError
from .mitigation import evaluate_mitigation, report_json

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad input from the user: exit code 2."""


def _log(message: str) -> None:
    print(f"flagtime: {message}", file=sys.stderr)


def parse_grid(text: str) -> List[int]:
    """``0..12`` (inclusive) or ``1,10,100``."""
    text = text.strip()
    if not text:
        raise UsageError("empty grid")
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            grid = list(range(int(lo, 0), int(hi, 0) + 1))
        else:
            grid = [int(g, 0) for g in text.split(",") if g.strip()]
    except ValueError:
        raise UsageError(f"bad grid {text!r}") from None
    if not grid:
        raise UsageError(f"empty grid {text!r}")
    return grid


def _gadget(name: Optional[str]) -> Optional[Gadget]:
    if name is None:
        return None
    try:
        return Gadget.parse(name)
    except GadgetError as exc:
        raise UsageError(str(exc)) from None


def _write(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text, encoding="utf-8", newline="\n")


# --------------------------------------------------------------------------------------------------
# Subcommands. Each takes the resolved config plus the parsed arguments it needs.
# --------------------------------------------------------------------------------------------------
def cmd_leak(cfg: RunConfig, args: Dict[str, object], out: Path) -> int:
    gadget = _gadget(args.get("gadget"))
    report = leak_string(cfg.micro, cfg.attack, cfg.victim, gadget)
    _write(out, "report.json", report.to_json())
    _write(out, "passes.csv", report.passes_csv())
    for entry in report.entries:
        hist = Histogram(entry.histogram, int(entry.histogram.sum()))
        _write(out, f"histogram_{entry.offset:03d}.csv", histogram_csv(hist))
    if args.get("timings"):
        blocks = [collect_passes(cfg.micro, cfg.attack, cfg.victim, o, gadget)
                  for o in cfg.attack.offsets(cfg.victim)]
        _write(out, "timings.csv", timings_csv(blocks))
    print(f"decoded {report.decoded!r}")
    print(f"success_rate {report.success_rate:.6f}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args: Dict[str, object], out: Path) -> int:
    param = args["param"]
    if param not in SWEEP_PARAMS:
        raise UsageError(f"unknown sweep parameter {param!r}; expected one of {', '.join(SWEEP_PARAMS)}")
    grid = parse_grid(args["grid"])
    result = sweep(param, grid, cfg.micro, cfg.attack, cfg.victim,
                   experiments=args["experiments"], gadget=_gadget(args.get("gadget")))
    text = sweep_csv(result)
    _write(out, f"sweep_{param}.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_mitigate(cfg: RunConfig, args: Dict[str, object], out: Path) -> int:
    gadget = _gadget(args.get("gadget"))
    if gadget is None:
        raise UsageError("mitigate needs --gadget")
    report = evaluate_mitigation(cfg.micro, cfg.attack, cfg.victim, gadget, args["experiments"])
    _write(out, "mitigation.json", report_json(report, cfg.micro, cfg.attack, cfg.victim))
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, args: Dict[str, object], out: Path) -> int:
    source = Path(args["input"])
    passes = source / "passes.csv"
    if not passes.is_file():
        raise UsageError(f"no passes.csv in {source}")
    for offset, hist in histograms_from_passes_csv(passes.read_text()).items():
        _write(out, f"analysis_histogram_{offset:03d}.csv", histogram_csv(hist))
        print(f"offset {offset}: mode {hist.mode} ({int(hist.bins[hist.mode])}/{hist.total})")
    timings = source / "timings.csv"
    if timings.is_file():
        for offset, block in blocks_from_timings_csv(timings.read_text()).items():
            profile = mean_profile(block)
            _write(out, f"analysis_means_{offset:03d}.csv", mean_profile_csv(profile))
            print(f"offset {offset}: mean peak {profile.peak}")
    return EXIT_OK


COMMANDS = {"leak": cmd_leak, "sweep": cmd_sweep, "mitigate": cmd_mitigate, "analyze": cmd_analyze}


# --------------------------------------------------------------------------------------------------
# Argument handling
# --------------------------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="base RNG seed (overrides rng_seed)")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    common.add_argument("--passes", type=int, help="passes per byte (overrides attack.passes)")
    common.add_argument("--experiments", type=int, default=None, help="independent experiments")
    common.add_argument("--gadget", metavar="NAME[:COUNT]",
                        help="delay[:N], lahf_sahf, pushf_popf or hardware_off")

    parser = argparse.ArgumentParser(prog="flagtime", description="EFLAGS transient timing simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    leak = sub.add_parser("leak", parents=[common], help="leak the configured secret")
    leak.add_argument("--timings", action="store_true", help="also write full per-pass timings")
    sw = sub.add_parser("sweep", parents=[common], help="sweep one parameter")
    sw.add_argument("param", help=", ".join(SWEEP_PARAMS))
    sw.add_argument("--grid", required=True, help="'0..12' or '1,10,100'")
    sub.add_parser("mitigate", parents=[common], help="evaluate a mitigation gadget")
    an = sub.add_parser("analyze", parents=[common], help="recompute statistics from stored CSVs")
    an.add_argument("input", help="directory holding passes.csv (and optionally timings.csv)")
    rp = sub.add_parser("replay", help="re-run a manifest")
    rp.add_argument("manifest", help="path to manifest.json")
    rp.add_argument("--out", metavar="DIR", required=True, help="output directory for the re-run")
    return parser


_DEFAULT_EXPERIMENTS = {"sweep": 20, "mitigate": 200}


def _resolve(ns: argparse.Namespace) -> RunConfig:
    if ns.config is not None:
        path = Path(ns.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg = load_config(path)
    else:
        cfg = RunConfig()
    if ns.seed is not None:
        cfg = cfg.with_seed(ns.seed)
    if ns.passes is not None:
        cfg = RunConfig(cfg.micro, replace(cfg.attack, passes=ns.passes), cfg.victim)
    return cfg


def _command_args(ns: argparse.Namespace) -> Dict[str, object]:
    args: Dict[str, object] = {"gadget": ns.gadget}
    experiments = ns.experiments if ns.experiments is not None else _DEFAULT_EXPERIMENTS.get(ns.command)
    if experiments is not None:
        if experiments < 1:
            raise UsageError("--experiments must be at least 1")
        args["experiments"] = experiments
    if ns.command == "leak":
        args["timings"] = ns.timings
    elif ns.command == "sweep":
        args["param"], args["grid"] = ns.param, ns.grid
    elif ns.command == "analyze":
        args["input"] = ns.input
    return args


def manifest(command: str, cfg: RunConfig, args: Dict[str, object], config_path: Optional[str],
             out: Path) -> Dict[str, object]:
    return {"subcommand": command, "config_path": config_path, "seed": cfg.micro.rng_seed,
            "out": str(out), "args": args, "config": cfg.to_mapping(),
            "config_text": cfg.to_text(), "version": __version__}


def execute(command: str, cfg: RunConfig, args: Dict[str, object], out: Path,
            config_path: Optional[str] = None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    _write(out, MANIFEST, json.dumps(manifest(command, cfg, args, config_path, out),
                                     indent=2, sort_keys=True) + "\n")
    return COMMANDS[command](cfg, args, out)


def _replay(ns: argparse.Namespace) -> int:
    path = Path(ns.manifest)
    if not path.is_file():
        raise UsageError(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text())
        command, args = data["subcommand"], data["args"]
        cfg = parse_config(data["config_text"])
    except (ValueError, KeyError) as exc:
        raise UsageError(f"unreadable manifest {path}: {exc}") from None
    if command not in COMMANDS:
        raise UsageError(f"manifest names unknown subcommand {command!r}")
    return execute(command, cfg, args, Path(ns.out), data.get("config_path"))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        if ns.command == "replay":
            return _replay(ns)
        cfg = _resolve(ns)
        args = _command_args(ns)
        _gadget(args.get("gadget"))  # reject bad names before writing anything
        return execute(ns.command, cfg, args, Path(ns.out), ns.config)
    except (UsageError, ConfigError, AnalysisError) as exc:
        _log(str(exc))
        return EXIT_USAGE
    except (SimulationError, IsaError, ValueError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_FAILED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
