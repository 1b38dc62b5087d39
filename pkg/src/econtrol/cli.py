"""Command line front end: ``econtrol run|sweep|reproduce|list-presets``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .config import load_config
from .errors import ConfigError, NoStableConfiguration

log = logging.getLogger("econtrol")

EXIT_CONFIG = 1
EXIT_UNSTABLE = 2


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of numbers, got {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="econtrol", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute one configured run")
    p.add_argument("--config", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", default="out")

    p = sub.add_parser("sweep", help="grid search over stepsizes (and eta)")
    p.add_argument("--config", required=True)
    p.add_argument("--gammas", type=_floats, required=True)
    p.add_argument("--etas", type=_floats)
    p.add_argument("--criterion", choices=["final_loss", "min_loss"], default="final_loss")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", default="out")

    p = sub.add_parser("reproduce", help="run a preset experiment")
    p.add_argument("--preset", required=True, choices=sorted(harness.PRESETS))
    p.add_argument("--rounds", type=int, help="shorten or extend every run of the preset")
    p.add_argument("--out", default="out")

    sub.add_parser("list-presets", help="show the available presets")
    return parser


def _write_run(out_dir: Path, config, trace):
    out_dir.mkdir(parents=True, exist_ok=True)
    harness.write_trace(trace, out_dir / "trace.csv")
    (out_dir / "resolved-config.json").write_text(config.to_json())


def cmd_run(args):
    cfg = load_config(args.config, args.overrides)
    trace = harness.run(cfg)
    out = Path(args.out)
    _write_run(out, cfg, trace)
    summary = harness.summarize(cfg, trace)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args):
    base = load_config(args.config, args.overrides, resolve=False)
    out = Path(args.out)
    try:
        result = harness.sweep(base, args.gammas, args.etas, args.criterion, args.workers)
        cells = result.cells
    except NoStableConfiguration as exc:
        result, cells = None, exc.cells
    for cell in cells:
        _write_run(out / cell.config.label, cell.config, cell.trace)
    if result is None:
        print("no stable configuration: every run diverged", file=sys.stderr)
        return EXIT_UNSTABLE
    best = {"label": result.best.config.label, "score": result.best.score,
            "config": result.best.config.to_dict()}
    (out / "best.json").write_text(json.dumps(best, indent=2, sort_keys=True) + "\n")
    print(f"best: {best['label']} (final loss gap {best['score']:.6g})")
    return 0


def cmd_reproduce(args):
    seed = int(os.environ.get("ECONTROL_SEED", 0))
    configs = harness.preset(args.preset, master_seed=seed)
    if args.rounds:
        configs = [replace(c, rounds=args.rounds) for c in configs]
    out = Path(args.out)
    summaries = []
    for cfg in configs:
        cfg = cfg.resolved()
        trace = harness.run(cfg)
        _write_run(out / cfg.label, cfg, trace)
        summaries.append(harness.summarize(cfg, trace))
        log.info("%s: final grad_norm_sq %.3e", cfg.label, trace[-1].grad_norm_sq)
    (out / "summary.json").write_text(json.dumps({"preset": args.preset, "runs": summaries}, indent=2,
                                                 sort_keys=True) + "\n")
    for s in summaries:
        print(f"{s['label']:32s} loss={s['final_loss']:.6g} grad_norm_sq={s['final_grad_norm_sq']:.3e}")
    return 0


def cmd_list_presets(args):
    for name, desc in harness.PRESETS.items():
        print(f"{name:12s} {desc}")
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "reproduce": cmd_reproduce, "list-presets": cmd_list_presets}


def parse_and_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main():
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
