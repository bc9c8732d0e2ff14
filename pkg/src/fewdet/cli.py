"""Command-line front end.

Subcommands: run, ablate, sweep-w, compare-skip, probe-layers, export.
Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import ConfigError, RunConfig
from .evaluation import per_layer_probe
from .experiment import (build_episode, execute_run, export_run,
                         format_ablation_table, run_ablation, run_skip_comparison,
                         run_w_sweep)
from .registry import RunRegistry


def _default_out() -> str:
    return os.environ.get("FEWDET_OUT", "fewdet_out")


def _load_config(path: str, seed: int | None) -> RunConfig:
    config = RunConfig.load(path)
    if seed is not None:
        config = config.with_overrides({"seed": seed})
    return config


def _add_common(parser: argparse.ArgumentParser, seeds: bool = False) -> None:
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--out", default=_default_out(), help="output root directory")
    parser.add_argument("--jobs", type=int, default=None,
                        help="parallel child runs (default: FEWDET_JOBS or 1)")
    if seeds:
        parser.add_argument("--seeds", type=int, nargs="+", required=True)
    else:
        parser.add_argument("--seed", type=int, default=None,
                            help="override the config seed")


def cmd_run(args) -> int:
    config = _load_config(args.config, args.seed)
    outcome = execute_run(config, config.seed, args.out)
    print(f"run {outcome.run_id}: nAP50={outcome.novel_ap:.4f} "
          f"bAP50={outcome.base_ap:.4f}")
    print(f"artifacts: {outcome.run_dir}")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args.config, None)
    table = run_ablation(config, args.seeds, args.out, args.jobs)
    out = Path(args.out) / "ablation_table.json"
    out.write_text(json.dumps(table, indent=1, sort_keys=True))
    print(format_ablation_table(table))
    print(f"table: {out}")
    return 0


def cmd_sweep_w(args) -> int:
    config = _load_config(args.config, args.seed)
    table = run_w_sweep(config, args.values, args.out, args.jobs)
    out = Path(args.out) / "w_sweep.json"
    out.write_text(json.dumps(table, indent=1, sort_keys=True))
    print(f"{'w':>6s} {'nAP50':>8s}")
    for entry in table["entries"]:
        print(f"{entry['w']:6.2f} {entry['novel_ap']:8.4f}")
    print(f"best w: {table['best_w']:.2f} (nAP50 {table['best_novel_ap']:.4f})")
    print(f"table: {out}")
    return 0


def cmd_compare_skip(args) -> int:
    config = _load_config(args.config, None)
    table = run_skip_comparison(config, args.seeds, args.out, args.jobs)
    out = Path(args.out) / "skip_comparison.json"
    out.write_text(json.dumps(table, indent=1, sort_keys=True))
    print(f"{'variant':16s} {'params':>7s} {'nAP50 median':>13s}")
    for col in table["columns"]:
        print(f"{col['name']:16s} {col['extra_parameters']:7d} "
              f"{col['novel_ap']['median']:13.4f}")
    print(f"median gap (learnable - soft): "
          f"{table['median_gap_learnable_minus_soft']:+.4f}")
    print(f"table: {out}")
    return 0


def cmd_probe_layers(args) -> int:
    registry = RunRegistry(args.out)
    run_dir = registry.find(args.run_id)
    model, config, seed = load_checkpoint(run_dir / "checkpoint.npz")
    episode_sets = build_episode(config, seed)
    spec = config.episode_spec(seed)
    probe = per_layer_probe(model, episode_sets.test, spec.base_classes,
                            spec.novel_classes, strategy=config.strategy())
    print(f"{'layer':>5s} {'nAP50':>8s}")
    for j, value in enumerate(probe["per_layer_novel_ap"], start=1):
        print(f"{j:5d} {value:8.4f}")
    print(f"best layer: {probe['best_layer']}  fused nAP50: "
          f"{probe['fused_novel_ap']:.4f}")
    return 0


def cmd_export(args) -> int:
    registry = RunRegistry(args.out)
    run_dir = registry.find(args.run_id)
    written = export_run(run_dir, args.dest or (run_dir / "export"))
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewdet",
                                     description="few-shot detector experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="pretrain, fine-tune, and evaluate one config")
    _add_common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("ablate", help="module-accumulation ladder over seeds")
    _add_common(p, seeds=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep-w", help="prompt-weight sweep")
    _add_common(p)
    p.add_argument("--values", type=float, nargs="+", required=True)
    p.set_defaults(fn=cmd_sweep_w)

    p = sub.add_parser("compare-skip", help="soft vs learnable skip connection")
    _add_common(p, seeds=True)
    p.set_defaults(fn=cmd_compare_skip)

    p = sub.add_parser("probe-layers", help="per-decoder-layer AP of a finished run")
    p.add_argument("--run-id", required=True)
    p.add_argument("--out", default=_default_out())
    p.set_defaults(fn=cmd_probe_layers)

    p = sub.add_parser("export", help="write a run's metrics as CSV tables")
    p.add_argument("--run-id", required=True)
    p.add_argument("--out", default=_default_out())
    p.add_argument("--dest", default=None)
    p.set_defaults(fn=cmd_export)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
