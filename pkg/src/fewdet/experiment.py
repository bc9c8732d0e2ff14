"""Run orchestration: the pretrain -> finetune -> evaluate pipeline, the
module-accumulation ablation ladder, the prompt-weight sweep, and the
soft-vs-learnable skip comparison.

Every child run is a pure function of (config, seed); tables always carry
the config hash and seed of each contributing run.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .connectivity import extra_parameter_count
from .data import build_fewshot_sets, generate_dataset
from .evaluation import evaluate_model
from .model import build_detector
from .registry import RunRegistry
from .training import run_training, _examples_for_phase


LADDER = (
    ("baseline", {"deprompt.enabled": False, "connectivity.mode": "baseline",
                  "connectivity.fusion": "last"}),
    ("+prompts", {"deprompt.enabled": True, "connectivity.mode": "baseline",
                  "connectivity.fusion": "last"}),
    ("+prompts+skip", {"deprompt.enabled": True, "connectivity.mode": "soft_skip",
                       "connectivity.fusion": "last"}),
    ("+prompts+skip+fusion", {"deprompt.enabled": True,
                              "connectivity.mode": "soft_skip",
                              "connectivity.fusion": "adaptive"}),
)


@dataclass
class FailedRun:
    error: str
    seed: int
    config_hash: str


@dataclass
class RunOutcome:
    run_id: str
    run_dir: str
    config_hash: str
    seed: int
    novel_ap: float
    base_ap: float
    per_layer_novel_ap: list
    pretrain_final_loss: float
    finetune_final_loss: float

    @staticmethod
    def from_metrics(metrics: dict) -> "RunOutcome":
        return RunOutcome(
            run_id=metrics["run_id"], run_dir=metrics["run_dir"],
            config_hash=metrics["config_hash"], seed=metrics["seed"],
            novel_ap=metrics["novel_ap"], base_ap=metrics["base_ap"],
            per_layer_novel_ap=metrics["per_layer_novel_ap"],
            pretrain_final_loss=metrics["pretrain_final_loss"],
            finetune_final_loss=metrics["finetune_final_loss"])


def build_episode(config: RunConfig, seed: int):
    world = config.world()
    e = config.raw["episode"]
    train = generate_dataset(world, e["n_train_images"], seed=seed * 2 + 1)
    test = generate_dataset(world, e["n_test_images"], seed=seed * 2 + 2)
    return build_fewshot_sets(train, test, config.episode_spec(seed))


def execute_run(config: RunConfig, seed: int, out_root: str | Path) -> RunOutcome:
    """Full pipeline for one (config, seed); artifacts under a fresh run dir."""
    registry = RunRegistry(out_root)
    config_hash = config.config_hash()
    run_dir = registry.allocate(config_hash, seed)
    registry.record(run_dir, config_hash, seed, "running")
    try:
        metrics = _execute_into(config, seed, run_dir)
    except Exception:
        registry.record(run_dir, config_hash, seed, "failed")
        raise
    registry.record(run_dir, config_hash, seed, "completed",
                    metrics={"novel_ap": metrics["novel_ap"],
                             "base_ap": metrics["base_ap"]})
    return RunOutcome.from_metrics(metrics)


def _execute_into(config: RunConfig, seed: int, run_dir: Path) -> dict:
    config.save(run_dir / "config.yaml")
    episode_sets = build_episode(config, seed)
    spec = config.episode_spec(seed)
    model = build_detector(config.model_config(), config.connectivity_setup(), seed)
    strategy = config.strategy()

    pre_examples = _examples_for_phase(config.phase_plan("pretrain", seed),
                                       episode_sets, spec)
    pre_result = run_training(model, pre_examples,
                              config.phase_plan("pretrain", seed),
                              spec.base_classes, strategy,
                              config.optimizer_spec("pretrain"),
                              config.loss_weights(), diagnostics_dir=run_dir)
    fine_examples = _examples_for_phase(config.phase_plan("finetune", seed),
                                        episode_sets, spec)
    fine_result = run_training(model, fine_examples,
                               config.phase_plan("finetune", seed),
                               spec.base_classes, strategy,
                               config.optimizer_spec("finetune"),
                               config.loss_weights(), diagnostics_dir=run_dir)

    report = evaluate_model(model, episode_sets.test, spec.base_classes,
                            spec.novel_classes, strategy=strategy,
                            with_ap75=True, with_probe=True)

    save_checkpoint(run_dir / "checkpoint.npz", model, config, seed)
    connection_text = model.connection_report()
    (run_dir / "connection_weights.txt").write_text(connection_text)
    _write_csv(run_dir / "loss_pretrain.csv", ["epoch", "loss"],
               [[i, v] for i, v in enumerate(pre_result.loss_curve)])
    _write_csv(run_dir / "loss_finetune.csv", ["epoch", "loss"],
               [[i, v] for i, v in enumerate(fine_result.loss_curve)])
    (run_dir / "eval_report.json").write_text(
        json.dumps(report.to_dict(), indent=1, sort_keys=True))
    probe = {"per_layer_novel_ap": report.per_layer_novel_ap,
             "best_layer": int(np.argmax(report.per_layer_novel_ap)) + 1}
    (run_dir / "probe.json").write_text(json.dumps(probe, indent=1))

    metrics = {
        "run_id": run_dir.name, "run_dir": str(run_dir),
        "config_hash": config.config_hash(), "seed": seed,
        "novel_ap": report.novel_ap, "base_ap": report.base_ap,
        "novel_ap75": report.novel_ap75,
        "per_class_ap": {str(k): v for k, v in report.per_class_ap.items()},
        "per_layer_novel_ap": report.per_layer_novel_ap,
        "pretrain_final_loss": pre_result.final_loss,
        "finetune_final_loss": fine_result.final_loss,
        "pretrain_epochs_run": len(pre_result.loss_curve),
        "finetune_epochs_run": len(fine_result.loss_curve),
        "connection_report": connection_text,
        "extra_connection_parameters": extra_parameter_count(
            config.connectivity_setup().mode, config.connectivity_setup().fusion),
    }
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    return metrics


def _run_child(args) -> dict:
    config_dict, seed, out_root = args
    try:
        outcome = execute_run(RunConfig.from_dict(config_dict), seed, out_root)
        return outcome.__dict__
    except Exception as exc:  # child failures become table markers, not aborts
        return {"error": f"{type(exc).__name__}: {exc}", "seed": seed,
                "config_hash": RunConfig.from_dict(config_dict).config_hash()}


def run_many(configs_and_seeds: list, out_root: str | Path,
             jobs: int | None = None) -> list:
    """Execute (config, seed) pairs, optionally across processes. Failed
    runs come back as FailedRun markers instead of raising."""
    if jobs is None:
        jobs = int(os.environ.get("FEWDET_JOBS", "1"))
    payload = [(json.loads(cfg.canonical_json()), seed, str(out_root))
               for cfg, seed in configs_and_seeds]
    if jobs <= 1 or len(payload) <= 1:
        results = [_run_child(p) for p in payload]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_child, payload))
    return [FailedRun(**d) if "error" in d else RunOutcome(**d) for d in results]


def _spread(values: list) -> dict:
    return {"min": float(np.min(values)), "median": float(np.median(values)),
            "max": float(np.max(values))}


def run_ablation(config: RunConfig, seeds: list, out_root: str | Path,
                 jobs: int | None = None) -> dict:
    """Accumulate modules row by row; each row runs every seed."""
    if len(seeds) < 3:
        raise ValueError("ablation needs at least 3 seeds")
    rows = []
    pairs = []
    for name, overrides in LADDER:
        row_cfg = config.with_overrides(overrides)
        pairs.extend((row_cfg, seed) for seed in seeds)
        rows.append((name, row_cfg))
    outcomes = run_many(pairs, out_root, jobs)

    table = {"rows": [], "seeds": list(seeds)}
    prev_median = None
    cursor = 0
    for name, row_cfg in rows:
        row_outcomes = outcomes[cursor:cursor + len(seeds)]
        cursor += len(seeds)
        good = [o for o in row_outcomes if isinstance(o, RunOutcome)]
        spread = _spread([o.novel_ap for o in good]) if good else None
        delta = (spread["median"] - prev_median
                 if spread is not None and prev_median is not None else None)
        prev_median = spread["median"] if spread is not None else prev_median
        runs = []
        for o in row_outcomes:
            if isinstance(o, RunOutcome):
                runs.append({"run_id": o.run_id, "seed": o.seed,
                             "novel_ap": o.novel_ap, "base_ap": o.base_ap,
                             "config_hash": o.config_hash})
            else:
                runs.append({"seed": o.seed, "config_hash": o.config_hash,
                             "failed": o.error})
        table["rows"].append({
            "name": name,
            "config_hash": row_cfg.config_hash(),
            "novel_ap": spread,
            "delta_median": delta,
            "runs": runs,
        })
    return table


def format_ablation_table(table: dict) -> str:
    lines = [f"{'row':28s} {'nAP50 min':>10s} {'median':>8s} {'max':>8s} {'delta':>8s}"]
    for row in table["rows"]:
        failures = sum(1 for r in row["runs"] if "failed" in r)
        if row["novel_ap"] is None:
            lines.append(f"{row['name']:28s} {'all runs failed':>28s}")
            continue
        delta = "" if row["delta_median"] is None else f"({row['delta_median']:+.3f})"
        s = row["novel_ap"]
        suffix = f"  [{failures} failed]" if failures else ""
        lines.append(f"{row['name']:28s} {s['min']:10.3f} {s['median']:8.3f} "
                     f"{s['max']:8.3f} {delta:>8s}{suffix}")
    return "\n".join(lines)


def run_w_sweep(config: RunConfig, values: list, out_root: str | Path,
                jobs: int | None = None) -> dict:
    """Prompt-weight sweep. Soft trains once and re-evaluates across eval
    weights; hard retrains per value; learnable has no sweepable weight."""
    kind = config.raw["deprompt"]["strategy"]
    if kind == "learnable":
        raise ValueError("the learnable strategy has no sweepable weight")
    bad = [v for v in values if not 0.0 <= v <= 1.0]
    if bad:
        raise ValueError(f"sweep values outside [0, 1]: {bad}")
    entries = []
    if kind == "soft":
        outcome = execute_run(config, config.seed, out_root)
        model, loaded_cfg, seed = load_checkpoint(Path(outcome.run_dir) / "checkpoint.npz")
        episode_sets = build_episode(loaded_cfg, seed)
        spec = loaded_cfg.episode_spec(seed)
        for value in values:
            strategy = loaded_cfg.with_overrides(
                {"deprompt.eval_value": float(value)}).strategy()
            report = evaluate_model(model, episode_sets.test, spec.base_classes,
                                    spec.novel_classes, strategy=strategy)
            entries.append({"w": float(value), "novel_ap": report.novel_ap,
                            "run_id": outcome.run_id,
                            "config_hash": outcome.config_hash,
                            "seed": outcome.seed})
    else:
        pairs = [(config.with_overrides({"deprompt.hard_value": float(v),
                                         "deprompt.eval_value": float(v)}),
                  config.seed) for v in values]
        outcomes = run_many(pairs, out_root, jobs)
        entries = [{"w": float(v), "novel_ap": o.novel_ap, "run_id": o.run_id,
                    "config_hash": o.config_hash, "seed": o.seed}
                   for v, o in zip(values, outcomes)]
    best = max(entries, key=lambda r: r["novel_ap"])
    return {"strategy": kind, "entries": entries, "best_w": best["w"],
            "best_novel_ap": best["novel_ap"]}


def run_skip_comparison(config: RunConfig, seeds: list, out_root: str | Path,
                        jobs: int | None = None) -> dict:
    """Soft vs learnable skip connection at identical everything else."""
    if len(seeds) < 3:
        raise ValueError("comparison needs at least 3 seeds")
    variants = [("soft_skip", config.with_overrides({"connectivity.mode": "soft_skip"})),
                ("learnable_skip", config.with_overrides(
                    {"connectivity.mode": "learnable_skip"}))]
    pairs = [(cfg, seed) for _, cfg in variants for seed in seeds]
    outcomes = run_many(pairs, out_root, jobs)
    table = {"seeds": list(seeds), "columns": []}
    for k, (name, cfg) in enumerate(variants):
        rows = outcomes[k * len(seeds):(k + 1) * len(seeds)]
        setup = cfg.connectivity_setup()
        table["columns"].append({
            "name": name,
            "config_hash": cfg.config_hash(),
            "extra_parameters": extra_parameter_count(setup.mode, setup.fusion),
            "novel_ap": _spread([o.novel_ap for o in rows]),
            "runs": [{"run_id": o.run_id, "seed": o.seed, "novel_ap": o.novel_ap}
                     for o in rows],
        })
    gap = (table["columns"][1]["novel_ap"]["median"]
           - table["columns"][0]["novel_ap"]["median"])
    table["median_gap_learnable_minus_soft"] = gap
    return table


def export_run(run_dir: str | Path, dest: str | Path) -> list:
    """Copy run metrics into flat delimited tables for plotting."""
    run_dir, dest = Path(run_dir), Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    metrics = json.loads((run_dir / "metrics.json").read_text())
    for name in ("loss_pretrain.csv", "loss_finetune.csv"):
        src = run_dir / name
        if src.exists():
            (dest / name).write_text(src.read_text())
            written.append(dest / name)
    ap_rows = [[k, repr(v)] for k, v in sorted(metrics["per_class_ap"].items())]
    ap_rows.append(["novel_ap", repr(metrics["novel_ap"])])
    ap_rows.append(["base_ap", repr(metrics["base_ap"])])
    _write_csv(dest / "ap_table.csv", ["class", "ap50"], ap_rows)
    written.append(dest / "ap_table.csv")
    probe_rows = [[j + 1, repr(v)] for j, v in
                  enumerate(metrics["per_layer_novel_ap"])]
    _write_csv(dest / "per_layer_probe.csv", ["decoder_layer", "novel_ap50"],
               probe_rows)
    written.append(dest / "per_layer_probe.csv")
    meta = [["run_id", metrics["run_id"]], ["config_hash", metrics["config_hash"]],
            ["seed", str(metrics["seed"])]]
    _write_csv(dest / "run_info.csv", ["key", "value"], meta)
    written.append(dest / "run_info.csv")
    return written


def _write_csv(path: Path, header: list, rows: list) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row))
    path.write_text("\n".join(lines) + "\n")
