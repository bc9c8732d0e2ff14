"""Run configuration: load, validate, canonically serialize, and hash.

A run is reproducible from (RunConfig, seed) alone, so the config hash is
the identity of a run family: sha256 over the canonical JSON form (sorted
keys, explicit defaults filled in).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .connectivity import FusionMode, SkipMode
from .data import EpisodeSpec, SyntheticWorld
from .model import ConnectivitySetup, ModelConfig
from .prompts import PromptWeightStrategy, WeightKind
from .set_loss import LossWeights
from .training import OptimizerSpec, TrainPhasePlan


class ConfigError(ValueError):
    """Invalid configuration; message lists field-level problems."""

    def __init__(self, problems: list):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in problems))


DEFAULTS: dict = {
    "model": {
        "d_model": 64, "n_heads": 4, "n_queries": 16, "ffn_dim": 128,
        "n_classes": 10, "patch_size": 8, "image_size": 64, "n_channels": 1,
        "p_dropout": 0.0,
    },
    "deprompt": {
        "enabled": True, "strategy": "soft", "hard_value": 0.5, "eval_value": 0.5,
    },
    "connectivity": {
        "mode": "baseline", "a_scalar": 0.5, "fusion": "last",
    },
    "loss": {
        "cls": 1.0, "l1": 5.0, "giou": 2.0, "aux": 1.0, "no_object_weight": 0.1,
    },
    "episode": {
        "base_classes": [0, 1, 2, 3, 4, 6, 8],
        "novel_classes": [5, 7, 9],
        "n_shot": 5, "base_multiplier": 10, "balanced": False,
        "n_train_images": 2000, "n_test_images": 150,
        "max_objects": 5, "min_half": 6, "max_half": 12,
    },
    "optimizer": {
        "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "grad_clip": 1.0,
    },
    "pretrain": {
        "epochs": 8, "batch_size": 4, "lr": 1e-3, "patience": 3,
    },
    "finetune": {
        "epochs": 12, "batch_size": 4, "lr": 5e-4, "patience": 0,
    },
    "seed": 0,
}


def _merge_defaults(user: dict, defaults: dict, path: str, problems: list) -> dict:
    out = {}
    for key, default in defaults.items():
        if isinstance(default, dict):
            sub = user.get(key, {})
            if not isinstance(sub, dict):
                problems.append(f"{path}{key}: expected a mapping")
                sub = {}
            out[key] = _merge_defaults(sub, default, f"{path}{key}.", problems)
        else:
            out[key] = user.get(key, default)
    for key in user:
        if key not in defaults:
            problems.append(f"{path}{key}: unknown key")
    return out


@dataclass
class RunConfig:
    raw: dict = field(default_factory=dict)

    @staticmethod
    def from_dict(user: dict) -> "RunConfig":
        problems: list[str] = []
        raw = _merge_defaults(user or {}, DEFAULTS, "", problems)
        cfg = RunConfig(raw=raw)
        problems.extend(cfg._validate())
        if problems:
            raise ConfigError(problems)
        return cfg

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        return RunConfig.from_dict(data)

    def _validate(self) -> list:
        raw = self.raw
        problems = []
        m = raw["model"]
        if m["d_model"] % m["n_heads"] != 0:
            problems.append(f"model.d_model: {m['d_model']} not divisible by "
                            f"n_heads {m['n_heads']}")
        if m["d_model"] % 4 != 0:
            problems.append("model.d_model: must be divisible by 4")
        if m["image_size"] % m["patch_size"] != 0:
            problems.append(f"model.image_size: {m['image_size']} not divisible "
                            f"by patch_size {m['patch_size']}")
        d = raw["deprompt"]
        if d["strategy"] not in ("hard", "soft", "learnable"):
            problems.append(f"deprompt.strategy: unknown {d['strategy']!r}")
        for key in ("hard_value", "eval_value"):
            if not 0.0 <= d[key] <= 1.0:
                problems.append(f"deprompt.{key}: {d[key]} outside [0, 1]")
        c = raw["connectivity"]
        if c["mode"] not in ("baseline", "learnable_skip", "soft_skip"):
            problems.append(f"connectivity.mode: unknown {c['mode']!r}")
        if c["fusion"] not in ("last", "adaptive"):
            problems.append(f"connectivity.fusion: unknown {c['fusion']!r}")
        if not 0.0 <= c["a_scalar"] <= 1.0:
            problems.append(f"connectivity.a_scalar: {c['a_scalar']} outside [0, 1]")
        e = raw["episode"]
        overlap = set(e["base_classes"]) & set(e["novel_classes"])
        if overlap:
            problems.append(f"episode: base and novel overlap: {sorted(overlap)}")
        bad = [c_ for c_ in e["base_classes"] + e["novel_classes"]
               if not 0 <= c_ < m["n_classes"]]
        if bad:
            problems.append(f"episode: class ids outside 0..{m['n_classes'] - 1}: {bad}")
        if e["n_shot"] < 1:
            problems.append("episode.n_shot: must be >= 1")
        if not 1 <= e["base_multiplier"] <= 10:
            problems.append("episode.base_multiplier: must be in 1..10")
        for phase in ("pretrain", "finetune"):
            if raw[phase]["epochs"] < 1:
                problems.append(f"{phase}.epochs: must be >= 1")
            if raw[phase]["batch_size"] < 1:
                problems.append(f"{phase}.batch_size: must be >= 1")
        return problems

    # -- typed views -------------------------------------------------------

    def model_config(self) -> ModelConfig:
        m = self.raw["model"]
        return ModelConfig(d_model=m["d_model"], n_heads=m["n_heads"],
                           n_queries=m["n_queries"], ffn_dim=m["ffn_dim"],
                           n_classes=m["n_classes"], patch_size=m["patch_size"],
                           image_size=m["image_size"], n_channels=m["n_channels"],
                           use_prompts=self.raw["deprompt"]["enabled"],
                           p_dropout=m["p_dropout"])

    def connectivity_setup(self) -> ConnectivitySetup:
        c = self.raw["connectivity"]
        return ConnectivitySetup(mode=SkipMode(c["mode"]),
                                 fusion=FusionMode(c["fusion"]),
                                 a_scalar=c["a_scalar"])

    def strategy(self) -> PromptWeightStrategy:
        d = self.raw["deprompt"]
        return PromptWeightStrategy(kind=WeightKind(d["strategy"]),
                                    hard_value=d["hard_value"],
                                    eval_value=d["eval_value"])

    def loss_weights(self) -> LossWeights:
        w = self.raw["loss"]
        return LossWeights(cls=w["cls"], l1=w["l1"], giou=w["giou"],
                           aux=w["aux"], no_object=w["no_object_weight"])

    def world(self) -> SyntheticWorld:
        e, m = self.raw["episode"], self.raw["model"]
        return SyntheticWorld(canvas=m["image_size"], n_channels=m["n_channels"],
                              min_half=e["min_half"], max_half=e["max_half"],
                              max_objects=e["max_objects"])

    def episode_spec(self, seed: int) -> EpisodeSpec:
        e = self.raw["episode"]
        return EpisodeSpec(base_classes=tuple(e["base_classes"]),
                           novel_classes=tuple(e["novel_classes"]),
                           n_shot=e["n_shot"], base_multiplier=e["base_multiplier"],
                           balanced=e["balanced"], sampling_seed=seed)

    def optimizer_spec(self, phase: str) -> OptimizerSpec:
        o = self.raw["optimizer"]
        return OptimizerSpec(lr=self.raw[phase]["lr"], beta1=o["beta1"],
                             beta2=o["beta2"], eps=o["eps"],
                             grad_clip=o["grad_clip"])

    def phase_plan(self, phase: str, seed: int) -> TrainPhasePlan:
        p = self.raw[phase]
        if phase == "pretrain":
            return TrainPhasePlan.pretrain(p["epochs"], p["batch_size"], seed,
                                           p["patience"])
        return TrainPhasePlan.finetune(p["epochs"], p["batch_size"], seed,
                                       p["patience"])

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """New config with dotted-path overrides applied (seed, ladder rows,
        sweeps); revalidates."""
        data = json.loads(self.canonical_json())
        for dotted, value in overrides.items():
            node = data
            parts = dotted.split(".")
            for part in parts[:-1]:
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError([f"{dotted}: unknown key"])
            node[parts[-1]] = value
        return RunConfig.from_dict(data)

    def canonical_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.raw, sort_keys=True))
