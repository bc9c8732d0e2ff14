"""Self-describing checkpoint container: config + named parameters + seed.

One .npz file; parameters stay float64 so save/load round-trips bitwise.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .model import Detector, build_detector

FORMAT_KEY = "__format__"
CONFIG_KEY = "__config_json__"
SEED_KEY = "__seed__"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, model: Detector, config: RunConfig,
                    seed: int) -> None:
    arrays = {f"param/{name}": tensor.data for name, tensor in model.named_parameters()}
    arrays[FORMAT_KEY] = np.array(FORMAT_VERSION)
    arrays[CONFIG_KEY] = np.frombuffer(config.canonical_json().encode(), dtype=np.uint8)
    arrays[SEED_KEY] = np.array(seed, dtype=np.int64)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path):
    """Returns (model, config, seed) with parameters bitwise as saved."""
    with np.load(path) as blob:
        version = int(blob[FORMAT_KEY])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {version}")
        config = RunConfig.from_dict(json.loads(bytes(blob[CONFIG_KEY]).decode()))
        seed = int(blob[SEED_KEY])
        state = {key[len("param/"):]: blob[key] for key in blob.files
                 if key.startswith("param/")}
    model = build_detector(config.model_config(), config.connectivity_setup(), seed)
    model.load_state_dict(state)
    return model, config, seed
