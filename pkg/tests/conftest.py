import numpy as np
import pytest
import yaml

# micro-scale settings: fast enough for unit tests of the full pipeline
MICRO = {
    "model": {"d_model": 32, "n_heads": 4, "n_queries": 8, "ffn_dim": 48,
              "patch_size": 8, "image_size": 32},
    "episode": {"n_shot": 1, "base_multiplier": 1, "n_train_images": 70,
                "n_test_images": 4, "max_objects": 2, "min_half": 4,
                "max_half": 7},
    "pretrain": {"epochs": 1, "batch_size": 4, "lr": 1e-3, "patience": 0},
    "finetune": {"epochs": 1, "batch_size": 4, "lr": 5e-4, "patience": 0},
    "seed": 0,
}


@pytest.fixture
def micro_config_dict():
    import copy
    return copy.deepcopy(MICRO)


@pytest.fixture
def micro_config_path(tmp_path, micro_config_dict):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(micro_config_dict))
    return path
