"""Tiny configurations and datasets shared by the training and CLI tests."""
from lidnet.models.config import ExperimentConfig, config_from_dict
from lidnet.phantoms import build_dataset

TINY = {
    "dataset": {
        "phantom": {"image_size": 32, "n_lesions": [1, 2], "lesion_radius": [2, 3]},
        "simulation": {"n0": 1000},
        "n_train": 4,
        "n_test": 2,
    },
    "detector": {"channels": [4, 4, 4, 4], "head_channels": 4, "head_hidden": 16, "boxes_per_image": 16},
    "train": {
        "t1": 2,
        "t2": 2,
        "t3": 1,
        "rounds": 2,
        "batch_size": 2,
        "generator_channels": 4,
        "discriminator_channels": 4,
        "eval_interval": 0,
        "eval_samples": 2,
        "early_stop_patience": 0,
    },
}


def tiny_config(**train_overrides) -> ExperimentConfig:
    data = {**TINY, "train": {**TINY["train"], **train_overrides}}
    config, warnings = config_from_dict(data)
    assert not warnings, warnings
    return config


def tiny_dataset(config: ExperimentConfig):
    ds = config.dataset
    return build_dataset(ds.phantom, ds.simulation, ds.n_train, ds.n_test)
