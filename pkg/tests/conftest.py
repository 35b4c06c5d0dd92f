"""Fixtures partagées : petites dimensions, générateur, dataset synthétique et configuration de run."""

import json
from pathlib import Path

import numpy as np
import pytest

from timedistill.config import SyntheticSpec
from timedistill.model import ModelDims, init_params
from timedistill.preprocessing import normalize, split
from timedistill.synthetic import synth_generate
from timedistill.trainer import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dims():
    return ModelDims(input_dims=3, hidden_dims=8, repr_dims=8, depth=3, kernel_size=3, width=8)


@pytest.fixture
def tiny_state(tiny_dims):
    return init_params(0, tiny_dims)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(
        iterations=5,
        batch_size=2,
        crop_window=16,
        hidden_dims=8,
        repr_dims=8,
        depth=3,
        kernel_size=3,
        width=8,
        seed=0,
        log_every=1,
    )


@pytest.fixture
def synthetic_ds():
    """Série synthétique courte, découpée et normalisée."""
    ds = synth_generate(7, 1, 400, 3, SyntheticSpec(length=400))
    return normalize(split(ds, (0.6, 0.2, 0.2)))


@pytest.fixture
def run_config_dict(tmp_path):
    return {
        "version": 1,
        "output_dir": str(tmp_path / "run"),
        "dataset": {"synthetic": {"length": 400, "channels": 3, "seed": 7}},
        "train": {
            "iterations": 3,
            "batch_size": 2,
            "crop_window": 16,
            "hidden_dims": 8,
            "repr_dims": 8,
            "depth": 3,
            "width": 8,
            "seed": 0,
        },
        "forecast": {"lookback": 16, "horizons": [4, 8], "alpha_grid": [0.1, 1, 10]},
    }


@pytest.fixture
def write_config(tmp_path):
    def _write(data, name="config.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path
    return _write
