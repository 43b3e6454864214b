"""Shared fixtures.

The trained model bundle takes several minutes of CPU to build, so it is
session-scoped and shared by every accuracy-gated test. Structural tests
construct their own tiny untrained models instead of pulling this in.

Set LATENTVEIL_CKPT to a directory holding a previously saved bundle
(codec, denoiser, recognizer_<variant> checkpoints trained with default
configs on the default dataset) to skip the training step.
"""

import os
from pathlib import Path

import pytest

from latentveil.experiments import (ExperimentConfig, load_bundle,
                                    mask_oracle_from_config, save_bundle,
                                    train_models)
from latentveil.faces import generate_dataset
from latentveil.recognize import VARIANT_NAMES
from latentveil.schedule import make_schedule


@pytest.fixture(scope="session")
def dataset():
    return generate_dataset(40, 12, seed=0)


@pytest.fixture(scope="session")
def sched():
    return make_schedule(60, 1e-4, 0.02)


def _config_for(root: Path) -> ExperimentConfig:
    return ExperimentConfig(
        codec_path=str(root / "codec"),
        eps_path=str(root / "denoiser"),
        recognizer_paths={v: str(root / f"recognizer_{v}") for v in VARIANT_NAMES},
        out_dir=str(root / "runs"))


@pytest.fixture(scope="session")
def bundle_cfg(tmp_path_factory) -> ExperimentConfig:
    cached = os.environ.get("LATENTVEIL_CKPT")
    if cached and Path(cached, "codec.json").exists():
        return _config_for(Path(cached))
    return _config_for(tmp_path_factory.mktemp("checkpoints"))


@pytest.fixture(scope="session")
def bundle(dataset, sched, bundle_cfg):
    if Path(bundle_cfg.codec_path + ".json").exists():
        return load_bundle(bundle_cfg)
    oracle = mask_oracle_from_config(bundle_cfg, dataset)
    b = train_models(dataset, sched, oracle)
    save_bundle(b, bundle_cfg)
    return b
