"""
Shared fixtures: tiny model configs, the shipped fixture corpus and seeded
random sources. Every test runs at 64-bit precision.
"""

from pathlib import Path
from typing import List

import numpy as np
import pytest

from gridner.core.config import settings
from gridner.diffcore import set_default_dtype
from gridner.schemas.config import ModelConfig, RunConfig, TrainConfig
from gridner.schemas.corpus import SentenceRecord
from gridner.services.corpus_service import load_corpus


@pytest.fixture(autouse=True)
def float64_tensors():
    set_default_dtype("float64")
    yield
    set_default_dtype("float64")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        d_model=8, n_layers=1, n_heads=2, d_ff=8, d_type=4, d_lstm=4, d_biaffine=4,
        d_h=4, d_E_d=3, d_E_t=3, d_g=4, dropout=0.0, max_len=64,
    )


@pytest.fixture
def tiny_run_config(tiny_config) -> RunConfig:
    return RunConfig(
        model=tiny_config,
        train=TrainConfig(batch_size=8, lr_encoder=1e-3, lr_heads=5e-3, epochs=1, mlm_epochs=1, patience=5),
        seed=7,
    )


@pytest.fixture(scope="session")
def fixture_path() -> Path:
    return settings.FIXTURE_PATH


@pytest.fixture(scope="session")
def fixture_records(fixture_path) -> List[SentenceRecord]:
    return load_corpus(fixture_path)
