"""Fixtures for the SENT desk laboratory tests."""

from __future__ import annotations

import logging

import numpy as np
import pytest

from sent_lab.config import LabConfig, load_config
from sent_lab.const import ENV_OUTPUT_DIR
from sent_lab.policy import PolicyParams
from sent_lab.task_env import DEFAULT_VOCAB, GeneratorSpec, Query, generate_dataset
from sent_lab.warm_start import WarmStartConfig, build_initial_policy

from .helpers import SMALL_RUN


@pytest.fixture(autouse=True)
def _quiet_logging(caplog):
    caplog.set_level(logging.WARNING)


@pytest.fixture(autouse=True)
def _no_output_env(monkeypatch):
    monkeypatch.delenv(ENV_OUTPUT_DIR, raising=False)


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator."""
    return np.random.default_rng(42)


@pytest.fixture
def dataset() -> list[Query]:
    """A dozen arithmetic queries."""
    return generate_dataset(GeneratorSpec(count=12), seed=3)


@pytest.fixture
def policy(dataset) -> PolicyParams:
    """Warm-started policy over ``dataset``."""
    return build_initial_policy(dataset, DEFAULT_VOCAB, WarmStartConfig(), seed=3)


@pytest.fixture
def lab_config(tmp_path) -> LabConfig:
    """Small configuration writing under a temporary directory."""
    return load_config(None, {**SMALL_RUN, "output_dir": str(tmp_path / "run")})
