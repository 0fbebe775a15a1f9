"""
Shared fixtures for the hybridtrain test suite
"""

from pathlib import Path

import numpy as np
import pytest

from config import validate
from models import (
    BatchConfig,
    CostModel,
    MemoryConfig,
    NetworkSpec,
    OptimizerConfig,
    ParallelConfig,
    TrainingConfig,
)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"


def build_run(g_inter=1, g_data=1, microbatch_size=1, num_layers=8, width=32, batch_size=16,
              parallel=None, network=None, optimizer=None, training=None, cost_model=None, memory=None):
    return validate(
        ParallelConfig(g_inter=g_inter, g_data=g_data, microbatch_size=microbatch_size, **(parallel or {})),
        NetworkSpec(num_layers=num_layers, width=width, **(network or {})),
        BatchConfig(batch_size=batch_size),
        optimizer=OptimizerConfig(**(optimizer or {})),
        cost_model=CostModel(**(cost_model or {})),
        training=TrainingConfig(**(training or {})),
        memory=MemoryConfig(**(memory or {})),
    )


@pytest.fixture
def make_run():
    """Factory for validated runs; keyword sections are passed to the matching model"""
    return build_run


@pytest.fixture
def config_dir() -> Path:
    return CONFIG_DIR


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
