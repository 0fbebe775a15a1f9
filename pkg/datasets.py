"""
Synthetic datasets for hybridtrain
"""

import logging
from typing import Iterator

import numpy as np

from models import NetworkSpec, ValidatedRun
from nn_core import DataBatch

logger = logging.getLogger(__name__)


def regression_task(net: NetworkSpec, samples: int, seed: int, noise: float = 0.01) -> DataBatch:
    """Targets from a fixed random one-layer tanh map of the inputs, plus noise"""
    rng = np.random.default_rng([seed, 1])
    inputs = rng.standard_normal((samples, net.input_dim))
    projection = rng.standard_normal((net.output_dim, net.input_dim)) / np.sqrt(net.input_dim)
    targets = np.tanh(inputs @ projection.T) + noise * rng.standard_normal((samples, net.output_dim))
    return DataBatch(inputs, targets)


def classification_task(net: NetworkSpec, samples: int, seed: int, noise: float = 0.01) -> DataBatch:
    """One-hot labels: argmax of a random projection of noisy inputs"""
    rng = np.random.default_rng([seed, 2])
    inputs = rng.standard_normal((samples, net.input_dim))
    projection = rng.standard_normal((net.output_dim, net.input_dim))
    noisy = inputs + noise * rng.standard_normal(inputs.shape)
    labels = np.argmax(noisy @ projection.T, axis=1)
    return DataBatch(inputs, np.eye(net.output_dim)[labels])


def make_dataset(run: ValidatedRun, seed: int) -> DataBatch:
    training = run.training
    samples = training.dataset_size or 4 * run.batch.batch_size
    if samples % run.batch.batch_size != 0:
        raise ValueError(f"dataset_size={samples} is not a multiple of batch_size={run.batch.batch_size}")
    task = regression_task if training.dataset == "regression" else classification_task
    logger.info(f"Generating {training.dataset} dataset: {samples} samples, seed {seed}")
    return task(run.network, samples, seed, training.input_noise)


def batch_stream(pool: DataBatch, batch_size: int) -> Iterator[DataBatch]:
    """Cycle through the pool in order, one batch at a time, forever"""
    count = pool.size // batch_size
    if count == 0:
        raise ValueError(f"pool of {pool.size} samples is smaller than one batch of {batch_size}")
    index = 0
    while True:
        start = (index % count) * batch_size
        yield pool.rows(start, start + batch_size)
        index += 1


def synthetic_batches(run: ValidatedRun, seed: int) -> Iterator[DataBatch]:
    return batch_stream(make_dataset(run, seed), run.batch.batch_size)
