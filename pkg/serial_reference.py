"""
Serial reference trainer for hybridtrain

A single-worker training loop over the same network, data and optimizer as the
hybrid engine. In full-batch mode it runs one forward/backward over the whole
batch. Otherwise it reproduces the engine's microbatch partition and its
accumulation order (microbatches by id within a replica, then replicas by
rank), which makes mixed-precision runs comparable bit for bit.
"""

import logging
from typing import Iterable, List, Optional, Tuple

import numpy as np

from models import ValidatedRun
from nn_core import DataBatch, NetworkShard, init_network, loss_and_grad, round_half
from optimizer import NonFiniteGradient, OptimizerState, adam_step, gradient_overflow, promote_and_descale

logger = logging.getLogger(__name__)


class SerialTrainer:
    """Plain training loop used as the numerical oracle"""

    def __init__(self, run: ValidatedRun, seed: Optional[int] = None, full_batch: bool = False):
        self.run = run
        self.full_batch = full_batch
        self.mixed_precision = run.training.mixed_precision
        self.loss_scale = run.optimizer.loss_scale
        seed = run.training.seed if seed is None else seed
        self.network = NetworkShard(init_network(run.network, seed), mixed_precision=self.mixed_precision)
        self.state = OptimizerState.from_params(self.network.parameters())

    def _round(self, values: np.ndarray) -> np.ndarray:
        return round_half(values) if self.mixed_precision else values

    def _microbatch_pass(self, batch: DataBatch, mb_id: int, total: int) -> float:
        output = self.network.forward(batch.inputs, mb_id)
        loss, grad = loss_and_grad(output, batch.targets, total, self.loss_scale, self.run.network.loss)
        self.network.backward(mb_id, grad)
        return loss

    def gradients(self, batch: DataBatch) -> Tuple[float, List[np.ndarray], np.ndarray]:
        """(batch loss, per-replica gradients, reduced gradient) with the loss scale still applied"""
        if self.full_batch:
            self.network.zero_grad()
            loss = self._microbatch_pass(batch, 0, 1)
            grad = self.network.finalize_gradients()
            return loss / self.loss_scale, [grad], grad

        g_data = self.run.parallel.g_data
        per_shard = self.run.batch.microbatches_per_shard
        total = self.run.batch.total_microbatches
        losses, replicas = [], []
        for col, shard_batch in enumerate(batch.split(g_data)):
            self.network.zero_grad()
            for local, mb in enumerate(shard_batch.split(per_shard)):
                losses.append(self._microbatch_pass(mb, col * per_shard + local, total))
            replicas.append(self.network.finalize_gradients())

        reduced = replicas[0].copy()
        for grad in replicas[1:]:
            reduced = self._round(reduced + grad)
        return sum(losses) / self.loss_scale, replicas, reduced

    def step(self, batch: DataBatch) -> Tuple[float, bool]:
        """One training step; returns (loss, skipped)"""
        loss, replicas, reduced = self.gradients(batch)
        try:
            if any(gradient_overflow(g, self.mixed_precision) for g in [*replicas, reduced]):
                raise NonFiniteGradient([0])
            adam_step(self.state, promote_and_descale(reduced, self.loss_scale), self.run.optimizer)
        except NonFiniteGradient:
            logger.warning(f"Serial reference skipping step (loss scale {self.loss_scale})")
            if self.run.optimizer.dynamic_loss_scale:
                self.loss_scale = max(1.0, self.loss_scale / 2.0)
            return loss, True
        self.network.load_parameters(self.state.master_params)
        return loss, False

    def train(self, data: Iterable[DataBatch], steps: int) -> List[float]:
        losses = []
        batches = iter(data)
        for step in range(steps):
            loss, _ = self.step(next(batches))
            losses.append(loss)
            logger.debug(f"Serial step {step}: loss={loss:.6g}")
        return losses


def max_relative_difference(a: List[float], b: List[float]) -> float:
    """Largest per-step |a-b| / max(|a|, |b|); 0 where both are 0"""
    if len(a) != len(b):
        raise ValueError(f"loss logs have different lengths ({len(a)} vs {len(b)})")
    worst = 0.0
    for x, y in zip(a, b):
        scale = max(abs(x), abs(y))
        if scale > 0:
            worst = max(worst, abs(x - y) / scale)
    return worst
