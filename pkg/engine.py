"""
Hybrid training engine for hybridtrain

Workers form a g_inter x g_data grid. Each column is a pipeline that runs the
message-driven inter-layer schedule over its shard of the batch; each row is a
data-parallel group that all-reduces its gradients before the optimizer step.
A single driver context executes every worker, choosing which ready worker
runs next through the fabric's seeded generator.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Optional, Set

import numpy as np

from fabric import Fabric, FabricTotals, InvalidRoute, Message, MessageKind, Starvation, WorkerId
from models import BatchResult, StepRecord, ValidatedRun
from nn_core import DataBatch, NetworkShard, ShapeMismatch, init_network, loss_and_grad
from optimizer import (
    NonFiniteGradient,
    OffloadStore,
    adam_step,
    bucketed_step,
    gradient_overflow,
    promote_and_descale,
)

logger = logging.getLogger(__name__)


@dataclass
class WorkerState:
    id: WorkerId
    shard: NetworkShard
    store: OffloadStore
    microbatch_queue: Deque[int] = field(default_factory=deque)
    inputs: Dict[int, np.ndarray] = field(default_factory=dict)   # row 0 only
    targets: Dict[int, np.ndarray] = field(default_factory=dict)  # last row only
    losses: Dict[int, float] = field(default_factory=dict)
    forwards: List[int] = field(default_factory=list)
    backwards: List[int] = field(default_factory=list)

    def reset_batch(self):
        self.microbatch_queue.clear()
        self.inputs.clear()
        self.targets.clear()
        self.losses.clear()
        self.forwards.clear()
        self.backwards.clear()
        self.shard.zero_grad()


class HybridEngine:
    """Hybrid inter-layer x data-parallel trainer over a simulated fabric"""

    def __init__(self, run: ValidatedRun, seed: Optional[int] = None, fabric_seed: Optional[int] = None,
                 record_trace: bool = False, message_budget: Optional[int] = None):
        self.run = run
        self.parallel = run.parallel
        self.g_inter = run.parallel.g_inter
        self.g_data = run.parallel.g_data
        self.mixed_precision = run.training.mixed_precision
        self.loss_scale = run.optimizer.loss_scale
        self.seed = run.training.seed if seed is None else seed

        self.fabric = Fabric(
            self.g_inter, self.g_data,
            seed=self.seed if fabric_seed is None else fabric_seed,
            element_bytes=2 if self.mixed_precision else 8,
            message_budget=message_budget,
            record_trace=record_trace,
        )

        # one initialisation for the full network, sliced into stages
        layers = init_network(run.network, self.seed)
        self.workers: Dict[WorkerId, WorkerState] = {}
        for row in range(self.g_inter):
            stage = run.stage_layers(row)
            for col in range(self.g_data):
                shard = NetworkShard(
                    [layers[i].copy() for i in stage],
                    first_layer=stage.start,
                    checkpoint_interval=self.parallel.checkpoint_interval,
                    mixed_precision=self.mixed_precision,
                )
                store = OffloadStore(shard.parameters(), self.parallel.bucket_size)
                self.workers[WorkerId(row, col)] = WorkerState(WorkerId(row, col), shard, store)

        self._in_flight: Dict[int, Set[int]] = {col: set() for col in range(self.g_data)}
        self.max_in_flight = 0
        logger.info(f"Engine ready: {self.g_inter}x{self.g_data} grid, "
                    f"{run.batch.microbatches_per_shard} microbatches per shard, "
                    f"checkpoint interval {self.parallel.checkpoint_interval}")

    # -- helpers -------------------------------------------------------------

    def worker(self, row: int, col: int) -> WorkerState:
        return self.workers[WorkerId(row, col)]

    def row_group(self, row: int) -> List[WorkerId]:
        return [WorkerId(row, col) for col in range(self.g_data)]

    def parameters(self, col: int = 0) -> np.ndarray:
        """Full parameter vector of one pipeline, stages concatenated"""
        return np.concatenate([self.worker(row, col).shard.parameters() for row in range(self.g_inter)])

    def gradients(self, col: int = 0) -> np.ndarray:
        return np.concatenate([self.worker(row, col).shard.grad_accumulator for row in range(self.g_inter)])

    def _is_last(self, worker: WorkerState) -> bool:
        return worker.id.row == self.g_inter - 1

    # -- inter-layer phase ---------------------------------------------------

    def _load_batch(self, batch: DataBatch):
        if batch.size != self.run.batch.batch_size:
            raise ShapeMismatch(f"batch has {batch.size} samples, config expects {self.run.batch.batch_size}")
        per_shard = self.run.batch.microbatches_per_shard
        size = self.parallel.microbatch_size
        for state in self.workers.values():
            state.reset_batch()
        for col, shard_batch in enumerate(batch.split(self.g_data)):
            first, last = self.worker(0, col), self.worker(self.g_inter - 1, col)
            for local, mb in enumerate(shard_batch.split(per_shard)):
                mb_id = col * per_shard + local
                first.microbatch_queue.append(mb_id)
                first.inputs[mb_id] = mb.inputs
                # targets are plumbing: they go straight to the stage that computes the loss
                last.targets[mb_id] = mb.targets
            self._in_flight[col].clear()
        assert size * per_shard * self.g_data == batch.size

    def _fill_pipeline(self, worker: WorkerState):
        """Row 0 injects microbatches until pipeline_limit are in flight"""
        active = self._in_flight[worker.id.col]
        while worker.microbatch_queue and len(active) < self.parallel.pipeline_limit:
            mb_id = worker.microbatch_queue.popleft()
            active.add(mb_id)
            self.max_in_flight = max(self.max_in_flight, len(active))
            assert len(active) <= self.parallel.pipeline_limit
            self._run_forward(worker, mb_id, worker.inputs.pop(mb_id))

    def _run_forward(self, worker: WorkerState, mb_id: int, activation: np.ndarray):
        output = worker.shard.forward(activation, mb_id)
        worker.forwards.append(mb_id)
        if self._is_last(worker):
            loss, seed_grad = loss_and_grad(
                output, worker.targets.pop(mb_id), self.run.batch.total_microbatches,
                self.loss_scale, self.run.network.loss,
            )
            worker.losses[mb_id] = loss
            self._run_backward(worker, mb_id, seed_grad)
        else:
            dest = WorkerId(worker.id.row + 1, worker.id.col)
            self.fabric.send(Message(worker.id, dest, mb_id, MessageKind.ACTIVATION_FORWARD, output,
                                     self.fabric.element_bytes))

    def _run_backward(self, worker: WorkerState, mb_id: int, grad: np.ndarray):
        input_grad = worker.shard.backward(mb_id, grad)
        worker.backwards.append(mb_id)
        if worker.id.row > 0:
            dest = WorkerId(worker.id.row - 1, worker.id.col)
            self.fabric.send(Message(worker.id, dest, mb_id, MessageKind.GRADIENT_BACKWARD, input_grad,
                                     self.fabric.element_bytes))
        else:
            self._in_flight[worker.id.col].discard(mb_id)

    def _dispatch(self, worker: WorkerState, msg: Message):
        if msg.source.row == worker.id.row - 1:
            self._run_forward(worker, msg.microbatch_id, msg.payload)
        elif msg.source.row == worker.id.row + 1:
            self._run_backward(worker, msg.microbatch_id, msg.payload)
        else:
            raise InvalidRoute(f"{worker.id} received a message from non-neighbour {msg.source}")
        if worker.id.row == 0:
            self._fill_pipeline(worker)

    def _work_remaining(self) -> bool:
        per_shard = self.run.batch.microbatches_per_shard
        return any(len(self.worker(0, col).backwards) < per_shard for col in range(self.g_data))

    def inter_layer_parallel_step(self, batch: DataBatch):
        """Run every pipeline over its shard of the batch until all microbatches drain"""
        self._load_batch(batch)
        for col in range(self.g_data):
            self._fill_pipeline(self.worker(0, col))

        while self._work_remaining():
            ready = self.fabric.ready_workers()
            if not ready:
                state = self.fabric.in_flight_state()
                state["unfinished_columns"] = [c for c in range(self.g_data)
                                               if len(self.worker(0, c).backwards) < self.run.batch.microbatches_per_shard]
                raise Starvation("no message is pending but microbatches remain", state)
            target = self.fabric.choose(ready)
            self._dispatch(self.workers[target], self.fabric.receive(target))

        for state in self.workers.values():
            state.shard.finalize_gradients()

    # -- data-parallel phase -------------------------------------------------

    def data_parallel_step(self, row: int) -> List[np.ndarray]:
        """All-reduce the gradient accumulators of one stage across its replicas"""
        group = self.row_group(row)
        vectors = [self.workers[w].shard.grad_accumulator for w in group]
        reduced = self.fabric.all_reduce(group, vectors, half=self.mixed_precision)
        for w, vector in zip(group, reduced):
            self.workers[w].shard.grad_accumulator = vector
        return reduced

    def _optimize_worker(self, state: WorkerState):
        cfg = self.run.optimizer
        if self.run.training.offload:
            bucketed_step(state.store, state.shard.grad_accumulator, cfg, loss_scale=self.loss_scale)
        else:
            adam_step(state.store.host, promote_and_descale(state.shard.grad_accumulator, self.loss_scale), cfg)
        state.shard.load_parameters(state.store.host.master_params)

    def overlapped_reduce_and_optimize(self, row: int, k: Optional[int] = None) -> bool:
        """Chunked all-reduce of k buckets at a time, each chunk stepped as soon as it is reduced.

        Stepped buckets are staged, not written: commit_row makes them visible
        and abort_row drops them. Returns False when a reduced chunk overflowed,
        in which case nothing was staged past that chunk.
        """
        k = k or self.parallel.coarsening_k
        group = self.row_group(row)
        states = [self.workers[w] for w in group]
        offload = self.run.training.offload
        if offload:
            for state in states:
                state.store.begin_step()

        vectors = [s.shard.grad_accumulator for s in states]
        chunks = self.fabric.all_reduce_chunked(group, vectors, k * self.parallel.bucket_size, half=self.mixed_precision)
        clean = True
        for index, part, reduced in chunks:
            for state, chunk in zip(states, reduced):
                state.shard.grad_accumulator[part] = chunk
            if clean and any(gradient_overflow(chunk, self.mixed_precision) for chunk in reduced):
                logger.warning(f"Row {row}: reduced chunk {index} overflowed")
                clean = False
            if not clean or not offload:
                continue
            for state, chunk in zip(states, reduced):
                store = state.store
                for bucket in range(index * k, min((index + 1) * k, store.num_buckets)):
                    span = store.bucket_slice(bucket)
                    local = slice(span.start - part.start, span.stop - part.start)
                    store.stage_bucket(bucket, chunk[local], self.run.optimizer, self.loss_scale)
            logger.debug(f"Row {row}: chunk {index} reduced and stepped")
        return clean

    def commit_row(self, row: int):
        for w in self.row_group(row):
            state = self.workers[w]
            if self.run.training.offload:
                state.store.commit_staged()
            else:
                adam_step(state.store.host, promote_and_descale(state.shard.grad_accumulator, self.loss_scale),
                          self.run.optimizer)
            state.shard.load_parameters(state.store.host.master_params)

    def abort_row(self, row: int):
        if self.run.training.offload:
            for w in self.row_group(row):
                self.workers[w].store.abort_step()

    # -- one batch -----------------------------------------------------------

    def _batch_loss(self) -> float:
        losses = {}
        for col in range(self.g_data):
            losses.update(self.worker(self.g_inter - 1, col).losses)
        return sum(losses[mb] for mb in sorted(losses)) / self.loss_scale

    def _skip_step(self, reason: str) -> None:
        logger.warning(f"Skipping optimizer step: {reason} (loss scale {self.loss_scale})")
        if self.run.optimizer.dynamic_loss_scale:
            new_scale = max(1.0, self.loss_scale / 2.0)
            if new_scale != self.loss_scale:
                logger.warning(f"Loss scale lowered from {self.loss_scale} to {new_scale}")
            self.loss_scale = new_scale

    def train_batch(self, batch: DataBatch) -> BatchResult:
        before = self.fabric.totals()
        scale = self.loss_scale
        self.max_in_flight = 0
        self.fabric.mark("batch_start")
        self.inter_layer_parallel_step(batch)
        self.fabric.mark("drain_complete")
        loss = self._batch_loss()

        # every worker agrees on overflow before any reduction or update
        overflow = [str(w) for w, s in self.workers.items()
                    if gradient_overflow(s.shard.grad_accumulator, self.mixed_precision)]
        skipped, reduced = False, False
        if overflow:
            self._skip_step(f"gradient overflow on {', '.join(overflow)}")
            skipped = True
        elif self.run.training.overlap:
            self.fabric.mark("optimizer_start")
            clean = [self.overlapped_reduce_and_optimize(row) for row in range(self.g_inter)]
            reduced = True
            if all(clean):
                for row in range(self.g_inter):
                    self.commit_row(row)
                self.fabric.mark("optimizer_end")
            else:
                for row in range(self.g_inter):
                    self.abort_row(row)
                self._skip_step(f"reduced gradient overflow in row(s) {[r for r, ok in enumerate(clean) if not ok]}")
                skipped = True
        else:
            for row in range(self.g_inter):
                self.data_parallel_step(row)
            reduced = True
            try:
                self.fabric.mark("optimizer_start")
                # the reduced sum can saturate even when every local gradient is in range
                for state in self.workers.values():
                    if gradient_overflow(state.shard.grad_accumulator, self.mixed_precision):
                        raise NonFiniteGradient([0])
                for state in self.workers.values():
                    self._optimize_worker(state)
                self.fabric.mark("optimizer_end")
            except NonFiniteGradient as e:
                self._skip_step(str(e))
                skipped = True

        after = self.fabric.totals()
        return BatchResult(
            loss=loss,
            grads_reduced=reduced,
            skipped=skipped,
            loss_scale=scale,
            max_in_flight=self.max_in_flight,
            comm_bytes=after.p2p_bytes - before.p2p_bytes,
        )

    def train(self, data: Iterable[DataBatch], steps: Optional[int] = None) -> List[StepRecord]:
        """One batch per step; returns the per-step log"""
        steps = self.run.training.steps if steps is None else steps
        log: List[StepRecord] = []
        batches = iter(data)
        for step in range(steps):
            before = self.fabric.totals()
            try:
                batch = next(batches)
            except StopIteration:
                logger.warning(f"Data stream ended after {step} steps")
                break
            result = self.train_batch(batch)
            after = self.fabric.totals()
            log.append(_step_record(step, result, before, after))
            logger.info(f"Step {step}: loss={result.loss:.6g} scale={result.loss_scale:g}"
                        f"{' (skipped)' if result.skipped else ''}")
        return log


def _step_record(step: int, result: BatchResult, before: FabricTotals, after: FabricTotals) -> StepRecord:
    return StepRecord(
        step=step,
        loss=result.loss,
        loss_scale=result.loss_scale,
        skipped=result.skipped,
        p2p_bytes=after.p2p_bytes - before.p2p_bytes,
        allreduce_bytes=after.allreduce_bytes - before.allreduce_bytes,
        messages=after.messages - before.messages,
        max_in_flight=result.max_in_flight,
    )
