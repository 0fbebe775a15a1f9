"""
Analytics module for hybridtrain

Closed-form memory and performance accounting: activation units under
checkpointing, model-state bytes with and without bucketed offload, the
communication/computation counters of the inter-layer phase, and the
training-time and flop-rate metrics.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Literal, Optional

from pydantic import BaseModel

logger = logging.getLogger(__name__)

TOTAL_TRAINING_TOKENS = 3 * 10**11

# bytes per parameter of each model-state component
HALF_BYTES = 2
FULL_BYTES = 4
ADAM_STATE_BYTES = 8


class BadCheckpointInterval(ValueError):
    """The checkpoint interval does not divide the per-worker layer count"""


def activation_units(num_layers: int, g_inter: int, ac: int) -> int:
    """Peak activation units per worker: g_inter * (N / (g_inter * ac)) + 1 + ac"""
    if ac < 1 or g_inter < 1 or num_layers % g_inter != 0 or (num_layers // g_inter) % ac != 0:
        raise BadCheckpointInterval(f"ac={ac} must divide layers per worker (N={num_layers}, g_inter={g_inter})")
    return g_inter * (num_layers // (g_inter * ac)) + 1 + ac


def model_state_bytes(phi: int, optimized: bool, bucket_size: Optional[int] = None) -> int:
    """Device bytes for parameters, gradients and optimizer state of phi parameters"""
    if phi <= 0:
        raise ValueError("phi must be positive")
    if not optimized:
        return 20 * phi
    if bucket_size is None or bucket_size <= 0:
        raise ValueError("bucket_size must be positive when optimized")
    return 4 * phi + 16 * bucket_size


def transformer_parameters(layers: int, hidden: int, vocab: int = 0) -> int:
    """Parameter count of a GPT-style transformer stack"""
    return 12 * layers * hidden * hidden + 13 * layers * hidden + vocab * hidden


# ---------------------------------------------------------------------------
# Memory ledger
# ---------------------------------------------------------------------------

Residency = Literal["device", "host", "deleted"]


class LedgerRow(BaseModel):
    component: str
    bytes: int
    residency: Residency
    kind: Literal["model_state", "activation"]


class MemoryLedger(BaseModel):
    phi: int
    bucket_size: int
    optimized: bool
    activation_units: int
    bytes_per_unit: int
    rows: List[LedgerRow]

    @property
    def device_model_state_bytes(self) -> int:
        return sum(r.bytes for r in self.rows if r.kind == "model_state" and r.residency == "device")

    @property
    def host_bytes(self) -> int:
        return sum(r.bytes for r in self.rows if r.residency == "host")

    @property
    def activation_bytes(self) -> int:
        return sum(r.bytes for r in self.rows if r.kind == "activation")

    @property
    def device_total_bytes(self) -> int:
        return self.device_model_state_bytes + self.activation_bytes


def build_memory_ledger(phi: int, bucket_size: int, optimized: bool, units: int, bytes_per_unit: int) -> MemoryLedger:
    moved = "host" if optimized else "device"
    rows = [
        LedgerRow(component="theta16", bytes=HALF_BYTES * phi, residency="device", kind="model_state"),
        LedgerRow(component="grad16", bytes=HALF_BYTES * phi, residency="device", kind="model_state"),
        LedgerRow(component="theta", bytes=FULL_BYTES * phi, residency=moved, kind="model_state"),
        LedgerRow(component="grad", bytes=0 if optimized else FULL_BYTES * phi,
                  residency="deleted" if optimized else "device", kind="model_state"),
        LedgerRow(component="optimizer_state", bytes=ADAM_STATE_BYTES * phi, residency=moved, kind="model_state"),
        LedgerRow(component="bucket_scratch", bytes=16 * bucket_size if optimized else 0,
                  residency="device", kind="model_state"),
        LedgerRow(component="activations", bytes=units * bytes_per_unit, residency="device", kind="activation"),
    ]
    ledger = MemoryLedger(
        phi=phi, bucket_size=bucket_size, optimized=optimized,
        activation_units=units, bytes_per_unit=bytes_per_unit, rows=rows,
    )
    assert ledger.device_model_state_bytes == model_state_bytes(phi, optimized, bucket_size)
    return ledger


def parameters_per_worker(run) -> int:
    """phi: parameters held by the busiest worker"""
    memory = run.memory
    if memory.parameters_per_worker is not None:
        return memory.parameters_per_worker
    if memory.transformer is not None:
        shape = memory.transformer
        return transformer_parameters(shape.layers, shape.hidden, shape.vocab) // run.parallel.g_inter
    net = run.network
    return max(sum(net.layer_parameter_count(i) for i in run.stage_layers(row)) for row in range(run.parallel.g_inter))


def ledger_for_run(run, optimized: bool) -> MemoryLedger:
    net, parallel = run.network, run.parallel
    units = activation_units(net.num_layers, parallel.g_inter, parallel.checkpoint_interval)
    unit_bytes = run.memory.bytes_per_activation_unit or parallel.microbatch_size * net.uniform_activation_bytes
    return build_memory_ledger(parameters_per_worker(run), parallel.bucket_size, optimized, units, unit_bytes)


# ---------------------------------------------------------------------------
# Communication / computation counters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CommCompCounters:
    samples_per_worker: int
    p2p_bytes_per_worker: int
    flops_per_worker: float
    ratio: Optional[Fraction]  # computation per byte communicated; None when nothing is communicated


def stage_forward_flops(net, layers: range) -> int:
    return sum(net.layer_forward_flops(i) for i in layers)


def comm_comp_counters(run) -> CommCompCounters:
    """Per-worker traffic and work of the inter-layer phase for one batch"""
    parallel, net = run.parallel, run.network
    samples = run.batch.batch_size // parallel.g_data
    # an interior stage sends activations forward and gradients backward
    sending_directions = min(parallel.g_inter - 1, 2)
    p2p = samples * net.uniform_activation_bytes * sending_directions
    stage_flops = max(stage_forward_flops(net, run.stage_layers(row)) for row in range(parallel.g_inter))
    flops = float(samples * stage_flops) * (1.0 + run.cost_model.backward_multiplier)
    ratio = Fraction(flops) / p2p if p2p else None
    return CommCompCounters(samples_per_worker=samples, p2p_bytes_per_worker=p2p, flops_per_worker=flops, ratio=ratio)


# ---------------------------------------------------------------------------
# Training-time and flop-rate metrics
# ---------------------------------------------------------------------------

def estimated_training_time(batch_time: float, batch_size: float, sequence_length: float) -> float:
    """Seconds to train on 300 billion tokens given the time of one batch"""
    if batch_time <= 0 or batch_size <= 0 or sequence_length <= 0:
        raise ValueError("batch_time, batch_size and sequence_length must be positive")
    return TOTAL_TRAINING_TOKENS * batch_time / (batch_size * sequence_length)


def flops_and_peak_fraction(
    batch_size: float,
    sequence_length: float,
    layers: float,
    hidden: float,
    vocab: float,
    batch_time: float,
    per_device_peak: float,
    devices: int,
) -> tuple:
    """Lower-bound flop/s of a transformer batch and its fraction of aggregate peak"""
    values = (batch_size, sequence_length, layers, hidden, vocab, batch_time, per_device_peak, devices)
    if any(v <= 0 for v in values):
        raise ValueError("all arguments must be positive")
    b, s, l, h, V, t = batch_size, sequence_length, layers, hidden, vocab, batch_time
    bracket = 1.0 + s / (6.0 * h) + V / (16.0 * l * h)
    flop_rate = 96.0 * b * s * l * h * h / t * bracket
    return flop_rate, flop_rate / (devices * per_device_peak)
