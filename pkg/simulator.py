"""
Performance simulator for hybridtrain

Discrete-event timing of one batch: the message-driven inter-layer schedule of
a single pipeline (every pipeline is identical), followed by the all-reduce and
optimizer streams of each stage, with or without chunked overlap.
"""

import heapq
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from analytics import comm_comp_counters, stage_forward_flops
from models import PerfReport, ValidatedRun, WorkerTimes
from optimizer import MASTER_BYTES, STATE_BYTES

logger = logging.getLogger(__name__)

# host<->device bytes per parameter: fetch and write back of master weights and state
OFFLOAD_BYTES_PER_PARAM = 2 * (MASTER_BYTES + STATE_BYTES)


@dataclass(order=True)
class _Task:
    arrival: float
    seq: int
    kind: str = field(compare=False)         # "forward" or "backward"
    microbatch: int = field(compare=False)


@dataclass
class PipelineTimes:
    makespan: float
    busy: List[float]
    first_start: List[float]
    bytes_sent: List[int]
    timeline: List[Dict]


def simulate_pipeline(
    forward_times: Sequence[float],
    backward_times: Sequence[float],
    microbatches: int,
    pipeline_limit: int,
    message_latency: float = 0.0,
    message_transfer: float = 0.0,
    message_bytes: int = 0,
) -> PipelineTimes:
    """Event-driven makespan of one pipeline over `microbatches` microbatches.

    Each stage runs one task at a time, always the pending task that arrived
    first. The last stage turns a forward straight into its backward. Directed
    links serialise transfers; latency overlaps with the next transfer.
    """
    stages = len(forward_times)
    pending: List[List[_Task]] = [[] for _ in range(stages)]
    free = [0.0] * stages
    busy = [0.0] * stages
    first_start: List[Optional[float]] = [None] * stages
    bytes_sent = [0] * stages
    link_free: Dict[Tuple[int, int], float] = {}
    timeline: List[Dict] = []
    seq = 0

    def push(stage: int, arrival: float, kind: str, mb: int):
        nonlocal seq
        seq += 1
        heapq.heappush(pending[stage], _Task(arrival, seq, kind, mb))

    def deliver(src: int, dst: int, ready: float, kind: str, mb: int):
        depart = max(ready, link_free.get((src, dst), 0.0))
        link_free[(src, dst)] = depart + message_transfer
        bytes_sent[src] += message_bytes
        push(dst, depart + message_transfer + message_latency, kind, mb)

    injected, completed, in_flight = 0, 0, 0
    while injected < min(pipeline_limit, microbatches):
        push(0, 0.0, "forward", injected)
        injected += 1
        in_flight += 1

    while completed < microbatches:
        candidates = [(max(free[s], pending[s][0].arrival), pending[s][0].seq, s) for s in range(stages) if pending[s]]
        if not candidates:
            raise RuntimeError("pipeline simulation stalled with microbatches remaining")
        start, _, stage = min(candidates)
        task = heapq.heappop(pending[stage])
        if first_start[stage] is None:
            first_start[stage] = start

        last = stage == stages - 1
        if task.kind == "forward":
            duration = forward_times[stage] + (backward_times[stage] if last else 0.0)
        else:
            duration = backward_times[stage]
        end = start + duration
        free[stage] = end
        busy[stage] += duration
        timeline.append({"stream": "compute", "stage": stage, "kind": task.kind, "mb": task.microbatch,
                         "start": start, "end": end})

        if task.kind == "forward" and not last:
            deliver(stage, stage + 1, end, "forward", task.microbatch)
        elif stage > 0:
            deliver(stage, stage - 1, end, "backward", task.microbatch)
        else:
            completed += 1
            in_flight -= 1
            if injected < microbatches:
                push(0, end, "forward", injected)
                injected += 1
                in_flight += 1
        assert in_flight <= pipeline_limit

    return PipelineTimes(
        makespan=max(free),
        busy=busy,
        first_start=[s or 0.0 for s in first_start],
        bytes_sent=bytes_sent,
        timeline=timeline,
    )


@dataclass
class ReduceOptimizeTimes:
    overlapped: float
    sequential: float
    optimizer_only: float
    calls: int
    overhead: float
    timeline: List[Dict]


def reduce_and_optimize_times(run: ValidatedRun, parameters: int) -> ReduceOptimizeTimes:
    """Two-stream model: chunk i's reduction must finish before its k buckets are stepped"""
    cost, parallel = run.cost_model, run.parallel
    p = parallel.g_data
    bsize, k = parallel.bucket_size, parallel.coarsening_k
    bucket_sizes = [min(bsize, parameters - start) for start in range(0, parameters, bsize)]

    def reduce_time(elements: int) -> float:
        if p == 1:
            return 0.0
        call = cost.collective_overhead + 2 * (p - 1) * cost.link_latency
        return call + 2.0 * (p - 1) / p * 2 * elements / cost.allreduce_bandwidth

    def optimize_time(elements: int, buckets: int) -> float:
        per_param = 1.0 / cost.optimizer_rate
        if run.training.offload:
            per_param += OFFLOAD_BYTES_PER_PARAM / cost.host_bandwidth
        return elements * per_param + buckets * cost.bucket_overhead

    timeline = []
    reduced_at, optimized_at, calls = 0.0, 0.0, 0
    for index, start in enumerate(range(0, len(bucket_sizes), k)):
        chunk = bucket_sizes[start:start + k]
        reduce_start = reduced_at
        reduced_at += reduce_time(sum(chunk))
        opt_start = max(optimized_at, reduced_at)
        optimized_at = opt_start + optimize_time(sum(chunk), len(chunk))
        calls += 1 if p > 1 else 0
        timeline.append({"stream": "allreduce", "chunk": index, "start": reduce_start, "end": reduced_at})
        timeline.append({"stream": "optimizer", "chunk": index, "start": opt_start, "end": optimized_at})

    optimizer_only = optimize_time(parameters, len(bucket_sizes))
    sequential = reduce_time(parameters) + optimizer_only
    overhead = calls * cost.collective_overhead
    return ReduceOptimizeTimes(optimized_at, sequential, optimizer_only, calls, overhead, timeline)


def simulate_batch(run: ValidatedRun, include_timeline: bool = False) -> PerfReport:
    """Simulated time of one batch and its per-worker counters"""
    parallel, net, cost = run.parallel, run.network, run.cost_model
    g = parallel.g_inter
    microbatches = run.batch.microbatches_per_shard
    mb_size = parallel.microbatch_size

    stage_flops = [stage_forward_flops(net, run.stage_layers(row)) for row in range(g)]
    forward = [mb_size * f / cost.device_flops for f in stage_flops]
    backward = [cost.backward_multiplier * t for t in forward]
    message_bytes = mb_size * net.uniform_activation_bytes

    pipe = simulate_pipeline(
        forward, backward, microbatches, parallel.pipeline_limit,
        message_latency=cost.link_latency,
        message_transfer=message_bytes / cost.link_bandwidth,
        message_bytes=message_bytes,
    )

    stage_params = [sum(net.layer_parameter_count(i) for i in run.stage_layers(row)) for row in range(g)]
    phases = [reduce_and_optimize_times(run, phi) for phi in stage_params]
    chosen = [ph.overlapped if run.training.overlap else ph.sequential for ph in phases]
    combined = max(chosen)
    makespan = pipe.makespan + combined

    samples = microbatches * mb_size
    workers = []
    for row in range(g):
        busy = pipe.busy[row] + chosen[row]
        workers.append(WorkerTimes(
            row=row,
            busy=busy,
            idle=makespan - busy,
            warmup_idle=pipe.first_start[row],
            p2p_bytes_sent=pipe.bytes_sent[row],
            flops=float(samples * stage_flops[row]) * (1.0 + cost.backward_multiplier),
        ))

    p = parallel.g_data
    busiest = max(range(g), key=lambda r: stage_params[r])
    timeline = []
    if include_timeline:
        timeline = list(pipe.timeline)
        for event in phases[busiest].timeline:
            timeline.append({**event, "start": event["start"] + pipe.makespan, "end": event["end"] + pipe.makespan})

    report = PerfReport(
        makespan=makespan,
        inter_layer_time=pipe.makespan,
        allreduce_optimizer_time=combined,
        sequential_allreduce_optimizer_time=max(ph.sequential for ph in phases),
        optimizer_only_time=max(ph.optimizer_only for ph in phases),
        allreduce_calls=phases[busiest].calls,
        collective_overhead_time=phases[busiest].overhead,
        warmup_idle_max=max(w.warmup_idle for w in workers),
        workers=workers,
        p2p_bytes_per_worker=max(w.p2p_bytes_sent for w in workers),
        flops_per_worker=max(w.flops for w in workers),
        allreduce_bytes_per_worker=2.0 * (p - 1) / p * 2 * stage_params[busiest],
        timeline=timeline,
    )

    counters = comm_comp_counters(run)
    if report.p2p_bytes_per_worker != counters.p2p_bytes_per_worker or report.flops_per_worker != counters.flops_per_worker:
        logger.warning(f"Simulated counters ({report.p2p_bytes_per_worker} B, {report.flops_per_worker} flop) differ "
                       f"from closed forms ({counters.p2p_bytes_per_worker} B, {counters.flops_per_worker} flop); "
                       f"layer widths are not uniform")
    logger.debug(f"Simulated batch: makespan={makespan:.6g}s inter-layer={pipe.makespan:.6g}s combined={combined:.6g}s")
    return report
