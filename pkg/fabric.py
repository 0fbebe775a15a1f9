"""
Fabric module for hybridtrain

A simulated interconnect between the workers of a g_inter x g_data grid.
Point-to-point messages are FIFO per directed link; which link a worker hears
from next is drawn from a seeded generator, so every run exercises one
reproducible interleaving. Collectives accumulate in ascending rank order and
never depend on that interleaving.
"""

import json
import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Deque, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from nn_core import round_half

logger = logging.getLogger(__name__)


class FabricError(Exception):
    """Base class for interconnect errors"""


class InvalidRoute(FabricError):
    """Point-to-point messages may only travel between pipeline neighbours"""


class LengthMismatch(FabricError):
    """Members of a collective contributed vectors of different lengths"""


class Starvation(FabricError):
    """A worker waits for a message that can never arrive"""

    def __init__(self, message: str, state: Optional[Dict[str, Any]] = None):
        self.state = state or {}
        super().__init__(f"{message}; in-flight state: {json.dumps(self.state, sort_keys=True)}")


@dataclass(frozen=True, order=True)
class WorkerId:
    row: int  # pipeline stage
    col: int  # data-parallel replica

    def __str__(self) -> str:
        return f"g{self.row},{self.col}"


class MessageKind(str, Enum):
    ACTIVATION_FORWARD = "ActivationForward"
    GRADIENT_BACKWARD = "GradientBackward"


@dataclass
class Message:
    source: WorkerId
    dest: WorkerId
    microbatch_id: int
    kind: MessageKind
    payload: np.ndarray
    element_bytes: int = 2

    @property
    def byte_size(self) -> int:
        return int(np.asarray(self.payload).size) * self.element_bytes


@dataclass
class CommStats:
    p2p_bytes_sent: int = 0
    p2p_bytes_received: int = 0
    allreduce_bytes: float = 0.0
    message_count: int = 0


@dataclass
class FabricTotals:
    """Snapshot used to compute per-batch deltas"""
    p2p_bytes: int = 0
    allreduce_bytes: float = 0.0
    messages: int = 0
    allreduce_calls: int = 0


class Fabric:
    """Single logically-serialized event queue shared by every worker"""

    def __init__(self, g_inter: int, g_data: int, seed: int = 0, element_bytes: int = 2,
                 message_budget: Optional[int] = None, record_trace: bool = False):
        self.g_inter = g_inter
        self.g_data = g_data
        self.element_bytes = element_bytes
        self.message_budget = message_budget
        self.record_trace = record_trace
        self.rng = np.random.default_rng(seed)

        self._links: Dict[Tuple[WorkerId, WorkerId], Deque[Message]] = {}
        self.stats: Dict[WorkerId, CommStats] = {
            WorkerId(r, c): CommStats() for r in range(g_inter) for c in range(g_data)
        }
        self.trace: List[Dict[str, Any]] = []
        self.delivered = 0
        self.allreduce_calls = 0
        self._seq = 0

    # -- bookkeeping --------------------------------------------------------

    def _record(self, event: str, **fields):
        self._seq += 1
        if self.record_trace:
            self.trace.append({"seq": self._seq, "event": event, **fields})

    def mark(self, event: str, **fields):
        """Engine phase marker (batch_start, drain_complete, optimizer_start, ...)"""
        self._record(event, **fields)

    def totals(self) -> FabricTotals:
        return FabricTotals(
            p2p_bytes=sum(s.p2p_bytes_sent for s in self.stats.values()),
            allreduce_bytes=sum(s.allreduce_bytes for s in self.stats.values()),
            messages=sum(s.message_count for s in self.stats.values()),
            allreduce_calls=self.allreduce_calls,
        )

    def in_flight(self) -> int:
        return sum(len(q) for q in self._links.values())

    def in_flight_state(self) -> Dict[str, int]:
        return {f"{src}->{dst}": len(q) for (src, dst), q in sorted(self._links.items()) if q}

    def export_trace(self, path: str, header: Optional[Dict[str, Any]] = None):
        """Write the recorded trace as JSON lines, after an optional header record"""
        out = Path(path)
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            with out.open("w") as fh:
                if header is not None:
                    fh.write(json.dumps(header, sort_keys=True) + "\n")
                for record in self.trace:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
        except OSError as e:
            logger.error(f"Failed to write fabric trace to {out}: {e}")
            raise
        logger.info(f"Wrote {len(self.trace)} trace records to {out}")

    # -- point to point ----------------------------------------------------

    def _check_route(self, source: WorkerId, dest: WorkerId):
        for worker in (source, dest):
            if not (0 <= worker.row < self.g_inter and 0 <= worker.col < self.g_data):
                raise InvalidRoute(f"{worker} is outside the {self.g_inter}x{self.g_data} grid")
        if source.col != dest.col or abs(source.row - dest.row) != 1:
            raise InvalidRoute(f"{source} -> {dest} is not a pipeline-neighbour link")

    def send(self, msg: Message):
        self._check_route(msg.source, msg.dest)
        self._links.setdefault((msg.source, msg.dest), deque()).append(msg)
        stats = self.stats[msg.source]
        stats.p2p_bytes_sent += msg.byte_size
        stats.message_count += 1
        self._record("send", src=str(msg.source), dst=str(msg.dest), mb=msg.microbatch_id,
                     kind=msg.kind.value, bytes=msg.byte_size)

    def pending_links(self, worker: WorkerId) -> List[Tuple[WorkerId, WorkerId]]:
        return sorted(key for key, q in self._links.items() if key[1] == worker and q)

    def has_pending(self, worker: WorkerId) -> bool:
        return bool(self.pending_links(worker))

    def ready_workers(self) -> List[WorkerId]:
        return sorted({key[1] for key, q in self._links.items() if q})

    def choose(self, options: Sequence[Any]) -> Any:
        """Seeded pick among options; no draw is made when there is only one"""
        if len(options) == 1:
            return options[0]
        return options[int(self.rng.integers(len(options)))]

    def receive(self, worker: WorkerId) -> Message:
        if self.message_budget is not None and self.delivered >= self.message_budget:
            raise Starvation(f"message budget of {self.message_budget} exhausted at {worker}", self.in_flight_state())
        links = self.pending_links(worker)
        if not links:
            raise Starvation(f"{worker} has nothing to receive", self.in_flight_state())
        msg = self._links[self.choose(links)].popleft()
        self.stats[worker].p2p_bytes_received += msg.byte_size
        self.delivered += 1
        self._record("deliver", src=str(msg.source), dst=str(worker), mb=msg.microbatch_id,
                     kind=msg.kind.value, bytes=msg.byte_size)
        return msg

    # -- collectives ---------------------------------------------------------

    def _reduce(self, group: Sequence[WorkerId], vectors: Sequence[np.ndarray], half: bool) -> np.ndarray:
        if len(group) != len(vectors) or not group:
            raise LengthMismatch(f"{len(group)} members but {len(vectors)} vectors")
        sizes = {np.asarray(v).size for v in vectors}
        if len(sizes) != 1:
            raise LengthMismatch(f"all-reduce over vectors of lengths {sorted(sizes)}")
        ranked = sorted(zip(group, vectors), key=lambda item: item[0])
        acc = np.array(ranked[0][1], dtype=np.float64)
        for _, vector in ranked[1:]:
            acc = acc + vector
            if half:
                acc = round_half(acc)
        return acc

    def _account_collective(self, group: Sequence[WorkerId], elements: int, chunk: Optional[int] = None):
        p = len(group)
        per_member = 2.0 * (p - 1) / p * elements * self.element_bytes
        for worker in group:
            self.stats[worker].allreduce_bytes += per_member
        self.allreduce_calls += 1
        self._record("collective", group=[str(w) for w in sorted(group)], elements=elements,
                     bytes_per_member=per_member, chunk=chunk)

    def all_reduce(self, group: Sequence[WorkerId], vectors: Sequence[np.ndarray], half: bool = False) -> List[np.ndarray]:
        """Elementwise sum left on every member, accumulated in ascending rank order"""
        reduced = self._reduce(group, vectors, half)
        self._account_collective(group, reduced.size)
        return [reduced.copy() for _ in group]

    def all_reduce_chunked(self, group: Sequence[WorkerId], vectors: Sequence[np.ndarray], chunk_elems: int,
                           half: bool = False) -> Iterator[Tuple[int, slice, List[np.ndarray]]]:
        """Reduce chunk by chunk, yielding (chunk index, slice, per-member result) as each completes"""
        if chunk_elems < 1:
            raise ValueError("chunk_elems must be at least 1")
        sizes = {np.asarray(v).size for v in vectors}
        if len(sizes) > 1:
            raise LengthMismatch(f"all-reduce over vectors of lengths {sorted(sizes)}")
        length = sizes.pop() if sizes else 0
        for index, start in enumerate(range(0, length, chunk_elems)):
            part = slice(start, min(start + chunk_elems, length))
            reduced = self._reduce(group, [np.asarray(v)[part] for v in vectors], half)
            self._account_collective(group, reduced.size, chunk=index)
            yield index, part, [reduced.copy() for _ in group]
