"""
Tests for the simulated interconnect: links, delivery order, collectives and traces
"""

import json

import numpy as np
import pytest

from fabric import (
    Fabric,
    InvalidRoute,
    LengthMismatch,
    Message,
    MessageKind,
    Starvation,
    WorkerId,
)
from nn_core import round_half

FWD = MessageKind.ACTIVATION_FORWARD
BWD = MessageKind.GRADIENT_BACKWARD


def message(src, dst, mb, kind=FWD, payload=None):
    return Message(WorkerId(*src), WorkerId(*dst), mb, kind, np.zeros(4) if payload is None else payload)


class TestPointToPoint:

    def test_fifo_per_link(self):
        fabric = Fabric(2, 1)
        for mb in range(5):
            fabric.send(message((0, 0), (1, 0), mb))
        assert [fabric.receive(WorkerId(1, 0)).microbatch_id for _ in range(5)] == [0, 1, 2, 3, 4]

    def test_both_orders_occur_across_seeds(self):
        firsts = set()
        for seed in range(100):
            fabric = Fabric(3, 1, seed=seed)
            fabric.send(message((0, 0), (1, 0), 0, FWD))
            fabric.send(message((2, 0), (1, 0), 1, BWD))
            firsts.add(fabric.receive(WorkerId(1, 0)).kind)
        assert firsts == {FWD, BWD}

    def test_same_seed_same_order(self):
        def run(seed):
            fabric = Fabric(3, 1, seed=seed)
            order = []
            for mb in range(10):
                fabric.send(message((0, 0), (1, 0), mb, FWD))
                fabric.send(message((2, 0), (1, 0), 100 + mb, BWD))
            while fabric.has_pending(WorkerId(1, 0)):
                order.append(fabric.receive(WorkerId(1, 0)).microbatch_id)
            return order

        assert run(5) == run(5)
        assert sorted(run(5)) == sorted(run(6))

    @pytest.mark.parametrize("src,dst", [((0, 0), (2, 0)), ((0, 0), (1, 1)), ((1, 0), (1, 0)), ((0, 0), (3, 0))])
    def test_only_pipeline_neighbours(self, src, dst):
        with pytest.raises(InvalidRoute):
            Fabric(3, 2).send(message(src, dst, 0))

    def test_half_payload_bytes(self):
        fabric = Fabric(2, 1)
        fabric.send(message((0, 0), (1, 0), 0, payload=np.zeros(1_000_000)))
        assert fabric.stats[WorkerId(0, 0)].p2p_bytes_sent == 2_000_000

    def test_conservation_after_drain(self, rng):
        fabric = Fabric(4, 2, seed=3)
        for _ in range(50):
            row = int(rng.integers(0, 3))
            col = int(rng.integers(0, 2))
            fabric.send(message((row, col), (row + 1, col), 0, payload=np.zeros(int(rng.integers(1, 9)))))
        while fabric.ready_workers():
            fabric.receive(fabric.choose(fabric.ready_workers()))
        sent = sum(s.p2p_bytes_sent for s in fabric.stats.values())
        received = sum(s.p2p_bytes_received for s in fabric.stats.values())
        assert sent == received
        assert fabric.in_flight() == 0
        assert fabric.totals().messages == 50

    def test_receive_without_messages_starves(self):
        fabric = Fabric(2, 1)
        with pytest.raises(Starvation) as info:
            fabric.receive(WorkerId(1, 0))
        assert info.value.state == {}

    def test_budget_exhaustion_reports_in_flight(self):
        fabric = Fabric(2, 1, message_budget=1)
        fabric.send(message((0, 0), (1, 0), 0))
        fabric.send(message((0, 0), (1, 0), 1))
        fabric.receive(WorkerId(1, 0))
        with pytest.raises(Starvation) as info:
            fabric.receive(WorkerId(1, 0))
        assert info.value.state == {"g0,0->g1,0": 1}

    def test_worker_id_text(self):
        assert str(WorkerId(2, 1)) == "g2,1"
        assert WorkerId(0, 3) < WorkerId(1, 0)


class TestCollectives:

    def group(self, p, row=0):
        return [WorkerId(row, c) for c in range(p)]

    def test_sum_is_left_on_every_member(self):
        fabric = Fabric(1, 2)
        out = fabric.all_reduce(self.group(2), [np.array([1.0, 2.0]), np.array([3.0, 4.0])])
        for result in out:
            np.testing.assert_array_equal(result, [4.0, 6.0])

    def test_single_member_is_identity(self):
        fabric = Fabric(1, 1)
        out = fabric.all_reduce(self.group(1), [np.array([5.0])])
        np.testing.assert_array_equal(out[0], [5.0])
        assert fabric.stats[WorkerId(0, 0)].allreduce_bytes == 0.0

    def test_results_are_independent_copies(self):
        fabric = Fabric(1, 2)
        out = fabric.all_reduce(self.group(2), [np.ones(2), np.ones(2)])
        out[0][0] = 99.0
        assert out[1][0] == 2.0

    def test_ring_byte_accounting(self):
        fabric = Fabric(1, 4)
        elements = 4 * 1024 * 1024  # 8 MiB of half-precision values
        fabric.all_reduce(self.group(4), [np.zeros(elements)] * 4)
        for worker in self.group(4):
            assert fabric.stats[worker].allreduce_bytes == 12 * 1024 * 1024
        assert fabric.allreduce_calls == 1

    def test_rank_order_is_independent_of_argument_order(self, rng):
        vectors = [rng.standard_normal(64) * 1000 for _ in range(3)]
        group = self.group(3)
        a = Fabric(1, 3).all_reduce(group, vectors, half=True)[0]
        b = Fabric(1, 3).all_reduce(list(reversed(group)), list(reversed(vectors)), half=True)[0]
        np.testing.assert_array_equal(a, b)
        expected = round_half(round_half(vectors[0] + vectors[1]) + vectors[2])
        np.testing.assert_array_equal(a, expected)

    def test_length_mismatch(self):
        fabric = Fabric(1, 2)
        with pytest.raises(LengthMismatch):
            fabric.all_reduce(self.group(2), [np.zeros(3), np.zeros(4)])
        with pytest.raises(LengthMismatch):
            list(fabric.all_reduce_chunked(self.group(2), [np.zeros(3), np.zeros(4)], 2))

    def test_chunked_equals_whole(self, rng):
        vectors = [rng.standard_normal(10) for _ in range(4)]
        whole = Fabric(1, 4).all_reduce(self.group(4), vectors, half=True)[0]
        fabric = Fabric(1, 4)
        pieces = list(fabric.all_reduce_chunked(self.group(4), vectors, 4, half=True))
        assert [index for index, _, _ in pieces] == [0, 1, 2]
        assert [part for _, part, _ in pieces] == [slice(0, 4), slice(4, 8), slice(8, 10)]
        np.testing.assert_array_equal(np.concatenate([results[0] for _, _, results in pieces]), whole)
        assert fabric.allreduce_calls == 3
        assert fabric.stats[WorkerId(0, 0)].allreduce_bytes == pytest.approx(2.0 * 3 / 4 * 10 * 2)

    def test_chunked_rejects_empty_chunks(self):
        with pytest.raises(ValueError):
            list(Fabric(1, 2).all_reduce_chunked(self.group(2), [np.zeros(2)] * 2, 0))


class TestTrace:

    def test_export_is_sorted_json_lines(self, tmp_path):
        fabric = Fabric(2, 1, record_trace=True)
        fabric.mark("batch_start", batch=0)
        fabric.send(message((0, 0), (1, 0), 0))
        fabric.receive(WorkerId(1, 0))
        path = tmp_path / "nested" / "trace.jsonl"
        fabric.export_trace(str(path))
        lines = path.read_text().splitlines()
        records = [json.loads(line) for line in lines]
        assert [r["event"] for r in records] == ["batch_start", "send", "deliver"]
        assert [r["seq"] for r in records] == [1, 2, 3]
        assert lines[1] == json.dumps(records[1], sort_keys=True)
        assert records[1]["kind"] == "ActivationForward"

    def test_trace_off_by_default(self):
        fabric = Fabric(2, 1)
        fabric.send(message((0, 0), (1, 0), 0))
        assert fabric.trace == []
