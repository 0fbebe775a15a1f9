"""
Tests for the hybrid engine: equivalence with serial training, schedule
invariants under arbitrary delivery orders, overlap, offload and overflow
"""

import itertools

import numpy as np
import pytest

from analytics import activation_units, comm_comp_counters
from datasets import batch_stream, regression_task
from engine import HybridEngine
from fabric import Starvation
from nn_core import ShapeMismatch, round_half
from serial_reference import SerialTrainer, max_relative_difference


def relative_error(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def pool_for(run, batches=4, seed=11):
    return regression_task(run.network, batches * run.batch.batch_size, seed)


def sent_events(engine):
    return [r for r in engine.fabric.trace if r["event"] == "send"]


class TestSerialEquivalence:

    @pytest.mark.parametrize("g_inter,g_data,mb", list(itertools.product([1, 2, 4], repeat=3)))
    def test_gradients_match_full_batch(self, make_run, g_inter, g_data, mb):
        run = make_run(g_inter=g_inter, g_data=g_data, microbatch_size=mb)
        batch = pool_for(run, batches=1)

        engine = HybridEngine(run)
        engine.inter_layer_parallel_step(batch)
        for row in range(g_inter):
            engine.data_parallel_step(row)
        oracle = SerialTrainer(run, full_batch=True)
        _, _, expected = oracle.gradients(batch)
        for col in range(g_data):
            assert relative_error(engine.gradients(col), expected) <= 1e-10

    @pytest.mark.parametrize("g_inter,g_data,mb", [(2, 2, 1), (4, 1, 2), (1, 4, 4), (2, 4, 2)])
    def test_parameters_after_one_step(self, make_run, g_inter, g_data, mb):
        run = make_run(g_inter=g_inter, g_data=g_data, microbatch_size=mb, width=8)
        batch = pool_for(run, batches=1)
        engine = HybridEngine(run)
        engine.train_batch(batch)
        oracle = SerialTrainer(run, full_batch=True)
        oracle.step(batch)
        for col in range(g_data):
            assert relative_error(engine.parameters(col), oracle.network.parameters()) <= 1e-10

    def test_loss_curve_over_200_steps(self, make_run):
        run = make_run(g_inter=2, g_data=2, microbatch_size=2, parallel={"bucket_size": 300, "coarsening_k": 2})
        pool = pool_for(run)
        records = HybridEngine(run).train(batch_stream(pool, 16), 200)
        reference = SerialTrainer(run, full_batch=True).train(batch_stream(pool, 16), 200)
        assert len(records) == 200
        assert max_relative_difference([r.loss for r in records], reference) <= 1e-8
        assert records[-1].loss < records[0].loss

    def test_mixed_precision_is_bit_identical(self, make_run):
        run = make_run(g_inter=2, g_data=2, microbatch_size=2,
                       optimizer={"loss_scale": 1024.0}, training={"mixed_precision": True})
        pool = pool_for(run)
        engine = HybridEngine(run)
        serial = SerialTrainer(run)
        records = engine.train(batch_stream(pool, 16), 20)
        losses = serial.train(batch_stream(pool, 16), 20)
        assert [r.loss for r in records] == losses
        assert not any(r.skipped for r in records)
        np.testing.assert_array_equal(engine.parameters(0), serial.network.parameters())
        np.testing.assert_array_equal(engine.parameters(1), serial.network.parameters())

    def test_single_worker_is_bit_identical(self, make_run):
        run = make_run(microbatch_size=4)
        pool = pool_for(run)
        engine = HybridEngine(run)
        serial = SerialTrainer(run)
        records = engine.train(batch_stream(pool, 16), 10)
        assert [r.loss for r in records] == serial.train(batch_stream(pool, 16), 10)
        assert all(r.p2p_bytes == 0 for r in records)
        np.testing.assert_array_equal(engine.parameters(), serial.network.parameters())


class TestSchedule:

    def test_any_delivery_order_gives_the_same_result(self, make_run):
        run = make_run(g_inter=4, num_layers=4, width=2)
        batch = pool_for(run, batches=1)
        reference = None
        for seed in range(1000):
            engine = HybridEngine(run, fabric_seed=seed)
            engine.inter_layer_parallel_step(batch)
            assert engine.max_in_flight <= run.parallel.pipeline_limit
            for state in engine.workers.values():
                assert sorted(state.forwards) == list(range(16))
                assert sorted(state.backwards) == list(range(16))
            grads = engine.gradients()
            if reference is None:
                reference = grads
            np.testing.assert_array_equal(grads, reference)

    def test_warmup_injects_up_to_the_limit(self, make_run):
        run = make_run(g_inter=2, num_layers=4, width=4, batch_size=8)
        engine = HybridEngine(run, record_trace=True)
        engine.train_batch(pool_for(run, batches=1))
        first = sent_events(engine)[:2]
        assert [(r["src"], r["mb"], r["kind"]) for r in first] == [
            ("g0,0", 0, "ActivationForward"), ("g0,0", 1, "ActivationForward")]
        assert engine.max_in_flight == 2

    def test_single_microbatch_travels_down_and_back(self, make_run):
        run = make_run(g_inter=3, num_layers=3, width=4, batch_size=1)
        engine = HybridEngine(run, record_trace=True)
        engine.train_batch(pool_for(run, batches=1))
        hops = [(r["src"], r["dst"], r["kind"]) for r in sent_events(engine)]
        assert hops == [
            ("g0,0", "g1,0", "ActivationForward"),
            ("g1,0", "g2,0", "ActivationForward"),
            ("g2,0", "g1,0", "GradientBackward"),
            ("g1,0", "g0,0", "GradientBackward"),
        ]

    def test_flush_precedes_reduction_and_update(self, make_run):
        run = make_run(g_inter=2, g_data=2, num_layers=4, width=4)
        engine = HybridEngine(run, record_trace=True)
        engine.train_batch(pool_for(run, batches=1))
        events = [r["event"] for r in engine.fabric.trace]
        drained = events.index("drain_complete")
        assert events[0] == "batch_start"
        assert all(e not in ("send", "deliver") for e in events[drained:])
        assert all(i > drained for i, e in enumerate(events) if e == "collective")
        assert events.index("optimizer_start") > drained
        assert events[-1] == "optimizer_end"

    def test_stash_stays_within_activation_units(self, make_run):
        run = make_run(g_inter=4, num_layers=16, width=4)
        ac = run.parallel.checkpoint_interval
        batch = pool_for(run, batches=1)
        for seed in range(20):
            engine = HybridEngine(run, fabric_seed=seed)
            engine.inter_layer_parallel_step(batch)
            for state in engine.workers.values():
                shard = state.shard
                assert shard.activation_stash == {}
                assert shard.peak_stash_entries + shard.peak_recompute_entries + 1 <= activation_units(16, 4, ac)

    def test_p2p_bytes_match_closed_form(self, make_run):
        run = make_run(g_inter=3, g_data=2, num_layers=6, width=8, batch_size=8,
                       training={"mixed_precision": True})
        engine = HybridEngine(run)
        result = engine.train_batch(pool_for(run, batches=1))
        busiest = max(s.p2p_bytes_sent for s in engine.fabric.stats.values())
        assert busiest == comm_comp_counters(run).p2p_bytes_per_worker == 128
        assert result.comm_bytes == 2 * (2 * 4 * 16) * 2

    def test_message_budget_starves(self, make_run):
        run = make_run(g_inter=2, num_layers=2, width=4, batch_size=4)
        engine = HybridEngine(run, message_budget=1)
        with pytest.raises(Starvation):
            engine.train_batch(pool_for(run, batches=1))

    def test_wrong_batch_size(self, make_run):
        run = make_run(g_inter=2, num_layers=2, width=4)
        with pytest.raises(ShapeMismatch):
            HybridEngine(run).train_batch(regression_task(run.network, 8, 0))


class TestOptimizerPaths:

    def train_params(self, run, steps=3):
        engine = HybridEngine(run)
        engine.train(batch_stream(pool_for(run), 16), steps)
        return engine

    @pytest.mark.parametrize("k", [1, 2, 4, 8, 16])
    def test_overlap_matches_sequential(self, make_run, k):
        common = dict(g_inter=2, g_data=2, microbatch_size=2, num_layers=4, width=8)
        sequential = self.train_params(make_run(
            parallel={"bucket_size": 50, "coarsening_k": k}, training={"mixed_precision": True}, **common))
        overlapped = self.train_params(make_run(
            parallel={"bucket_size": 50, "coarsening_k": k},
            training={"mixed_precision": True, "overlap": True}, **common))
        for col in range(2):
            np.testing.assert_array_equal(overlapped.parameters(col), sequential.parameters(col))

    def test_overlap_call_count(self, make_run):
        run = make_run(g_inter=1, g_data=2, num_layers=4, width=8,
                       parallel={"bucket_size": 50, "coarsening_k": 2}, training={"overlap": True})
        engine = HybridEngine(run)
        engine.train_batch(pool_for(run, batches=1))
        # 288 parameters in buckets of 50 gives 6 buckets, reduced 2 at a time
        assert engine.fabric.allreduce_calls == 3

    def test_offload_does_not_change_training(self, make_run):
        common = dict(g_inter=2, g_data=2, num_layers=4, width=8, parallel={"bucket_size": 7})
        on = self.train_params(make_run(training={"offload": True}, **common))
        off = self.train_params(make_run(training={"offload": False}, **common))
        np.testing.assert_array_equal(on.parameters(), off.parameters())
        assert on.worker(0, 0).store.peak_device_bytes == 16 * 7
        assert off.worker(0, 0).store.peak_device_bytes == 0

    def test_overlap_without_offload_never_touches_the_device_buckets(self, make_run):
        common = dict(g_inter=2, g_data=2, num_layers=4, width=8, parallel={"bucket_size": 7, "coarsening_k": 3})
        on = self.train_params(make_run(training={"offload": True, "overlap": True}, **common))
        off = self.train_params(make_run(training={"offload": False, "overlap": True}, **common))
        np.testing.assert_array_equal(on.parameters(), off.parameters())
        assert on.worker(0, 0).store.peak_device_bytes == 16 * 7
        for state in off.workers.values():
            assert state.store.residency_trace == []
            assert state.store.step_count == 3


class TestOverflow:

    def overflowing_run(self, make_run, dynamic):
        return make_run(g_inter=2, g_data=2, num_layers=4, width=8,
                        optimizer={"loss_scale": 1e9, "dynamic_loss_scale": dynamic},
                        training={"mixed_precision": True})

    def test_static_scale_skips_every_step(self, make_run):
        run = self.overflowing_run(make_run, dynamic=False)
        engine = HybridEngine(run)
        before = engine.parameters().copy()
        records = engine.train(batch_stream(pool_for(run), 16), 3)
        assert all(r.skipped for r in records)
        assert all(r.allreduce_bytes == 0 for r in records)
        np.testing.assert_array_equal(engine.parameters(), before)
        assert engine.worker(0, 0).store.step_count == 0

    def test_dynamic_scale_halves(self, make_run):
        run = self.overflowing_run(make_run, dynamic=True)
        engine = HybridEngine(run)
        records = engine.train(batch_stream(pool_for(run), 16), 2)
        assert records[0].skipped
        assert records[0].loss_scale == 1e9
        assert records[1].loss_scale == 5e8

    def test_scale_never_drops_below_one(self, make_run):
        run = make_run(optimizer={"loss_scale": 1.5, "dynamic_loss_scale": True})
        engine = HybridEngine(run)
        engine._skip_step("test")
        assert engine.loss_scale == 1.0
        engine._skip_step("test")
        assert engine.loss_scale == 1.0

    def test_serial_reference_agrees_on_skips(self, make_run):
        run = self.overflowing_run(make_run, dynamic=True)
        pool = pool_for(run)
        engine_skips = [r.skipped for r in HybridEngine(run).train(batch_stream(pool, 16), 4)]
        serial = SerialTrainer(run)
        serial_skips = [serial.step(batch)[1] for batch in itertools.islice(batch_stream(pool, 16), 4)]
        assert engine_skips == serial_skips

    @staticmethod
    def with_local_gradients(engine, monkeypatch, values):
        """Replace the pipeline phase with fixed per-worker gradients"""
        def local_gradients(batch):
            for state in engine.workers.values():
                state.shard.grad_accumulator = np.array(values, dtype=np.float64)
        monkeypatch.setattr(engine, "inter_layer_parallel_step", local_gradients)

    def saturating_run(self, make_run, overlap):
        return make_run(g_data=2, num_layers=1, width=1, batch_size=2,
                        parallel={"bucket_size": 1, "coarsening_k": 1},
                        optimizer={"loss_scale": 8.0, "dynamic_loss_scale": True},
                        training={"mixed_precision": True, "overlap": overlap})

    @pytest.mark.parametrize("overlap", [False, True])
    def test_saturated_reduction_is_skipped(self, make_run, monkeypatch, overlap):
        run = self.saturating_run(make_run, overlap)
        engine = HybridEngine(run)
        before = engine.parameters().copy()
        # each replica is in range, the two-way sum is not
        self.with_local_gradients(engine, monkeypatch, [40000.0, 40000.0])
        result = engine.train_batch(pool_for(run, batches=1))
        assert result.skipped
        assert result.grads_reduced
        assert engine.loss_scale == run.optimizer.loss_scale / 2
        np.testing.assert_array_equal(engine.parameters(), before)
        assert engine.worker(0, 0).store.step_count == 0

    def test_late_chunk_overflow_leaves_earlier_chunks_unapplied(self, make_run, monkeypatch):
        run = self.saturating_run(make_run, overlap=True)
        engine = HybridEngine(run)
        before = engine.parameters().copy()
        self.with_local_gradients(engine, monkeypatch, [1.0, 40000.0])
        assert engine.train_batch(pool_for(run, batches=1)).skipped
        assert engine.fabric.allreduce_calls == 2
        for col in range(2):
            store = engine.worker(0, col).store
            assert store.staged_buckets == []
            assert set(store.residency) == {"host"}
            np.testing.assert_array_equal(engine.parameters(col), before)

    def test_serial_reference_skips_a_saturated_reduction(self, make_run, monkeypatch):
        run = self.saturating_run(make_run, overlap=False)
        serial = SerialTrainer(run)
        before = serial.network.parameters().copy()
        local = np.full(2, 40000.0)
        monkeypatch.setattr(serial, "gradients", lambda batch: (0.0, [local, local], round_half(local + local)))
        _, skipped = serial.step(pool_for(run, batches=1))
        assert skipped
        np.testing.assert_array_equal(serial.network.parameters(), before)
