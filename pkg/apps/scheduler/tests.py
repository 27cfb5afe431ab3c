from dataclasses import replace

from django.test import SimpleTestCase

from apps.cost_model.domain import LLMSpec
from apps.kv_manager.services import BlockPool
from apps.workload.domain import Request

from .domain import DECODE, DECODING, DONE, PREFILL, REJECTED, Job, SchedulerConfig
from .services import (
    AdbsScheduler,
    FcfsScheduler,
    RoundRobinScheduler,
    fairness_gap,
    is_fair,
    make_scheduler,
    resource_usage,
)

CONFIG = SchedulerConfig(kind='adbs', prefill_token_budget=4096, min_prefill_sm=0.3,
                         decode_sm=0.5, max_batch=256)


def tiny(name):
    # two blocks per 16 tokens
    return LLMSpec(name, num_layers=1, num_heads=1, head_dim=128, hidden_size=128, weight_bytes=1)


def scheduler_for(kind, names=('a', 'b'), total_blocks=40, quotas=None):
    specs = {name: tiny(name) for name in names}
    pool = BlockPool(total_blocks, specs, block_tokens=16, quotas=quotas)
    return make_scheduler(kind, specs, pool, replace(CONFIG, kind=kind), record_decisions=True)


def finish(scheduler, job, now_ms):
    scheduler.pool.advance(now_ms / 1000.0)
    return scheduler.complete(job, now_ms)


class JobTests(SimpleTestCase):
    def test_rejects_empty_and_oversized(self):
        with self.assertRaises(ValueError):
            Job('a', PREFILL, (), 0.5)
        with self.assertRaises(ValueError):
            Job('a', PREFILL, (1,), 1.5)

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            SchedulerConfig(kind='lottery')
        with self.assertRaises(ValueError):
            SchedulerConfig(decode_sm=0.0)


class FactoryTests(SimpleTestCase):
    def test_aliases(self):
        self.assertIsInstance(scheduler_for('adbs'), AdbsScheduler)
        self.assertIsInstance(scheduler_for('fcfs'), FcfsScheduler)
        specs = {'a': tiny('a')}
        pool = BlockPool(10, specs, block_tokens=16)
        self.assertIsInstance(make_scheduler('rr', specs, pool, CONFIG), RoundRobinScheduler)
        self.assertIsInstance(make_scheduler('round-robin', specs, pool, CONFIG), RoundRobinScheduler)
        with self.assertRaises(ValueError):
            make_scheduler('lottery', specs, pool, CONFIG)


class LifecycleTests(SimpleTestCase):
    def test_single_request_is_one_prefill_then_decodes(self):
        scheduler = scheduler_for('adbs', names=('a',))
        scheduler.submit(Request(0, 'a', 0.0, 16, 3), 0.0)
        jobs = scheduler.schedule(0.0, 1.0)
        self.assertEqual(len(jobs), 1)
        self.assertEqual(jobs[0].kind, PREFILL)
        self.assertEqual(jobs[0].sm, 1.0)
        self.assertEqual(scheduler.pool.used['a'], 2)

        finish(scheduler, jobs[0], 10.0)
        state = scheduler.state.requests[0]
        self.assertEqual(state.phase, DECODING)
        self.assertEqual(state.first_token_ms, 10.0)

        decode = scheduler.schedule(10.0, 1.0)
        self.assertEqual([(job.kind, job.sm, job.tokens) for job in decode], [(DECODE, 0.5, 17)])
        finish(scheduler, decode[0], 20.0)
        last = scheduler.schedule(20.0, 1.0)
        done = finish(scheduler, last[0], 30.0)
        self.assertEqual([s.id for s in done], [0])
        self.assertEqual(state.phase, DONE)
        self.assertEqual(scheduler.pool.free_blocks, 40)
        self.assertFalse(scheduler.has_work())

    def test_single_token_output_finishes_at_prefill(self):
        scheduler = scheduler_for('adbs', names=('a',))
        scheduler.submit(Request(0, 'a', 0.0, 8, 1), 0.0)
        job = scheduler.schedule(0.0, 1.0)[0]
        self.assertEqual(len(finish(scheduler, job, 5.0)), 1)
        self.assertEqual(scheduler.pool.used['a'], 0)

    def test_oversized_request_is_rejected(self):
        scheduler = scheduler_for('adbs', names=('a',), total_blocks=4)
        state = scheduler.submit(Request(0, 'a', 0.0, 32, 32), 0.0)
        self.assertEqual(state.phase, REJECTED)
        self.assertEqual(scheduler.schedule(0.0, 1.0), [])
        self.assertFalse(scheduler.has_work())

    def test_unknown_llm(self):
        scheduler = scheduler_for('adbs', names=('a',))
        with self.assertRaises(KeyError):
            scheduler.submit(Request(0, 'z', 0.0, 8, 8), 0.0)

    def test_prefill_batches_by_token_budget(self):
        scheduler = scheduler_for('adbs', names=('a',), total_blocks=400)
        scheduler.config = replace(CONFIG, prefill_token_budget=40)
        for rid in range(4):
            scheduler.submit(Request(rid, 'a', 0.0, 16, 4), 0.0)
        job = scheduler.schedule(0.0, 1.0)[0]
        self.assertEqual(job.request_ids, (0, 1))
        self.assertEqual(job.tokens, 32)

    def test_in_flight_capped_at_max_batch(self):
        scheduler = scheduler_for('adbs', names=('a', 'b'), total_blocks=400)
        scheduler.config = replace(CONFIG, max_batch=2)
        for rid in range(3):
            scheduler.submit(Request(rid, 'a', 0.0, 16, 4), 0.0)
        prefill = scheduler.schedule(0.0, 1.0)[0]
        self.assertEqual(prefill.request_ids, (0, 1))
        finish(scheduler, prefill, 5.0)
        # a full LLM is skipped for prefill, so its decode is not held back
        decode, = scheduler.schedule(5.0, 1.0)
        self.assertEqual((decode.kind, decode.request_ids), (DECODE, (0, 1)))
        self.assertFalse(scheduler.state.prefill_waiting)

    def test_admission_reserves_whole_lifetime(self):
        # each request needs 4 blocks over its lifetime but only 2 at prefill
        scheduler = scheduler_for('adbs', names=('a',), total_blocks=6)
        for rid in range(3):
            scheduler.submit(Request(rid, 'a', 0.0, 16, 16), 0.0)
        job = scheduler.schedule(0.0, 1.0)[0]
        self.assertEqual(job.request_ids, (0,))
        self.assertEqual(scheduler.outstanding_blocks(), 2)


class AdbsTests(SimpleTestCase):
    def setUp(self):
        self.scheduler = scheduler_for('adbs', quotas={'a': 4, 'b': 36})
        self.scheduler.submit(Request(0, 'a', 0.0, 16, 16), 0.0)
        self.scheduler.submit(Request(10, 'b', 0.0, 16, 16), 0.0)

    def test_prefill_colocates_with_decode(self):
        prefill_a, = self.scheduler.schedule(0.0, 1.0)
        self.assertEqual((prefill_a.llm, prefill_a.sm), ('a', 1.0))
        finish(self.scheduler, prefill_a, 1.0)

        jobs = self.scheduler.schedule(1.0, 1.0)
        self.assertEqual([(j.llm, j.kind, j.sm) for j in jobs],
                         [('b', PREFILL, 0.5), ('a', DECODE, 0.5)])
        self.assertLessEqual(sum(job.sm for job in self.scheduler.state.running_jobs()), 1.0)

    def test_quota_blocks_prefill_and_holds_decodes(self):
        scheduler = self.scheduler
        prefill_a, = scheduler.schedule(0.0, 1.0)
        finish(scheduler, prefill_a, 1.0)
        prefill_b, decode_a = scheduler.schedule(1.0, 1.0)
        finish(scheduler, prefill_b, 2.0)
        finish(scheduler, decode_a, 2.0)
        scheduler.submit(Request(1, 'a', 2.0, 16, 16), 2.0)

        # nothing runs, so decodes launch although a's prefill is over quota
        jobs = scheduler.schedule(2.0, 1.0)
        self.assertTrue(scheduler.state.prefill_waiting)
        self.assertEqual(sorted((j.llm, j.kind) for j in jobs), [('a', DECODE), ('b', DECODE)])
        self.assertEqual(scheduler.decisions[-3]['reason'], 'quota')

        decode_a = next(job for job in jobs if job.llm == 'a')
        finish(scheduler, decode_a, 3.0)
        self.assertEqual(scheduler.schedule(3.0, 0.5), [])
        self.assertTrue(scheduler.state.prefill_waiting)
        self.assertEqual(scheduler.state.queues['a'].decoding, [0])

        scheduler.pool.set_quotas({'a': 8, 'b': 32})
        jobs = scheduler.schedule(3.0, 0.5)
        self.assertEqual([(j.llm, j.kind, j.request_ids) for j in jobs], [('a', PREFILL, (1,))])
        self.assertFalse(scheduler.state.prefill_waiting)

    def test_head_request_ignores_quota_when_idle(self):
        scheduler = scheduler_for('adbs', quotas={'a': 0, 'b': 40})
        scheduler.submit(Request(0, 'a', 0.0, 16, 16), 0.0)
        job, = scheduler.schedule(0.0, 1.0)
        self.assertEqual(job.request_ids, (0,))


class FcfsTests(SimpleTestCase):
    def test_holder_windows_follow_arrival_order(self):
        scheduler = scheduler_for('fcfs')
        scheduler.submit(Request(0, 'a', 0.0, 16, 2), 0.0)
        scheduler.submit(Request(1, 'b', 0.1, 16, 2), 100.0)
        scheduler.submit(Request(2, 'a', 0.2, 16, 2), 200.0)

        prefill, = scheduler.schedule(200.0, 1.0)
        self.assertEqual((prefill.llm, prefill.request_ids, prefill.sm), ('a', (0,), 1.0))
        self.assertEqual(scheduler.schedule(200.0, 0.0), [])
        finish(scheduler, prefill, 210.0)

        decode, = scheduler.schedule(210.0, 1.0)
        self.assertEqual((decode.llm, decode.kind), ('a', DECODE))
        finish(scheduler, decode, 220.0)

        nxt, = scheduler.schedule(220.0, 1.0)
        self.assertEqual((nxt.llm, nxt.request_ids), ('b', (1,)))
        self.assertEqual(scheduler.state.holder, 'b')


class RoundRobinTests(SimpleTestCase):
    def test_turns_alternate(self):
        scheduler = scheduler_for('round_robin')
        scheduler.submit(Request(0, 'a', 0.0, 16, 4), 0.0)
        scheduler.submit(Request(1, 'b', 0.0, 16, 4), 0.0)
        seen = []
        now = 0.0
        for _ in range(4):
            job, = scheduler.schedule(now, 1.0)
            self.assertEqual(scheduler.schedule(now, 0.0), [])
            seen.append((job.llm, job.kind))
            now += 1.0
            finish(scheduler, job, now)
        self.assertEqual(seen, [('a', PREFILL), ('b', PREFILL), ('a', DECODE), ('b', DECODE)])


class FairnessTests(SimpleTestCase):
    def setUp(self):
        self.specs = {name: tiny(name) for name in ('a', 'b', 'c')}
        self.lengths = {name: (16.0, 16.0) for name in self.specs}

    def test_proportional_usage_is_one(self):
        usage = resource_usage({'a': 10.0, 'b': 30.0, 'c': 0.0}, {'a': 1.0, 'b': 3.0, 'c': 0.0},
                               self.specs, self.lengths, 16)
        self.assertAlmostEqual(usage['a'], 1.0)
        self.assertAlmostEqual(usage['b'], 1.0)
        self.assertEqual(usage['c'], 0.0)

    def test_skewed_usage(self):
        rates = {'a': 1.0, 'b': 1.0, 'c': 0.0}
        usage = resource_usage({'a': 30.0, 'b': 10.0}, rates, self.specs, self.lengths, 16)
        self.assertAlmostEqual(usage['a'], 1.5)
        self.assertAlmostEqual(usage['b'], 0.5)
        self.assertAlmostEqual(fairness_gap(usage, rates), 1.0)
        self.assertFalse(is_fair(usage, rates, 0.15))

    def test_gap_ignores_idle_llms(self):
        rates = {'a': 1.0, 'b': 2.0, 'c': 0.0}
        self.assertAlmostEqual(fairness_gap({'a': 1.2, 'b': 0.9, 'c': 0.0}, rates), 0.3)
        self.assertEqual(fairness_gap({'a': 1.0}, {'a': 1.0}), 0.0)
