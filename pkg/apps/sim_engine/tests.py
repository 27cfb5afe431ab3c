import tempfile
from dataclasses import replace
from pathlib import Path

import pandas as pd
from django.test import SimpleTestCase

from apps.cost_model.domain import ExecConfig, LatencyProfile, LLMSpec
from apps.cost_model.services import LatencyModel
from apps.placement.domain import Cluster, LLMUnit, Mesh, ParallelCandidate, PlacedLLM, PlacementResult
from apps.scheduler.domain import SchedulerConfig
from apps.workload.domain import LengthDistribution, Request, WorkloadSpec
from apps.workload.services import WorkloadGenerator

from .domain import RequestRecord, SimulationConfig, TracePlacementMismatch
from .services import interference_adjust, run, trace_rates, write_records

GB = 10 ** 9
CLUSTER = Cluster(num_nodes=1, gpus_per_node=4, gpu_memory_bytes=80 * GB)
PROFILE = LatencyProfile(prefill_ms_per_token=0.1, decode_ms_per_step=12.0,
                         decode_ms_per_context_token=0.005)
SCHEDULING = SchedulerConfig(kind='adbs', prefill_token_budget=4096, min_prefill_sm=0.3,
                             decode_sm=0.5, max_batch=256)


def llama_7b(name='llama-7b'):
    return LLMSpec.from_params(name, num_layers=32, num_heads=32, hidden_size=4096, params_b=6.7)


def placement_of(*specs, gpus=(0,), tp=1):
    placed = [PlacedLLM(spec, ParallelCandidate(tp, 0.5, 8, 1.0)) for spec in specs]
    return PlacementResult([LLMUnit(Mesh(tuple(gpus), 0), placed)], 0.0, 0.0, 'manual')


def simulate(placement, trace, scheduler='adbs', interference=0.0, horizon_s=None, **config):
    config = SimulationConfig(scheduler=scheduler, interference=interference, debug_checks=True,
                              **config)
    return run(placement, trace, CLUSTER, model=LatencyModel(PROFILE), config=config,
               scheduler_config=replace(SCHEDULING, kind=scheduler),
               horizon_s=horizon_s)


class InterferenceTests(SimpleTestCase):
    def test_single_job_is_unaffected(self):
        self.assertEqual(interference_adjust([0.7], 0.1), [1.0])

    def test_disabled(self):
        self.assertEqual(interference_adjust([0.5, 0.5], 0.0), [1.0, 1.0])

    def test_two_half_jobs(self):
        for multiplier in interference_adjust([0.5, 0.5], 0.1):
            self.assertAlmostEqual(multiplier, 1.05)

    def test_negative_kappa(self):
        with self.assertRaises(ValueError):
            interference_adjust([0.5], -0.1)


class RecordTests(SimpleTestCase):
    def test_derived_timings(self):
        record = RequestRecord(1, 'a', 0, 1.0, 10, 5, first_token_s=1.5, done_s=3.5)
        self.assertAlmostEqual(record.ttft_s, 0.5)
        self.assertAlmostEqual(record.tpot_s, 0.5)
        self.assertAlmostEqual(record.latency_s, 2.5)

    def test_single_token_output(self):
        record = RequestRecord(1, 'a', 0, 1.0, 10, 1, first_token_s=1.5, done_s=1.5)
        self.assertEqual(record.tpot_s, 0.0)

    def test_unfinished(self):
        record = RequestRecord(1, 'a', 0, 1.0, 10, 5)
        self.assertFalse(record.finished)
        self.assertIsNone(record.ttft_s)
        self.assertIsNone(record.latency_s)


class RunTests(SimpleTestCase):
    def setUp(self):
        self.spec = llama_7b()
        self.model = LatencyModel(PROFILE)

    def test_empty_trace(self):
        result = simulate(placement_of(self.spec), [])
        self.assertEqual(result.records, [])
        self.assertFalse(result.stalled)

    def test_single_request_timeline(self):
        request = Request(0, self.spec.name, 1.0, 100, 5)
        record = simulate(placement_of(self.spec), [request]).records[0]
        prefill_ms = self.model.prefill_latency(self.spec, ExecConfig(1, 1.0), 1, 100)
        expected_ms = self.model.reference_latency_ms(self.spec, 1, 100, 5)
        self.assertAlmostEqual(record.ttft_s, prefill_ms / 1000.0, places=9)
        self.assertAlmostEqual(record.latency_s, expected_ms / 1000.0, places=9)
        self.assertLessEqual(record.arrival_s, record.arrival_s + record.ttft_s)

    def test_simultaneous_arrivals_batch(self):
        single_ms = self.model.reference_latency_ms(self.spec, 1, 100, 20)
        trace = [Request(0, self.spec.name, 0.0, 100, 20), Request(1, self.spec.name, 0.0, 100, 20)]
        records = simulate(placement_of(self.spec), trace).records
        self.assertTrue(all(record.finished for record in records))
        self.assertAlmostEqual(records[0].done_s, records[1].done_s)
        self.assertLess(max(record.done_s for record in records), 2 * single_ms / 1000.0)

    def test_tensor_parallel_is_faster(self):
        request = Request(0, self.spec.name, 0.0, 200, 10)
        tp1 = simulate(placement_of(self.spec), [request]).records[0]
        tp2 = simulate(placement_of(self.spec, gpus=(0, 1), tp=2), [request]).records[0]
        self.assertLess(tp2.latency_s, tp1.latency_s)

    def test_mismatch_raises_before_running(self):
        with self.assertRaises(TracePlacementMismatch) as ctx:
            simulate(placement_of(self.spec), [Request(0, 'ghost', 0.0, 10, 10)])
        self.assertEqual(ctx.exception.missing, ['ghost'])

    def test_horizon_leaves_requests_unfinished(self):
        trace = [Request(0, self.spec.name, 0.0, 100, 500)]
        record = simulate(placement_of(self.spec), trace, horizon_s=0.5).records[0]
        self.assertIsNotNone(record.first_token_s)
        self.assertIsNone(record.done_s)


class MultiplexingTests(SimpleTestCase):
    def setUp(self):
        self.a, self.b = llama_7b('llm-a'), llama_7b('llm-b')
        self.placement = placement_of(self.a, self.b)
        spec = WorkloadSpec({'llm-a': 2.0, 'llm-b': 6.0}, 20.0, LengthDistribution.lognormal(161, 0.5),
                            LengthDistribution.lognormal(120, 0.5), seed=7)
        self.trace = WorkloadGenerator(spec).generate()

    def test_causality_for_every_scheduler(self):
        for kind in ('adbs', 'fcfs', 'round_robin'):
            records = simulate(self.placement, self.trace, scheduler=kind, interference=0.1).records
            self.assertEqual(len(records), len(self.trace))
            for record in records:
                self.assertTrue(record.finished, kind)
                self.assertLessEqual(record.arrival_s, record.first_token_s)
                self.assertLessEqual(record.first_token_s, record.done_s)

    def test_deterministic(self):
        first = simulate(self.placement, self.trace, interference=0.1, record_decisions=True)
        second = simulate(self.placement, self.trace, interference=0.1, record_decisions=True)
        self.assertEqual(first.records, second.records)
        self.assertEqual(first.decisions, second.decisions)
        self.assertEqual(first.pool_stats, second.pool_stats)

    def test_adbs_colocates_jobs(self):
        result = simulate(self.placement, self.trace, record_decisions=True)
        launches = [d for d in result.decisions if d['action'] == 'launch']
        self.assertTrue(any(d['sm'] < 1.0 and d['kind'] == 'prefill' for d in launches))
        self.assertTrue({d['llm'] for d in launches} == {'llm-a', 'llm-b'})

    def test_quota_history_recorded(self):
        result = simulate(self.placement, self.trace, adapt_period_s=2.0)
        stats = result.pool_stats[0]
        self.assertTrue(stats['history'])
        self.assertEqual(sum(stats['quotas'].values()), stats['total_blocks'])
        self.assertEqual(set(result.average_blocks()), {'llm-a', 'llm-b'})

    def test_trace_rates(self):
        rates, lengths = trace_rates(self.trace, 20.0)
        counts = pd.Series([r.llm for r in self.trace]).value_counts()
        self.assertAlmostEqual(rates['llm-b'], counts['llm-b'] / 20.0)
        self.assertGreater(lengths['llm-a'][0], 1.0)

    def test_records_csv(self):
        result = simulate(self.placement, self.trace[:3], horizon_s=0.001)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_records(result.records, Path(tmp) / 'records.csv')
            frame = pd.read_csv(path)
        self.assertEqual(list(frame.columns), ['id', 'llm', 'arrival_s', 'ttft_s', 'tpot_s', 'done_s'])
        self.assertTrue(frame['done_s'].isna().all())
