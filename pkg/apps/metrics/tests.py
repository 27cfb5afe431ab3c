import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from apps.cost_model.domain import LatencyProfile, LLMSpec
from apps.cost_model.services import LatencyModel
from apps.placement.domain import Cluster, LLMUnit, Mesh, ParallelCandidate, PlacedLLM, PlacementResult
from apps.sim_engine.domain import RequestRecord, SimulationConfig, SimulationResult
from apps.sim_engine.services import run
from apps.workload.domain import LengthDistribution, Request, WorkloadSpec
from apps.workload.services import WorkloadGenerator

from .services import (
    ReferenceLatency,
    aggregated_throughput,
    build_report,
    p99,
    per_llm_summary,
    per_llm_throughput,
    percentile,
    slo_attainment,
    write_report,
)

GB = 10 ** 9
PROFILE = LatencyProfile(prefill_ms_per_token=0.1, decode_ms_per_step=12.0,
                         decode_ms_per_context_token=0.005)


def finished(rid, llm, done_s=1.0, arrival_s=0.0, output_len=10):
    return RequestRecord(rid, llm, 0, arrival_s, 100, output_len, first_token_s=arrival_s + 0.1, done_s=done_s)


def records_for(counts):
    records, rid = [], 0
    for llm, count in counts.items():
        for _ in range(count):
            records.append(finished(rid, llm))
            rid += 1
    return records


def single_llm_placement():
    spec = LLMSpec.from_params('llama-7b', num_layers=32, num_heads=32, hidden_size=4096, params_b=6.7)
    placed = PlacedLLM(spec, ParallelCandidate(1, 0.5, 8, 1.0))
    return PlacementResult([LLMUnit(Mesh((0,), 0), [placed])], 0.0, 0.0, 'manual')


class PercentileTests(SimpleTestCase):
    def test_identical_values(self):
        self.assertEqual(p99([3.5] * 100), 3.5)

    def test_nearest_rank(self):
        self.assertEqual(p99(range(1, 101)), 99)
        self.assertEqual(percentile(range(1, 101), 50), 50)
        self.assertEqual(p99([7.0]), 7.0)

    def test_matches_sorted_oracle(self):
        rng = np.random.default_rng(11)
        for n in (1, 7, 99, 100, 101, 1000):
            values = rng.exponential(size=n)
            ordered = sorted(values)
            rank = (99 * n + 99) // 100
            self.assertEqual(p99(values), ordered[rank - 1])
            self.assertGreaterEqual(p99(values), percentile(values, 50))

    def test_empty(self):
        with self.assertRaises(ValueError):
            p99([])


class ThroughputTests(SimpleTestCase):
    def test_single_llm(self):
        records = records_for({'a': 30})
        self.assertAlmostEqual(aggregated_throughput(records, {'a': 4.0}, 10.0), 3.0)

    def test_equal_rates(self):
        records = records_for({'a': 2, 'b': 4})
        self.assertAlmostEqual(aggregated_throughput(records, {'a': 1.0, 'b': 1.0}, 1.0), 3.0)

    def test_hand_built_three_llms(self):
        records = records_for({'a': 10, 'b': 20, 'c': 40})
        rates = {'a': 1.0, 'b': 2.0, 'c': 5.0}
        self.assertAlmostEqual(aggregated_throughput(records, rates, 10.0), 25.0 / 8.0)

    def test_unfinished_do_not_count(self):
        records = records_for({'a': 3}) + [RequestRecord(99, 'a', 0, 0.0, 10, 10)]
        self.assertEqual(per_llm_throughput(records, 1.0), {'a': 3.0})

    def test_empty(self):
        self.assertEqual(aggregated_throughput([], {'a': 1.0}, 10.0), 0.0)
        with self.assertRaises(ValueError):
            per_llm_throughput(records_for({'a': 1}), 0.0)
        with self.assertRaises(ValueError):
            per_llm_throughput([], -1.0)

    def test_zero_length_run_without_requests(self):
        self.assertEqual(per_llm_throughput([], 0.0, llms=['a', 'b']), {'a': 0.0, 'b': 0.0})
        self.assertEqual(aggregated_throughput([], {'a': 1.0}, 0.0), 0.0)


class SloTests(SimpleTestCase):
    def test_infinite_scale(self):
        records = [finished(0, 'a', done_s=50.0), finished(1, 'a', done_s=500.0)]
        self.assertEqual(slo_attainment(records, 1e12, lambda record: 1.0), 1.0)

    def test_monotone_and_unfinished_miss(self):
        records = [finished(0, 'a', done_s=1.0), finished(1, 'a', done_s=3.0),
                   RequestRecord(2, 'a', 0, 0.0, 10, 10)]
        values = [slo_attainment(records, scale, lambda record: 1.0) for scale in (1, 2, 4, 8)]
        self.assertEqual(values, sorted(values))
        self.assertAlmostEqual(values[0], 1 / 3)
        self.assertAlmostEqual(values[-1], 2 / 3)

    def test_unloaded_request_meets_scale_one(self):
        placement = single_llm_placement()
        trace = [Request(0, 'llama-7b', 0.5, 161, 40)]
        config = SimulationConfig(interference=0.0)
        result = run(placement, trace, Cluster(1, 1, 80 * GB), model=LatencyModel(PROFILE), config=config)
        reference = ReferenceLatency.for_placement(placement, LatencyModel(PROFILE))
        self.assertEqual(slo_attainment(result.records, 1, reference), 1.0)

    def test_overload_misses_targets(self):
        placement = single_llm_placement()
        spec = WorkloadSpec({'llama-7b': 40.0}, 15.0, LengthDistribution.lognormal(161, 0.5),
                            LengthDistribution.lognormal(338, 0.5), seed=3)
        trace = WorkloadGenerator(spec).generate()
        result = run(placement, trace, Cluster(1, 1, 80 * GB), model=LatencyModel(PROFILE),
                     config=SimulationConfig(interference=0.1), horizon_s=15.0)
        reference = ReferenceLatency.for_placement(placement, LatencyModel(PROFILE))
        self.assertLess(slo_attainment(result.records, 8, reference), 1.0)


class ReportTests(SimpleTestCase):
    def test_report_round_trip(self):
        records = records_for({'a': 4, 'b': 2}) + [RequestRecord(99, 'b', 0, 0.0, 10, 10)]
        result = SimulationResult(records, 2.0)
        report = build_report(result, {'a': 2.0, 'b': 2.0}, lambda record: 0.5, slo_scales=[1, 4],
                              usage={'a': 1.1, 'b': 0.9}, fairness=0.2)
        self.assertEqual(report.finished_requests, 6)
        self.assertEqual(report.per_llm_throughput, {'a': 2.0, 'b': 1.0})
        self.assertAlmostEqual(report.aggregated_throughput, 1.5)
        self.assertEqual(set(report.slo_attainment), {'1', '4'})
        self.assertAlmostEqual(report.p99_ttft_s, 0.1)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_report(report, Path(tmp) / 'metrics.json')
            data = json.loads(path.read_text())
        self.assertEqual(data['fairness_gap'], 0.2)
        self.assertEqual(data['token_block_usage'], {'a': 1.1, 'b': 0.9})

    def test_report_without_finished_requests(self):
        result = SimulationResult([RequestRecord(0, 'a', 0, 0.0, 10, 10)], 1.0)
        report = build_report(result, {'a': 1.0}, lambda record: 1.0, slo_scales=[1])
        self.assertIsNone(report.p99_latency_s)
        self.assertEqual(report.slo_attainment, {'1': 0.0})

    def test_empty_trace_without_horizon(self):
        result = run(single_llm_placement(), [], Cluster(1, 1, 80 * GB), model=LatencyModel(PROFILE),
                     config=SimulationConfig(debug_checks=True))
        self.assertEqual(result.horizon_s, 0.0)
        report = build_report(result, {'llama-7b': 1.0}, lambda record: 1.0, slo_scales=[1])
        self.assertEqual(report.total_requests, 0)
        self.assertEqual(report.per_llm_throughput, {'llama-7b': 0.0})
        self.assertEqual(report.aggregated_throughput, 0.0)
        self.assertEqual(report.slo_attainment, {'1': 1.0})

    def test_per_llm_summary(self):
        records = records_for({'a': 2, 'b': 1}) + [RequestRecord(99, 'b', 0, 0.0, 10, 10)]
        summary = per_llm_summary(records, 1.0).set_index('llm')
        self.assertEqual(int(summary.loc['b', 'requests']), 2)
        self.assertEqual(int(summary.loc['b', 'finished']), 1)
        self.assertAlmostEqual(summary.loc['a', 'throughput'], 2.0)
        self.assertAlmostEqual(summary.loc['a', 'mean_ttft_s'], 0.1)
