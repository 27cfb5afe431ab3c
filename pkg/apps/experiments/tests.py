import json
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
import pandas as pd
from django.apps import apps as django_apps
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.db import connections
from django.test import SimpleTestCase

from apps.placement.domain import LLMUnit, Mesh, ParallelCandidate, PlacedLLM, PlacementResult
from apps.sim_engine.domain import TracePlacementMismatch
from apps.workload.domain import Request

from .domain import ConfigError
from .management.base import INFEASIBLE, USAGE_ERROR
from .services import (
    ablate,
    generate_trace,
    load_config,
    parse_config,
    plan,
    planning_context,
    simulate,
    write_simulation,
)


def llm(name):
    return {'name': name, 'num_layers': 32, 'num_heads': 32, 'hidden_size': 4096, 'params_b': 6.7}


def constant_lengths(prompt_len, output_len):
    return {'prompt_len': {'kind': 'constant', 'value': prompt_len},
            'output_len': {'kind': 'constant', 'value': output_len}}


def two_llm_config(**sections):
    data = {
        'seed': 5,
        'cluster': {'num_nodes': 1, 'gpus_per_node': 2, 'gpu_memory_gb': 80},
        'llms': [llm('llm-a'), llm('llm-b')],
        'workload': {'rates': {'llm-a': 2.0, 'llm-b': 1.0}, 'horizon_s': 20.0},
    }
    data.update(sections)
    return data


def shared_unit(config, gpus):
    placed = [PlacedLLM(spec, ParallelCandidate(len(gpus), 0.5, 8, 1.0)) for spec in config.llms]
    return PlacementResult([LLMUnit(Mesh(tuple(gpus), 0), placed)], 0.0, 0.0, 'manual')


class ConfigTests(SimpleTestCase):
    def test_minimal_config_uses_catalog(self):
        config = parse_config({'cluster': {'num_nodes': 1, 'gpus_per_node': 8, 'gpu_memory_gb': 80}})
        self.assertEqual(len(config.llms), 19)
        self.assertEqual(sum(name.startswith('llama-7b') for name in config.names), 12)
        rates = list(config.workload.llm_rates.values())
        self.assertAlmostEqual(rates[0], 20.0)
        self.assertEqual(rates, sorted(rates, reverse=True))
        self.assertEqual(config.backend, 'greedy')
        self.assertEqual(config.cluster.gpu_memory_bytes, 80 * 10 ** 9)

    def test_unknown_keys_are_rejected(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config(two_llm_config(color='blue'))
        self.assertIn('color', ctx.exception.errors)
        with self.assertRaises(ConfigError):
            parse_config(two_llm_config(workload={'rates': {'llm-a': 1.0}, 'horizon': 5}))

    def test_cluster_is_required(self):
        data = two_llm_config()
        del data['cluster']
        with self.assertRaises(ConfigError):
            parse_config(data)

    def test_explicit_rates_and_scale(self):
        config = parse_config(two_llm_config(workload={'rates': {'llm-a': 3.0}, 'rate_scale': 2.0}))
        self.assertEqual(config.workload.llm_rates, {'llm-a': 6.0, 'llm-b': 0.0})

    def test_rates_must_name_known_llms(self):
        with self.assertRaises(ConfigError):
            parse_config(two_llm_config(workload={'rates': {'llm-z': 1.0}}))

    def test_duplicate_llm_names(self):
        with self.assertRaises(ConfigError):
            parse_config(two_llm_config(llms=[llm('llm-a'), llm('llm-a')]))

    def test_per_llm_lengths(self):
        config = parse_config(two_llm_config(workload={
            'rates': {'llm-a': 1.0, 'llm-b': 1.0},
            'per_llm': {'llm-a': constant_lengths(256, 128)},
        }))
        self.assertEqual(config.workload.mean_lengths('llm-a'), (256, 128))
        self.assertNotEqual(config.workload.mean_lengths('llm-b'), (256, 128))

    def test_bad_length_descriptor(self):
        with self.assertRaises(ConfigError):
            parse_config(two_llm_config(workload={'prompt_len': {'kind': 'lognormal', 'mean': 100}}))

    def test_watermarks_must_be_ordered(self):
        with self.assertRaises(ConfigError):
            parse_config(two_llm_config(kv={'low_mark': 0.9, 'high_mark': 0.5}))

    def test_decode_share_follows_profile(self):
        config = parse_config(two_llm_config(profile={'sm_saturation': 0.4}))
        self.assertEqual(config.scheduler.decode_sm, 0.4)
        config = parse_config(two_llm_config(scheduler={'decode_sm': 0.6, 'kind': 'fcfs'}))
        self.assertEqual(config.scheduler.decode_sm, 0.6)
        self.assertEqual(config.simulation.scheduler, 'fcfs')

    def test_load_config_errors(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'broken.json'
            path.write_text('{"cluster": ')
            with self.assertRaises(ConfigError):
                load_config(path)
            with self.assertRaises(ConfigError):
                load_config(Path(tmp) / 'missing.json')


class SettingsTests(SimpleTestCase):
    def test_no_persistence_or_auth(self):
        self.assertEqual(connections['default'].settings_dict['ENGINE'], 'django.db.backends.dummy')
        self.assertFalse(django_apps.is_installed('django.contrib.auth'))
        self.assertTrue(django_apps.is_installed('rest_framework'))

    def test_logging_formatters(self):
        self.assertEqual(list(settings.LOGGING['formatters']), ['verbose'])
        self.assertEqual(settings.LOGGING['handlers']['console']['formatter'], 'verbose')


class PipelineTests(SimpleTestCase):
    def test_trace_is_reproducible(self):
        config = parse_config(two_llm_config())
        self.assertEqual(generate_trace(config), generate_trace(config))
        self.assertEqual({r.llm for r in generate_trace(config)}, {'llm-a', 'llm-b'})

    def test_mismatched_trace(self):
        config = parse_config(two_llm_config())
        placement = shared_unit(config, (0,))
        with self.assertRaises(TracePlacementMismatch):
            simulate(config, placement, [Request(0, 'llm-z', 0.1, 16, 16)])

    def test_single_llm_schedulers_coincide(self):
        config = parse_config(two_llm_config(
            cluster={'num_nodes': 1, 'gpus_per_node': 1, 'gpu_memory_gb': 80},
            llms=[llm('llm-a')],
            workload={'rates': {'llm-a': 6.0}, 'horizon_s': 20.0},
        ))
        placement = shared_unit(config, (0,))
        trace = generate_trace(config)
        adbs, _ = simulate(config, placement, trace, 'adbs')
        fcfs, _ = simulate(config, placement, trace, 'fcfs')
        self.assertGreater(sum(r.finished for r in adbs.records), 0)
        self.assertEqual([(r.id, r.first_token_s, r.done_s) for r in adbs.records],
                         [(r.id, r.first_token_s, r.done_s) for r in fcfs.records])

    def test_ablation_rows(self):
        config = parse_config(two_llm_config(
            workload={'rates': {'llm-a': 2.0, 'llm-b': 1.0}, 'horizon_s': 10.0},
            ablation={'rate_scales': [0.5, 1.0], 'schedulers': ['adbs', 'fcfs']},
        ))
        sweep = ablate(config)
        self.assertEqual(len(sweep), 4)
        self.assertEqual(list(sweep['scheduler']), ['adbs', 'fcfs', 'adbs', 'fcfs'])
        self.assertEqual(list(sweep['total_rate']), [1.5, 1.5, 3.0, 3.0])
        slo_columns = [f"slo@{scale}" for scale in (1, 2, 4, 8, 16)]
        for _, row in sweep.iterrows():
            values = [row[column] for column in slo_columns]
            self.assertEqual(values, sorted(values))
            self.assertAlmostEqual(row['share:llm-a'] + row['share:llm-b'], 1.0)
            self.assertIsNotNone(row['ilp_objective'])
            self.assertLessEqual(row['placement_gap'], 1.0 + 1e-9)


class CommandTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)
        self.config = self.write_config(two_llm_config(simulation={'record_decisions': True}))

    def write_config(self, data, name='config.json'):
        path = self.dir / name
        path.write_text(json.dumps(data))
        return str(path)

    def call(self, *args):
        out = StringIO()
        call_command(*args, stdout=out)
        return out.getvalue()

    def pipeline(self, out_dir):
        trace = str(self.dir / 'trace.csv')
        placement = str(self.dir / 'plan.json')
        self.call('gen_workload', '-c', self.config, '-o', trace)
        self.call('plan', '-c', self.config, '--backend', 'greedy', '-o', placement)
        return self.call('simulate', '-c', self.config, '-p', placement, '-t', trace,
                         '-o', str(self.dir / out_dir))

    def test_end_to_end(self):
        output = self.pipeline('out')
        self.assertIn('aggregated throughput', output)
        for name in ('records.csv', 'metrics.json', 'pool_stats.json', 'decisions.jsonl'):
            self.assertTrue((self.dir / 'out' / name).exists(), name)
        records = pd.read_csv(self.dir / 'out' / 'records.csv')
        self.assertEqual(list(records.columns), ['id', 'llm', 'arrival_s', 'ttft_s', 'tpot_s', 'done_s'])
        metrics = json.loads((self.dir / 'out' / 'metrics.json').read_text())
        self.assertEqual(metrics['total_requests'], len(records))

    def test_outputs_are_byte_identical(self):
        self.pipeline('first')
        self.pipeline('second')
        for name in ('records.csv', 'metrics.json'):
            self.assertEqual((self.dir / 'first' / name).read_bytes(),
                             (self.dir / 'second' / name).read_bytes(), name)

    def test_plan_compare(self):
        output = self.call('plan', '-c', self.config, '--compare', '-o', str(self.dir / 'plan.json'))
        self.assertIn('gap', output)

    def test_infeasible_placement_exit_code(self):
        config = self.write_config(two_llm_config(
            cluster={'num_nodes': 1, 'gpus_per_node': 1, 'gpu_memory_gb': 8}), 'tiny.json')
        with self.assertRaises(CommandError) as ctx:
            self.call('plan', '-c', config, '-o', str(self.dir / 'plan.json'))
        self.assertEqual(ctx.exception.returncode, INFEASIBLE)

    def test_config_errors_exit_code(self):
        with self.assertRaises(CommandError) as ctx:
            self.call('gen_workload', '-c', str(self.dir / 'missing.json'), '-o', str(self.dir / 't.csv'))
        self.assertEqual(ctx.exception.returncode, USAGE_ERROR)
        bad = self.write_config({'cluster': {'num_nodes': 0}}, 'bad.json')
        with self.assertRaises(CommandError) as ctx:
            self.call('plan', '-c', bad, '-o', str(self.dir / 'plan.json'))
        self.assertEqual(ctx.exception.returncode, USAGE_ERROR)

    def test_simulate_rejects_bad_inputs(self):
        trace = self.dir / 'trace.csv'
        trace.write_text('id,llm,arrival_s,prompt_len,output_len\n0,llm-a,oops,16,16\n')
        placement = str(self.dir / 'plan.json')
        self.call('plan', '-c', self.config, '-o', placement)
        with self.assertRaises(CommandError) as ctx:
            self.call('simulate', '-c', self.config, '-p', placement, '-t', str(trace),
                      '-o', str(self.dir / 'out'))
        self.assertEqual(ctx.exception.returncode, USAGE_ERROR)
        with self.assertRaises(CommandError) as ctx:
            self.call('simulate', '-c', self.config, '-p', str(self.dir / 'none.json'), '-t', str(trace),
                      '-o', str(self.dir / 'out'))
        self.assertEqual(ctx.exception.returncode, USAGE_ERROR)

    def test_ablate_writes_sweep(self):
        config = self.write_config(two_llm_config(
            workload={'rates': {'llm-a': 2.0, 'llm-b': 1.0}, 'horizon_s': 5.0},
            ablation={'rate_scales': [1.0], 'schedulers': ['round_robin']},
        ), 'sweep.json')
        self.call('ablate', '-c', config, '-o', str(self.dir / 'sweep.csv'))
        sweep = pd.read_csv(self.dir / 'sweep.csv')
        self.assertEqual(list(sweep['scheduler']), ['round_robin'])


# Two 7B LLMs sharing one unit; the second gets 8x the requests of the first,
# each a quarter as long.
SKEWED_LENGTHS = {'llm-a': constant_lengths(256, 256), 'llm-b': constant_lengths(64, 64)}


class SchedulerOrderingTests(SimpleTestCase):
    """
    Both LLMs are overloaded on a 4-GPU unit with plenty of KV cache and quota
    adaptation on. The in-flight cap bounds how many token blocks the busier
    LLM can hold.
    """

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.config = parse_config(two_llm_config(
            seed=1,
            cluster={'num_nodes': 1, 'gpus_per_node': 4, 'gpu_memory_gb': 80},
            workload={'rates': {'llm-a': 10.0, 'llm-b': 80.0}, 'horizon_s': 30.0,
                      'per_llm': SKEWED_LENGTHS},
            scheduler={'max_batch': 120},
        ))
        placement = shared_unit(cls.config, (0, 1, 2, 3))
        trace = generate_trace(cls.config)
        cls.results = {kind: simulate(cls.config, placement, trace, kind)
                       for kind in ('adbs', 'round_robin', 'fcfs')}
        cls.reports = {kind: report for kind, (_, report) in cls.results.items()}

    def test_adaptive_batching_beats_temporal_baselines(self):
        adbs = self.reports['adbs'].aggregated_throughput
        rr = self.reports['round_robin'].aggregated_throughput
        fcfs = self.reports['fcfs'].aggregated_throughput
        self.assertGreater(fcfs, 0.0)
        self.assertGreaterEqual(adbs, 1.1 * rr)
        self.assertGreaterEqual(rr, 1.1 * fcfs)

    def test_slo_attainment_is_monotone(self):
        for report in self.reports.values():
            values = list(report.slo_attainment.values())
            self.assertEqual(values, sorted(values))

    def test_adaptive_batching_is_fair(self):
        self.assertTrue(self.config.simulation.adapt_quota)
        report = self.reports['adbs']
        self.assertLessEqual(report.fairness_gap, self.config.fairness_epsilon)

    def test_first_come_first_served_is_unfair(self):
        report = self.reports['fcfs']
        self.assertGreater(report.fairness_gap, self.config.fairness_epsilon)

    def test_results_can_be_written(self):
        result, report = self.results['adbs']
        with tempfile.TemporaryDirectory() as tmp:
            out = write_simulation(result, report, tmp)
            metrics = json.loads((out / 'metrics.json').read_text())
        self.assertAlmostEqual(metrics['fairness_gap'], report.fairness_gap)


class QuotaBindingTests(SimpleTestCase):
    """Same skew on one GPU whose KV cache is small enough for static quotas to bind."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.config = parse_config(two_llm_config(
            seed=2,
            cluster={'num_nodes': 1, 'gpus_per_node': 1, 'gpu_memory_gb': 64},
            workload={'rates': {'llm-a': 4.0, 'llm-b': 32.0}, 'horizon_s': 120.0,
                      'per_llm': SKEWED_LENGTHS},
            scheduler={'max_batch': 512},
            kv={'adapt': False},
        ))
        placement = shared_unit(cls.config, (0,))
        trace = generate_trace(cls.config)
        cls.results = {kind: simulate(cls.config, placement, trace, kind)
                       for kind in ('adbs', 'fcfs')}

    def test_quotas_keep_usage_demand_proportional(self):
        result, report = self.results['adbs']
        self.assertLessEqual(report.fairness_gap, self.config.fairness_epsilon)
        stats, = result.pool_stats
        for name, used in stats['average_used'].items():
            self.assertLessEqual(used, stats['quotas'][name])

    def test_temporal_sharing_is_unfair(self):
        _, report = self.results['fcfs']
        self.assertGreater(report.fairness_gap, self.config.fairness_epsilon)
        self.assertGreater(report.token_block_usage['llm-a'], report.token_block_usage['llm-b'])

    def test_results_can_be_written(self):
        result, report = self.results['adbs']
        with tempfile.TemporaryDirectory() as tmp:
            out = write_simulation(result, report, tmp)
            stats = json.loads((out / 'pool_stats.json').read_text())
        self.assertEqual(stats[0]['llms'], ['llm-a', 'llm-b'])


class EstimatorFidelityTests(SimpleTestCase):
    """The planner's throughput estimate against the simulator for one LLM at 50-80% load."""

    def single_llm_config(self, rate):
        return parse_config(two_llm_config(
            seed=3,
            cluster={'num_nodes': 1, 'gpus_per_node': 1, 'gpu_memory_gb': 80},
            llms=[llm('llm-a')],
            workload={'rates': {'llm-a': rate}, 'horizon_s': 300.0,
                      'per_llm': {'llm-a': constant_lengths(161, 338)}},
        ))

    def capacity(self):
        context = planning_context(self.single_llm_config(1.0))
        spec = context.specs['llm-a']
        kv_bytes = context.usable_memory(1) - spec.weight_bytes
        max_batch = min(context.options.max_batch,
                        context.model.kv_capacity_batch(spec, kv_bytes, 161 + 338))
        estimate = context.model.estimate_throughput(spec, 1.0, 1, 1e6, gen_len=338, prompt_len=161,
                                                     max_batch=max_batch)
        self.assertTrue(estimate.saturated)
        return estimate.throughput

    def test_estimate_tracks_simulated_throughput(self):
        capacity = self.capacity()
        self.assertGreater(capacity, 0.0)
        for load in np.linspace(0.5, 0.8, 10):
            config = self.single_llm_config(round(float(load * capacity), 4))
            estimated = planning_context(config).candidate_for('llm-a', 1).est_tpt
            placement = plan(config)
            _, report = simulate(config, placement, generate_trace(config), 'adbs')
            simulated = report.per_llm_throughput['llm-a']
            self.assertLessEqual(abs(simulated - estimated) / estimated, 0.25,
                                 msg=f"load {load:.2f}: estimated {estimated:.3f}, simulated {simulated:.3f}")
