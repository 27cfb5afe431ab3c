import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from .domain import DistributionError, LengthDistribution, Request, WorkloadSpec
from .services import (
    WorkloadGenerator,
    gen_arrivals,
    gen_rates,
    named_rng,
    rate_table,
    sample_lengths,
    top_share,
)
from .trace import TraceFormatError, load_trace, save_trace


class RateTests(SimpleTestCase):
    def test_power_law_rates(self):
        rates = gen_rates(19, 0.9, 20)
        self.assertEqual(len(rates), 19)
        self.assertAlmostEqual(rates[0], 20.0)
        self.assertAlmostEqual(rates[1], 20.0 * 2 ** -0.9)
        self.assertEqual(rates, sorted(rates, reverse=True))

    def test_alpha_zero_is_uniform(self):
        self.assertEqual(gen_rates(4, 0.0, 3.0), [3.0] * 4)

    def test_top_share_grows_with_alpha(self):
        mild = top_share(gen_rates(19, 0.9, 20))
        skewed = top_share(gen_rates(19, 2.1, 20))
        self.assertGreater(mild, 0.5)
        self.assertLess(mild, 0.6)
        self.assertGreater(skewed, 0.88)

    def test_rejects_invalid_arguments(self):
        with self.assertRaises(ValueError):
            gen_rates(0, 0.9, 20)
        with self.assertRaises(ValueError):
            gen_rates(3, 0.9, 0)

    def test_rate_table_shares(self):
        table = rate_table({'a': 1.0, 'b': 3.0})
        self.assertEqual(list(table['llm']), ['b', 'a'])
        self.assertAlmostEqual(table['share'].sum(), 1.0)


class ArrivalTests(SimpleTestCase):
    def test_poisson_count_and_order(self):
        arrivals = gen_arrivals(5.0, 1000.0, named_rng(7, 'arrivals', 'x'))
        expected = 5000
        self.assertLess(abs(len(arrivals) - expected), 4 * math.sqrt(expected))
        self.assertEqual(arrivals, sorted(arrivals))
        self.assertTrue(all(0 <= t < 1000.0 for t in arrivals))

    def test_zero_rate_yields_nothing(self):
        self.assertEqual(gen_arrivals(0.0, 100.0, named_rng(1, 'a')), [])

    def test_interarrival_mean(self):
        arrivals = np.array(gen_arrivals(2.0, 5000.0, named_rng(3, 'gaps')))
        self.assertAlmostEqual(float(np.diff(arrivals).mean()), 0.5, delta=0.02)


class LengthTests(SimpleTestCase):
    def test_lognormal_mean(self):
        lengths = sample_lengths(LengthDistribution.lognormal(161, 1.0), 100000, named_rng(0, 'len'))
        self.assertTrue((lengths >= 1).all())
        self.assertLess(abs(lengths.mean() - 161) / 161, 0.03)

    def test_constant(self):
        lengths = sample_lengths(LengthDistribution.constant(64), 10, named_rng(0, 'c'))
        self.assertEqual(lengths.tolist(), [64] * 10)

    def test_empirical_support(self):
        dist = LengthDistribution.empirical({8: 1.0, 16: 3.0})
        lengths = sample_lengths(dist, 4000, named_rng(0, 'e'))
        self.assertEqual(set(lengths.tolist()), {8, 16})
        self.assertAlmostEqual(float((lengths == 16).mean()), 0.75, delta=0.03)
        self.assertAlmostEqual(dist.expected, 14.0)

    def test_descriptor_errors(self):
        with self.assertRaises(DistributionError):
            LengthDistribution.from_descriptor({'kind': 'uniform'})
        with self.assertRaises(DistributionError):
            LengthDistribution.from_descriptor({'kind': 'constant'})
        with self.assertRaises(DistributionError):
            LengthDistribution.from_descriptor({'kind': 'lognormal', 'mean': 0})

    def test_descriptor_round_trip(self):
        dist = LengthDistribution.from_descriptor({'kind': 'lognormal', 'mean': 338, 'sigma': 0.5})
        self.assertEqual(LengthDistribution.from_descriptor(dist.to_descriptor()), dist)


class GeneratorTests(SimpleTestCase):
    def spec(self, rates, seed=11):
        return WorkloadSpec(
            llm_rates=rates,
            horizon_s=60.0,
            prompt_len_dist=LengthDistribution.lognormal(161, 1.0),
            output_len_dist=LengthDistribution.lognormal(338, 1.0),
            seed=seed,
        )

    def test_deterministic_for_seed(self):
        first = WorkloadGenerator(self.spec({'a': 2.0, 'b': 1.0})).generate()
        second = WorkloadGenerator(self.spec({'a': 2.0, 'b': 1.0})).generate()
        self.assertEqual(first, second)
        other = WorkloadGenerator(self.spec({'a': 2.0, 'b': 1.0}, seed=12)).generate()
        self.assertNotEqual(first, other)

    def test_ids_and_ordering(self):
        requests = WorkloadGenerator(self.spec({'a': 2.0, 'b': 1.0})).generate()
        self.assertEqual([r.id for r in requests], list(range(len(requests))))
        arrivals = [r.arrival_s for r in requests]
        self.assertEqual(arrivals, sorted(arrivals))

    def test_adding_an_llm_keeps_existing_streams(self):
        alone = [r for r in WorkloadGenerator(self.spec({'a': 2.0})).generate()]
        together = [r for r in WorkloadGenerator(self.spec({'a': 2.0, 'b': 5.0})).generate()
                    if r.llm == 'a']
        self.assertEqual([(r.arrival_s, r.prompt_len, r.output_len) for r in alone],
                         [(r.arrival_s, r.prompt_len, r.output_len) for r in together])

    def test_per_llm_lengths(self):
        spec = WorkloadSpec(
            llm_rates={'a': 3.0, 'b': 3.0}, horizon_s=20.0,
            prompt_len_dist=LengthDistribution.constant(10),
            output_len_dist=LengthDistribution.constant(20),
            per_llm={'b': (LengthDistribution.constant(100), LengthDistribution.constant(5))},
        )
        for request in WorkloadGenerator(spec).generate():
            expected = (10, 20) if request.llm == 'a' else (100, 5)
            self.assertEqual((request.prompt_len, request.output_len), expected)
        self.assertEqual(spec.mean_lengths('b'), (100.0, 5.0))

    def test_rejects_negative_rate(self):
        with self.assertRaises(ValueError):
            self.spec({'a': -1.0})


class TraceTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, text):
        path = self.dir / 'trace.csv'
        path.write_text(text)
        return path

    def test_save_and_load(self):
        requests = [Request(0, 'a', 0.25, 12, 30), Request(1, 'b', 1.5, 7, 2)]
        path = save_trace(requests, self.dir / 'nested' / 'trace.csv')
        self.assertEqual(path.read_text().splitlines()[0], 'id,llm,arrival_s,prompt_len,output_len')
        self.assertEqual(load_trace(path), requests)

    def test_header_mismatch_reports_line_one(self):
        path = self.write('id,model,arrival_s,prompt_len,output_len\n0,a,0.1,5,5\n')
        with self.assertRaises(TraceFormatError) as ctx:
            load_trace(path)
        self.assertEqual(ctx.exception.line, 1)

    def test_bad_row_reports_its_line(self):
        path = self.write('id,llm,arrival_s,prompt_len,output_len\n0,a,0.1,5,5\n1,a,soon,5,5\n')
        with self.assertRaises(TraceFormatError) as ctx:
            load_trace(path)
        self.assertEqual(ctx.exception.line, 3)
        self.assertIn('line 3', str(ctx.exception))

    def test_zero_length_rejected(self):
        path = self.write('id,llm,arrival_s,prompt_len,output_len\n0,a,0.1,0,5\n')
        with self.assertRaises(TraceFormatError) as ctx:
            load_trace(path)
        self.assertEqual(ctx.exception.line, 2)

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            load_trace(self.dir / 'absent.csv')
