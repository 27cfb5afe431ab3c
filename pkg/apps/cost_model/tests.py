from django.test import SimpleTestCase

from .domain import ExecConfig, LatencyProfile, LLMSpec, PeerLoad
from .services import LatencyModel


def llama_7b(name='llama-7b'):
    return LLMSpec.from_params(name, num_layers=32, num_heads=32, hidden_size=4096, params_b=6.7)


def llama_65b(name='llama-65b'):
    return LLMSpec.from_params(name, num_layers=80, num_heads=64, hidden_size=8192, params_b=65.2)


PROFILE = LatencyProfile(prefill_ms_per_token=0.1, decode_ms_per_step=12.0,
                         decode_ms_per_context_token=0.005)


class LLMSpecTests(SimpleTestCase):
    def test_kv_bytes_per_token(self):
        # 2 (K and V) * 32 layers * 32 heads * 128 dims * 2 bytes
        self.assertEqual(llama_7b().kv_bytes_per_token, 524288)

    def test_from_params_weight_bytes(self):
        self.assertEqual(llama_7b().weight_bytes, int(6.7e9 * 2))

    def test_rejects_non_positive_fields(self):
        with self.assertRaises(ValueError):
            LLMSpec('broken', 0, 32, 128, 4096, 10)

    def test_exec_config_validation(self):
        with self.assertRaises(ValueError):
            ExecConfig(3, 0.5)
        with self.assertRaises(ValueError):
            ExecConfig(1, 0.0)
        with self.assertRaises(ValueError):
            ExecConfig(1, 1.5)


class ScalingTests(SimpleTestCase):
    def setUp(self):
        self.model = LatencyModel(PROFILE)

    def test_prefill_scaling_is_inverse_share(self):
        self.assertAlmostEqual(self.model.sm_scaling_prefill(1.0), 1.0)
        self.assertAlmostEqual(self.model.sm_scaling_prefill(0.5), 2.0)

    def test_decode_scaling_flat_above_saturation(self):
        self.assertAlmostEqual(self.model.sm_scaling_decode(1.0), 1.0)
        self.assertAlmostEqual(self.model.sm_scaling_decode(0.5), 1.0)

    def test_decode_below_saturation_is_continuous(self):
        self.assertEqual(self.model.sm_scaling_decode(0.25), 2.0)
        self.assertAlmostEqual(self.model.sm_scaling_decode(0.1), 5.0)

    def test_scaling_rejects_out_of_range_share(self):
        for f in (0.0, -0.1, 1.01):
            with self.assertRaises(ValueError):
                self.model.sm_scaling_prefill(f)
            with self.assertRaises(ValueError):
                self.model.sm_scaling_decode(f)


class LatencyTests(SimpleTestCase):
    def setUp(self):
        self.model = LatencyModel(PROFILE)
        self.spec = llama_7b()

    def test_unit_prefill_is_per_token_cost(self):
        latency = self.model.prefill_latency(self.spec, ExecConfig(1, 1.0), 1, 1)
        self.assertAlmostEqual(latency, self.model.prefill_cost_per_token(self.spec))
        self.assertAlmostEqual(latency, 0.1)

    def test_prefill_scales_with_tokens_and_share(self):
        full = self.model.prefill_latency(self.spec, ExecConfig(1, 1.0), 4, 400)
        half = self.model.prefill_latency(self.spec, ExecConfig(1, 0.5), 4, 400)
        self.assertAlmostEqual(full, 40.0)
        self.assertAlmostEqual(half, 2 * full)

    def test_tensor_parallel_speedup(self):
        tp1 = self.model.prefill_latency(self.spec, ExecConfig(1, 1.0), 1, 100)
        tp4 = self.model.prefill_latency(self.spec, ExecConfig(4, 1.0), 1, 100)
        self.assertAlmostEqual(tp4, tp1 / (0.9 * 4))

    def test_prefill_rejects_bad_batches(self):
        with self.assertRaises(ValueError):
            self.model.prefill_latency(self.spec, ExecConfig(1, 1.0), 0, 10)
        with self.assertRaises(ValueError):
            self.model.prefill_latency(self.spec, ExecConfig(1, 1.0), 4, 3)

    def test_decode_flat_until_knee(self):
        cfg = ExecConfig(1, 1.0)
        one = self.model.decode_step_latency(self.spec, cfg, 1, 200)
        knee = self.model.decode_step_latency(self.spec, cfg, 16, 200)
        double = self.model.decode_step_latency(self.spec, cfg, 32, 200)
        self.assertAlmostEqual(one, 12.0 + 0.005 * 200)
        self.assertAlmostEqual(one, knee)
        self.assertAlmostEqual(double, 2 * one)

    def test_decode_unaffected_above_saturation(self):
        full = self.model.decode_step_latency(self.spec, ExecConfig(1, 1.0), 8, 100)
        half = self.model.decode_step_latency(self.spec, ExecConfig(1, 0.5), 8, 100)
        quarter = self.model.decode_step_latency(self.spec, ExecConfig(1, 0.25), 8, 100)
        self.assertAlmostEqual(full, half)
        self.assertAlmostEqual(quarter, 2 * full)

    def test_larger_models_are_slower(self):
        cfg = ExecConfig(1, 1.0)
        small = self.model.decode_step_latency(self.spec, cfg, 1, 100)
        large = self.model.decode_step_latency(llama_65b(), cfg, 1, 100)
        self.assertAlmostEqual(large / small, (80 * 8192) / (32 * 4096))

    def test_reference_latency_of_single_token_output(self):
        reference = self.model.reference_latency_ms(self.spec, 1, 100, 1)
        self.assertAlmostEqual(reference, self.model.prefill_latency(self.spec, ExecConfig(1, 1.0), 1, 100))

    def test_reference_latency_sums_decode_steps(self):
        cfg = ExecConfig(1, 1.0)
        expected = self.model.prefill_latency(self.spec, cfg, 1, 10)
        expected += self.model.decode_step_latency(self.spec, cfg, 1, 11)
        expected += self.model.decode_step_latency(self.spec, cfg, 1, 12)
        self.assertAlmostEqual(self.model.reference_latency_ms(self.spec, 1, 10, 3), expected)


class EstimatorTests(SimpleTestCase):
    def setUp(self):
        self.model = LatencyModel(PROFILE)
        self.spec = llama_7b()

    def estimate(self, rate, num_sm=1.0, **kwargs):
        kwargs.setdefault('gen_len', 338)
        kwargs.setdefault('prompt_len', 161)
        return self.model.estimate_throughput(self.spec, num_sm, 1, rate, **kwargs)

    def test_stable_batch_throughput(self):
        self.assertAlmostEqual(LatencyModel.stable_batch_throughput(4, 500.0, 10.0, 50), 4.0)

    def test_meets_reachable_rate_with_minimal_batch(self):
        estimate = self.estimate(2.0)
        self.assertFalse(estimate.saturated)
        self.assertAlmostEqual(estimate.throughput, 2.0)
        self.assertGreaterEqual(estimate.raw_throughput, 2.0)
        if estimate.batch > 1:
            smaller = self.estimate(2.0, max_batch=estimate.batch - 1)
            self.assertTrue(smaller.saturated)
            self.assertLess(smaller.throughput, 2.0)

    def test_unreachable_rate_saturates_at_max_batch(self):
        estimate = self.estimate(1000.0, max_batch=64)
        self.assertTrue(estimate.saturated)
        self.assertEqual(estimate.batch, 64)
        self.assertLess(estimate.throughput, 1000.0)

    def test_more_sms_never_hurt(self):
        previous = 0.0
        for num_sm in (0.1, 0.2, 0.3, 0.5, 0.8, 1.0):
            estimate = self.estimate(1000.0, num_sm=num_sm, max_batch=64)
            self.assertGreaterEqual(estimate.throughput, previous - 1e-12)
            previous = estimate.throughput

    def test_peers_lower_throughput(self):
        alone = self.estimate(1000.0, max_batch=32)
        shared = self.estimate(1000.0, max_batch=32, peers=[PeerLoad(llama_7b('peer'), 16)])
        self.assertLess(shared.throughput, alone.throughput)

    def test_rejects_non_positive_rate(self):
        with self.assertRaises(ValueError):
            self.estimate(0.0)

    def test_kv_capacity_batch(self):
        per_request = self.spec.kv_bytes_per_token * 500
        self.assertEqual(self.model.kv_capacity_batch(self.spec, per_request * 10.5, 500), 10)
        self.assertEqual(self.model.kv_capacity_batch(self.spec, -1, 500), 0)


class ProfileTests(SimpleTestCase):
    def test_from_settings_overrides(self):
        profile = LatencyProfile.from_settings(batch_knee=8, tp_efficiency=None)
        self.assertEqual(profile.batch_knee, 8)
        self.assertAlmostEqual(profile.tp_efficiency, 0.9)

    def test_rejects_invalid_coefficients(self):
        with self.assertRaises(ValueError):
            LatencyProfile(prefill_ms_per_token=0.1, decode_ms_per_step=12.0,
                           decode_ms_per_context_token=0.005, tp_efficiency=1.2)
