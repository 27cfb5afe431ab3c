"""
Analytical latency and throughput model.

Stands in for offline profiling: prefill is compute bound and scales with the
inverse SM share, decode saturates at ``sm_saturation`` and only grows with
batch size past ``batch_knee``. Every other module queries this model.
"""
import logging
import math
from typing import Iterable, Optional

from django.conf import settings

from .domain import ExecConfig, LatencyProfile, LLMSpec, PeerLoad, ThroughputEstimate

logger = logging.getLogger(__name__)


def _check_fraction(f: float) -> None:
    if not 0 < f <= 1:
        raise ValueError(f"sm_fraction must be in (0, 1], got {f}")


class LatencyModel:
    """Pure latency/throughput queries against one LatencyProfile."""

    def __init__(self, profile: Optional[LatencyProfile] = None):
        self.profile = profile or LatencyProfile.from_settings()
        defaults = getattr(settings, 'MUXSIM_DEFAULTS', {})
        self.default_gen_len = defaults.get('gen_len', 338)
        self.default_prompt_len = defaults.get('mean_prompt_len', 161)
        self.default_max_batch = defaults.get('max_batch', 256)

    # SM scaling

    def sm_scaling_prefill(self, f: float) -> float:
        _check_fraction(f)
        return 1.0 / f

    def sm_scaling_decode(self, f: float) -> float:
        _check_fraction(f)
        return max(1.0, self.profile.sm_saturation / f)

    # Per-model coefficients

    def size_factor(self, spec: LLMSpec) -> float:
        return spec.size / self.profile.reference_size

    def tp_speedup(self, tp_degree: int) -> float:
        if tp_degree == 1:
            return 1.0
        return self.profile.tp_efficiency * tp_degree

    def prefill_cost_per_token(self, spec: LLMSpec) -> float:
        """c_p(spec): ms per prompt token at full SMs, tp=1."""
        return self.profile.prefill_ms_per_token * self.size_factor(spec)

    def batch_factor(self, batch: int) -> float:
        return max(1.0, batch / self.profile.batch_knee)

    # Latencies

    def prefill_latency(self, spec: LLMSpec, cfg: ExecConfig, batch: int,
                        total_prompt_tokens: int) -> float:
        """Duration (ms) of one prefill job over ``batch`` requests."""
        if batch < 1:
            raise ValueError(f"prefill batch must be >= 1, got {batch}")
        if total_prompt_tokens < batch:
            raise ValueError(
                f"total_prompt_tokens ({total_prompt_tokens}) must be >= batch ({batch})"
            )
        return (
            self.prefill_cost_per_token(spec) * total_prompt_tokens
            * self.sm_scaling_prefill(cfg.sm_fraction)
            / self.tp_speedup(cfg.tp_degree)
        )

    def decode_step_latency(self, spec: LLMSpec, cfg: ExecConfig, batch: int,
                            avg_context: float) -> float:
        """Duration (ms) of one decode iteration producing one token per request."""
        if batch < 1:
            raise ValueError(f"decode batch must be >= 1, got {batch}")
        if avg_context < 1:
            raise ValueError(f"avg_context must be >= 1, got {avg_context}")
        size = self.size_factor(spec)
        per_step = (self.profile.decode_ms_per_step * size
                    + self.profile.decode_ms_per_context_token * size * avg_context)
        return (
            per_step * self.batch_factor(batch)
            * self.sm_scaling_decode(cfg.sm_fraction)
            / self.tp_speedup(cfg.tp_degree)
        )

    def reference_latency_ms(self, spec: LLMSpec, tp_degree: int, prompt_len: int,
                             output_len: int) -> float:
        """Unqueued latency of a lone request with the whole GPU."""
        cfg = ExecConfig(tp_degree, 1.0)
        total = self.prefill_latency(spec, cfg, 1, prompt_len)
        for generated in range(1, output_len):
            total += self.decode_step_latency(spec, cfg, 1, prompt_len + generated)
        return total

    # Throughput estimator

    @staticmethod
    def stable_batch_throughput(batch: int, prefill_ms_total: float, decode_ms: float,
                                gen_len: float) -> float:
        """
        Requests per second of a stable batch.

        All colocated prefills run back to back, then the batch decodes
        ``gen_len`` steps, and the cycle repeats.
        """
        cycle_s = (prefill_ms_total + decode_ms * gen_len) / 1000.0
        return batch / cycle_s

    def kv_capacity_batch(self, spec: LLMSpec, kv_bytes: float, tokens_per_request: float) -> int:
        """Largest batch whose KV cache fits in ``kv_bytes``."""
        if kv_bytes <= 0:
            return 0
        return int(kv_bytes // (spec.kv_bytes_per_token * tokens_per_request))

    def estimate_throughput(self, spec: LLMSpec, num_sm: float, tp: int, workload_rate: float,
                            peers: Iterable[PeerLoad] = (), gen_len: Optional[float] = None,
                            prompt_len: Optional[float] = None,
                            max_batch: Optional[int] = None) -> ThroughputEstimate:
        """
        Throughput of ``spec`` at (num_sm, tp) against ``workload_rate``.

        Binary-searches the smallest batch whose stable-batch throughput meets
        the rate. When even ``max_batch`` falls short, returns that batch with
        its lower throughput and ``saturated=True``.
        """
        if workload_rate <= 0:
            raise ValueError(f"workload_rate must be positive, got {workload_rate}")
        gen_len = gen_len or self.default_gen_len
        prompt_len = prompt_len or self.default_prompt_len
        if gen_len < 1:
            raise ValueError(f"gen_len must be >= 1, got {gen_len}")
        max_batch = max(1, max_batch if max_batch is not None else self.default_max_batch)
        cfg = ExecConfig(tp, num_sm)
        peers = list(peers)
        peer_prefill_ms = sum(
            self.prefill_latency(peer.spec, cfg, peer.batch,
                                 max(peer.batch, math.ceil(peer.batch * prompt_len)))
            for peer in peers
        )
        avg_context = prompt_len + gen_len / 2.0

        def raw(batch: int) -> float:
            own_prefill = self.prefill_latency(spec, cfg, batch,
                                               max(batch, math.ceil(batch * prompt_len)))
            decode = self.decode_step_latency(spec, cfg, batch, avg_context)
            return self.stable_batch_throughput(batch, own_prefill + peer_prefill_ms,
                                                decode, gen_len)

        top = raw(max_batch)
        if top < workload_rate:
            return ThroughputEstimate(top, max_batch, True, top)

        lo, hi = 1, max_batch
        while lo < hi:
            mid = (lo + hi) // 2
            if raw(mid) >= workload_rate:
                hi = mid
            else:
                lo = mid + 1
        found = raw(lo)
        return ThroughputEstimate(min(found, workload_rate), lo, False, found)
