"""
Evaluation report of one simulation run.
"""
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional


@dataclass
class MetricsReport:
    """
    Throughput, SLO attainment and tail latencies of a run.

    Percentiles use the nearest-rank method. ``p99_latency_s`` is the tail of
    per-request average latency, i.e. total latency divided by output length.
    Tail values are ``None`` when no request finished.
    """

    horizon_s: float
    total_requests: int
    finished_requests: int
    per_llm_throughput: Dict[str, float]
    aggregated_throughput: float
    slo_attainment: Dict[str, float]
    p99_latency_s: Optional[float] = None
    p99_ttft_s: Optional[float] = None
    p99_tpot_s: Optional[float] = None
    token_block_usage: Dict[str, float] = field(default_factory=dict)
    fairness_gap: Optional[float] = None

    def to_dict(self) -> Dict:
        return asdict(self)
