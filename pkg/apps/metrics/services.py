"""
Metrics over simulation records.
"""
import json
import logging
import math
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from django.conf import settings

from apps.cost_model.domain import LLMSpec
from apps.cost_model.services import LatencyModel
from apps.placement.domain import PlacementResult
from apps.sim_engine.domain import RequestRecord, SimulationResult

from .domain import MetricsReport

logger = logging.getLogger(__name__)

SLO_TOLERANCE = 1e-9


def percentile(values: Iterable[float], q: float) -> float:
    """
    Nearest-rank percentile: the smallest value with at least ``q`` percent
    of the sample at or below it.

    Raises:
        ValueError: on an empty sample or ``q`` outside (0, 100].
    """
    data = np.sort(np.asarray(list(values), dtype=float))
    if data.size == 0:
        raise ValueError("percentile of an empty sample")
    if not 0 < q <= 100:
        raise ValueError(f"q must be in (0, 100], got {q}")
    rank = max(1, math.ceil(q / 100.0 * data.size - 1e-9))
    return float(data[rank - 1])


def p99(values: Iterable[float]) -> float:
    return percentile(values, 99)


def per_llm_throughput(records: Iterable[RequestRecord], horizon_s: float,
                       llms: Optional[Iterable[str]] = None) -> Dict[str, float]:
    """
    Finished requests per second of each LLM.

    A zero-length run with nothing finished, e.g. an empty trace, has zero
    throughput.
    """
    frame = pd.DataFrame([(r.llm, r.finished) for r in records], columns=['llm', 'finished'])
    counts = frame[frame['finished']].groupby('llm').size() if not frame.empty else pd.Series(dtype=int)
    names = list(llms) if llms is not None else sorted(frame['llm'].unique())
    if horizon_s < 0 or (horizon_s == 0 and counts.sum() > 0):
        raise ValueError(f"horizon_s must be positive, got {horizon_s}")
    if horizon_s == 0:
        return {name: 0.0 for name in names}
    return {name: float(counts.get(name, 0)) / horizon_s for name in names}


def aggregated_throughput(records: Sequence[RequestRecord], rates: Mapping[str, float],
                          horizon_s: float) -> float:
    """
    Rate-weighted mean of per-LLM throughputs.

    LLMs without a rate are ignored; an empty record set gives 0.
    """
    if not records:
        return 0.0
    total_rate = sum(rate for rate in rates.values() if rate > 0)
    if total_rate <= 0:
        return 0.0
    tpt = per_llm_throughput(records, horizon_s, llms=rates)
    return sum(rates[name] / total_rate * tpt[name] for name in rates if rates[name] > 0)


class ReferenceLatency:
    """Unqueued single-request latency (seconds) at full SMs and the deployed tp."""

    def __init__(self, specs: Mapping[str, LLMSpec], tp_degrees: Mapping[str, int],
                 model: Optional[LatencyModel] = None):
        self.specs = dict(specs)
        self.tp_degrees = dict(tp_degrees)
        self.model = model or LatencyModel()
        self._latency = lru_cache(maxsize=None)(self._compute)

    @classmethod
    def for_placement(cls, placement: PlacementResult,
                      model: Optional[LatencyModel] = None) -> 'ReferenceLatency':
        specs, tp = {}, {}
        for unit in placement.units:
            for placed in unit.llms:
                specs[placed.spec.name] = placed.spec
                tp[placed.spec.name] = placed.candidate.tp_degree
        return cls(specs, tp, model)

    def _compute(self, llm: str, prompt_len: int, output_len: int) -> float:
        spec = self.specs[llm]
        return self.model.reference_latency_ms(spec, self.tp_degrees[llm], prompt_len, output_len) / 1000.0

    def __call__(self, record: RequestRecord) -> float:
        return self._latency(record.llm, record.prompt_len, record.output_len)


def slo_attainment(records: Sequence[RequestRecord], slo_scale: float, reference_latency) -> float:
    """
    Fraction of requests finished within ``slo_scale`` times their reference
    latency. Unfinished requests count as misses; no requests gives 1.
    """
    if slo_scale <= 0:
        raise ValueError(f"slo_scale must be positive, got {slo_scale}")
    if not records:
        return 1.0
    met = 0
    for record in records:
        if not record.finished:
            continue
        target = slo_scale * reference_latency(record)
        if record.latency_s <= target * (1 + SLO_TOLERANCE) + SLO_TOLERANCE:
            met += 1
    return met / len(records)


def records_table(records: Iterable[RequestRecord]) -> pd.DataFrame:
    rows = [dict(record.as_row(), latency_s=record.latency_s, output_len=record.output_len)
            for record in records]
    return pd.DataFrame(rows, columns=['id', 'llm', 'arrival_s', 'ttft_s', 'tpot_s', 'done_s',
                                       'latency_s', 'output_len'])


def per_llm_summary(records: Iterable[RequestRecord], horizon_s: float) -> pd.DataFrame:
    """Per-LLM request counts, throughput and mean TTFT/TPOT of finished requests."""
    frame = records_table(records)
    if frame.empty:
        return pd.DataFrame(columns=['llm', 'requests', 'finished', 'throughput', 'mean_ttft_s', 'mean_tpot_s'])
    frame['finished'] = frame['done_s'].notna()
    summary = frame.groupby('llm', sort=True).agg(
        requests=('id', 'count'),
        finished=('finished', 'sum'),
        mean_ttft_s=('ttft_s', 'mean'),
        mean_tpot_s=('tpot_s', 'mean'),
    ).reset_index()
    summary['throughput'] = summary['finished'] / horizon_s
    return summary[['llm', 'requests', 'finished', 'throughput', 'mean_ttft_s', 'mean_tpot_s']]


def build_report(result: SimulationResult, rates: Mapping[str, float], reference_latency,
                 slo_scales: Optional[Sequence[float]] = None,
                 usage: Optional[Mapping[str, float]] = None,
                 fairness: Optional[float] = None) -> MetricsReport:
    slo_scales = slo_scales or getattr(settings, 'MUXSIM_DEFAULTS', {}).get('slo_scales', [1, 2, 4, 8, 16])
    records = result.records
    finished = [record for record in records if record.finished]
    tails = {}
    if finished:
        tails = {
            'p99_latency_s': p99(r.latency_s / r.output_len for r in finished),
            'p99_ttft_s': p99(r.ttft_s for r in finished),
            'p99_tpot_s': p99(r.tpot_s for r in finished),
        }
    report = MetricsReport(
        horizon_s=result.horizon_s,
        total_requests=len(records),
        finished_requests=len(finished),
        per_llm_throughput=per_llm_throughput(records, result.horizon_s, llms=sorted(rates)),
        aggregated_throughput=aggregated_throughput(records, rates, result.horizon_s),
        slo_attainment={f"{scale:g}": slo_attainment(records, scale, reference_latency)
                        for scale in slo_scales},
        token_block_usage=dict(usage or {}),
        fairness_gap=fairness,
        **tails,
    )
    logger.info(f"{report.finished_requests}/{report.total_requests} requests finished, "
                f"aggregated throughput {report.aggregated_throughput:.3f} req/s")
    return report


def write_report(report: MetricsReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    return path
