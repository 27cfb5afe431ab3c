"""
Discrete-event simulation of a placement serving a request trace.

Each LLM unit (mesh plus its colocated LLMs) runs its own event loop with a
private block pool and scheduler; units share nothing, so a run is the
concatenation of per-unit runs merged by unit index. Time is kept in
milliseconds inside the loop and reported in seconds.
"""
from dataclasses import replace
import heapq
import itertools
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from apps.cost_model.domain import ExecConfig
from apps.cost_model.services import LatencyModel
from apps.kv_manager.domain import MemoryLayout
from apps.kv_manager.services import BlockPool, block_bytes, init_token_block_quota
from apps.placement.domain import Cluster, LLMUnit, PlacementResult
from apps.scheduler.domain import PREFILL, REJECTED, Job, SchedulerConfig
from apps.scheduler.services import BaseScheduler, make_scheduler
from apps.workload.domain import Request

from .domain import (
    ARRIVAL,
    JOB_DONE,
    QUOTA_TICK,
    RECORD_COLUMNS,
    RequestRecord,
    SimulationConfig,
    SimulationResult,
    TracePlacementMismatch,
)

logger = logging.getLogger(__name__)

SM_BUDGET = 1.0
SM_EPSILON = 1e-9


def interference_adjust(sm_demands: Sequence[float], kappa: float) -> List[float]:
    """
    Duration multipliers for jobs sharing a GPU.

    Each job is slowed by ``1 + kappa * (sum of the other jobs' SM demand)``.
    """
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    total = float(sum(sm_demands))
    return [1.0 + kappa * (total - own) for own in sm_demands]


def trace_rates(trace: Iterable[Request], horizon_s: float) -> Tuple[Dict[str, float], Dict[str, Tuple[float, float]]]:
    """Observed per-LLM rate and mean (prompt, output) lengths of a trace."""
    frame = pd.DataFrame([(r.llm, r.prompt_len, r.output_len) for r in trace],
                         columns=['llm', 'prompt_len', 'output_len'])
    if frame.empty:
        return {}, {}
    grouped = frame.groupby('llm', sort=True)
    counts = grouped.size()
    means = grouped[['prompt_len', 'output_len']].mean()
    rates = {llm: float(count) / horizon_s for llm, count in counts.items()}
    lengths = {llm: (float(row.prompt_len), float(row.output_len)) for llm, row in means.iterrows()}
    return rates, lengths


class UnitSimulator:
    """
    Event loop for one LLM unit.

    Events are ``(time_ms, order, seq, payload)`` heap entries; ``order``
    puts job completions before arrivals before quota ticks at equal times
    and ``seq`` keeps insertion order after that. The scheduler only runs once
    every event of the current instant has been applied.
    """

    def __init__(self, unit: LLMUnit, index: int, cluster: Cluster, requests: Sequence[Request],
                 model: LatencyModel, config: SimulationConfig,
                 scheduler_config: Optional[SchedulerConfig] = None,
                 rates: Optional[Mapping[str, float]] = None,
                 lengths: Optional[Mapping[str, Tuple[float, float]]] = None):
        self.unit = unit
        self.index = index
        self.model = model
        self.config = config
        self.specs = {placed.spec.name: placed.spec for placed in unit.llms}
        self.tp = {placed.spec.name: placed.candidate.tp_degree for placed in unit.llms}
        self.requests = sorted(requests, key=lambda r: (r.arrival_s, r.id))

        self.layout = MemoryLayout.for_unit(cluster.gpu_memory_bytes * unit.mesh.size,
                                            self.specs.values(), config.activation_reserve)
        total_blocks = self.layout.kv_bytes // block_bytes(self.specs.values(), config.block_tokens)
        rates = rates or {}
        lengths = lengths or {}
        quotas = init_token_block_quota(
            self.specs, {name: rates.get(name, 0.0) for name in self.specs},
            {name: lengths.get(name, (0.0, 0.0)) for name in self.specs},
            total_blocks, block_tokens=config.block_tokens, floor_fraction=config.quota_floor,
        )
        self.pool = BlockPool(total_blocks, self.specs, config.block_tokens, quotas)
        scheduler_config = scheduler_config or SchedulerConfig.from_settings(kind=config.scheduler)
        self.scheduler: BaseScheduler = make_scheduler(config.scheduler, self.specs, self.pool,
                                                       scheduler_config, config.record_decisions)

        self._events: List[Tuple[float, int, int, object]] = []
        self._seq = itertools.count()
        self._pending_arrivals = 0
        self.now_ms = 0.0
        self.stalled = False

    @property
    def adapts(self) -> bool:
        return self.config.adapt_quota and self.scheduler.kind == 'adbs'

    def _push(self, time_ms: float, order: int, payload=None) -> None:
        heapq.heappush(self._events, (time_ms, order, next(self._seq), payload))

    # Job timing

    def job_duration_ms(self, job: Job) -> float:
        spec = self.specs[job.llm]
        cfg = ExecConfig(self.tp[job.llm], job.sm)
        if job.kind == PREFILL:
            return self.model.prefill_latency(spec, cfg, job.batch, job.tokens)
        return self.model.decode_step_latency(spec, cfg, job.batch, job.tokens / job.batch)

    def _launch_pass(self) -> None:
        running = self.scheduler.state.running_jobs()
        free_sm = SM_BUDGET - sum(job.sm for job in running)
        launched = self.scheduler.schedule(self.now_ms, max(0.0, free_sm))
        if not launched:
            return
        running = self.scheduler.state.running_jobs()
        demands = [job.sm for job in running]
        if sum(demands) > SM_BUDGET + SM_EPSILON:
            raise AssertionError(f"unit {self.index}: SM demand {sum(demands):.6f} exceeds the GPU "
                                 f"at t={self.now_ms:.3f} ms")
        multipliers = dict(zip((job.id for job in running),
                               interference_adjust(demands, self.config.interference)))
        for job in launched:
            job.duration_ms = self.job_duration_ms(job) * multipliers[job.id]
            self._push(job.end_ms, JOB_DONE, job)

    # Loop

    def run(self, horizon_s: Optional[float] = None) -> SimulationResult:
        horizon_ms = horizon_s * 1000.0 if horizon_s is not None else None
        for request in self.requests:
            self._push(request.arrival_s * 1000.0, ARRIVAL, request)
        self._pending_arrivals = len(self.requests)
        period_ms = self.config.adapt_period_s * 1000.0
        if self.adapts and self.requests:
            self._push(period_ms, QUOTA_TICK)
        dirty = False

        while self._events:
            time_ms, order, _, payload = self._events[0]
            if horizon_ms is not None and time_ms > horizon_ms:
                break
            heapq.heappop(self._events)
            self.now_ms = time_ms
            self.pool.advance(time_ms / 1000.0)
            if order == JOB_DONE:
                self.scheduler.complete(payload, time_ms)
                dirty = True
            elif order == ARRIVAL:
                self._pending_arrivals -= 1
                self.scheduler.submit(payload, time_ms)
                dirty = True
            else:
                changed = self.pool.adapt(self.config.quota_floor, low_mark=self.config.low_mark,
                                          high_mark=self.config.high_mark,
                                          step=self.config.quota_step)
                dirty = dirty or changed
                if self._pending_arrivals or self.scheduler.has_work():
                    self._push(time_ms + period_ms, QUOTA_TICK)

            if self.config.debug_checks:
                self.pool.check_invariants()
            if self._events and self._events[0][0] == time_ms:
                continue
            if dirty:
                self._launch_pass()
                dirty = False

            if not self.scheduler.state.running_jobs() and self.scheduler.has_work():
                if not any(entry[1] != QUOTA_TICK for entry in self._events):
                    self.stalled = True
                    logger.warning(f"Unit {self.index} stalled at {time_ms / 1000.0:.3f}s with "
                                   f"{self.scheduler.state.phase_counts()} requests")
                    break

        end_s = horizon_s if horizon_s is not None else self.now_ms / 1000.0
        self.pool.advance(max(end_s, self.now_ms / 1000.0))
        return SimulationResult(self.records(), end_s, [self.pool_stats(end_s)],
                                [dict(entry, unit=self.index) for entry in self.scheduler.decisions],
                                self.stalled)

    # Results

    def records(self) -> List[RequestRecord]:
        records = []
        for request in self.requests:
            state = self.scheduler.state.requests.get(request.id)
            first = done = None
            if state is not None and state.phase != REJECTED:
                if state.first_token_ms is not None:
                    first = state.first_token_ms / 1000.0
                if state.done_ms is not None:
                    done = state.done_ms / 1000.0
            records.append(RequestRecord(request.id, request.llm, self.index, request.arrival_s,
                                         request.prompt_len, request.output_len, first, done))
        return records

    def pool_stats(self, horizon_s: float) -> Dict:
        return {
            'unit': self.index,
            'llms': list(self.specs),
            'total_blocks': self.pool.total_blocks,
            'kv_bytes': self.layout.kv_bytes,
            'quotas': dict(self.pool.quotas),
            'average_used': {name: self.pool.average_used(name, horizon_s) for name in self.specs},
            'history': list(self.pool.history),
        }


def check_trace(placement: PlacementResult, trace: Iterable[Request]) -> None:
    """
    Raises:
        TracePlacementMismatch: a trace LLM is not placed on any unit.
    """
    placed = set(placement.llm_names)
    missing = {request.llm for request in trace} - placed
    if missing:
        raise TracePlacementMismatch(list(missing))


def run(placement: PlacementResult, trace: Sequence[Request], cluster: Cluster,
        scheduler_kind: Optional[str] = None, model: Optional[LatencyModel] = None,
        config: Optional[SimulationConfig] = None,
        scheduler_config: Optional[SchedulerConfig] = None,
        horizon_s: Optional[float] = None,
        rates: Optional[Mapping[str, float]] = None,
        lengths: Optional[Mapping[str, Tuple[float, float]]] = None) -> SimulationResult:
    """
    Simulate every unit of ``placement`` against ``trace``.

    With ``horizon_s`` the run stops there and unfinished requests keep empty
    timings; without it every unit drains its queue. Quotas start from
    ``rates``/``lengths`` when given, otherwise from the trace itself.

    Raises:
        TracePlacementMismatch: before any simulation starts.
    """
    check_trace(placement, trace)
    config = config or SimulationConfig.from_settings()
    if scheduler_kind is not None:
        config = replace(config, scheduler=scheduler_kind)
    if config.horizon_s is not None and horizon_s is None:
        horizon_s = config.horizon_s
    model = model or LatencyModel()
    if rates is None or lengths is None:
        span = horizon_s or max((r.arrival_s for r in trace), default=0.0) or 1.0
        observed_rates, observed_lengths = trace_rates(trace, span)
        rates = rates if rates is not None else observed_rates
        lengths = lengths if lengths is not None else observed_lengths

    by_unit: Dict[int, List[Request]] = {index: [] for index in range(len(placement.units))}
    for request in trace:
        by_unit[placement.unit_of(request.llm)].append(request)

    results = []
    for index, unit in enumerate(placement.units):
        simulator = UnitSimulator(unit, index, cluster, by_unit[index], model, config,
                                  scheduler_config, rates, lengths)
        results.append(simulator.run(horizon_s))

    records = sorted((record for result in results for record in result.records), key=lambda r: r.id)
    end_s = horizon_s if horizon_s is not None else max((r.horizon_s for r in results), default=0.0)
    merged = SimulationResult(
        records=records,
        horizon_s=end_s,
        pool_stats=[stats for result in results for stats in result.pool_stats],
        decisions=[entry for result in results for entry in result.decisions],
        stalled=any(result.stalled for result in results),
    )
    finished = sum(1 for record in records if record.finished)
    logger.info(f"Simulated {len(records)} requests on {len(placement.units)} units with "
                f"{config.scheduler}: {finished} finished within {end_s:.1f}s")
    return merged


# Output

def records_frame(records: Iterable[RequestRecord]) -> pd.DataFrame:
    frame = pd.DataFrame([record.as_row() for record in records], columns=RECORD_COLUMNS)
    return frame.sort_values('id', kind='stable').reset_index(drop=True)


def write_records(records: Iterable[RequestRecord], path: Union[str, Path]) -> Path:
    """CSV ``id,llm,arrival_s,ttft_s,tpot_s,done_s``; unfinished timings are empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records_frame(records).to_csv(path, index=False, na_rep='', float_format='%.9f')
    return path


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_pool_stats(result: SimulationResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(_jsonable(result.pool_stats), f, indent=2, sort_keys=True)
    return path


def write_decisions(result: SimulationResult, path: Union[str, Path]) -> Path:
    """One JSON object per scheduling decision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        for entry in result.decisions:
            f.write(json.dumps(_jsonable(entry), sort_keys=True) + '\n')
    return path
