"""
Job schedulers for one LLM unit.

All three schedulers share the same per-LLM mechanics: a FIFO wait queue,
prefill batches bounded by a token budget, one decode iteration per decode
job, and at most one running job per LLM. They differ in who gets the unit:

* ``AdbsScheduler`` colocates one prefill with decodes of other LLMs under an
  SM budget and per-LLM token-block quotas.
* ``FcfsScheduler`` hands the whole unit to the LLM owning the earliest
  waiting request until its batch window drains.
* ``RoundRobinScheduler`` gives each LLM with work one job per turn.

KV admission reserves a request's whole lifetime (prompt plus output tokens)
when it is admitted, so a running request can always grow to completion.
"""
import logging
import math
from typing import Dict, List, Mapping, Optional, Tuple

from apps.cost_model.domain import LLMSpec
from apps.kv_manager.services import BlockPool, blocks_per_token
from apps.workload.domain import Request

from .domain import (
    DECODE,
    DECODING,
    DONE,
    PREFILL,
    PREFILLING,
    REJECTED,
    Job,
    RequestState,
    SchedulerConfig,
    SchedulerState,
)

logger = logging.getLogger(__name__)

SM_EPSILON = 1e-9


class BaseScheduler:
    """Request lifecycle and KV admission shared by every policy."""

    kind = 'base'

    def __init__(self, specs: Mapping[str, LLMSpec], pool: BlockPool,
                 config: Optional[SchedulerConfig] = None, record_decisions: bool = False):
        self.specs = dict(specs)
        self.pool = pool
        self.config = config or SchedulerConfig.from_settings(kind=self.kind)
        self.state = SchedulerState.for_llms(list(self.specs))
        self.record_decisions = record_decisions
        self.decisions: List[Dict] = []
        self._next_job_id = 0

    # Lifecycle

    def submit(self, request: Request, now_ms: float) -> RequestState:
        if request.llm not in self.state.queues:
            raise KeyError(f"request {request.id} targets {request.llm!r}, not served by this unit")
        lifetime = self.pool.blocks_for(request.llm, request.prompt_len + request.output_len)
        state = RequestState(request, lifetime_blocks=lifetime)
        self.state.requests[request.id] = state
        if lifetime > self.pool.total_blocks:
            state.advance_to(REJECTED)
            logger.warning(f"Request {request.id} of {request.llm} needs {lifetime} blocks, "
                           f"more than the {self.pool.total_blocks}-block pool; rejected")
            self._log(now_ms, 'reject', request.llm, PREFILL, 0.0, 1)
            return state
        self.state.queues[request.llm].waiting.append(request.id)
        return state

    def complete(self, job: Job, now_ms: float) -> List[RequestState]:
        """Apply a finished job; returns the requests that completed with it."""
        queue = self.state.queues[job.llm]
        if queue.running is not job:
            raise ValueError(f"job {job.id} is not the running job of {job.llm}")
        queue.running = None
        finished = []
        for rid in job.request_ids:
            state = self.state.requests[rid]
            state.generated += 1
            if job.kind == PREFILL:
                state.first_token_ms = now_ms
                if state.generated < state.request.output_len:
                    state.advance_to(DECODING)
                    queue.decoding.append(rid)
            if state.generated >= state.request.output_len:
                if rid in queue.decoding:
                    queue.decoding.remove(rid)
                self._finish(state, now_ms)
                finished.append(state)
        return finished

    def _finish(self, state: RequestState, now_ms: float) -> None:
        queue = self.state.queues[state.request.llm]
        state.advance_to(DONE)
        state.done_ms = now_ms
        self.pool.free(state.id)
        queue.in_flight -= 1
        queue.lifetime_blocks -= state.lifetime_blocks

    # Admission

    def outstanding_blocks(self) -> int:
        """Blocks promised to in-flight requests but not yet allocated."""
        promised = sum(q.lifetime_blocks for q in self.state.queues.values())
        return promised - sum(self.pool.used.values())

    def prefill_batch(self, llm: str, enforce_quota: bool,
                      arrival_limit: Optional[float] = None) -> List[int]:
        """
        FIFO prefix of ``llm``'s queue that can be admitted now.

        A batch holds at least one request when any is admissible and stops at
        the token budget. An LLM with nothing in flight may always admit its
        head request if the pool can hold it, whatever its quota. In-flight
        requests never exceed ``max_batch``, so all of them fit one decode step.
        """
        queue = self.state.queues[llm]
        available = self.pool.free_blocks - self.outstanding_blocks()
        quota_room = self.pool.quotas[llm] - queue.lifetime_blocks
        batch, tokens, need = [], 0, 0
        for rid in queue.waiting:
            request = self.state.requests[rid].request
            lifetime = self.state.requests[rid].lifetime_blocks
            if arrival_limit is not None and request.arrival_s > arrival_limit:
                break
            if queue.in_flight + len(batch) >= self.config.max_batch:
                break
            if batch and tokens + request.prompt_len > self.config.prefill_token_budget:
                break
            if need + lifetime > available:
                break
            exempt = queue.in_flight == 0 and not batch
            if enforce_quota and need + lifetime > quota_room and not exempt:
                break
            batch.append(rid)
            tokens += request.prompt_len
            need += lifetime
        return batch

    # Launch

    def launch_prefill(self, llm: str, request_ids: List[int], sm: float, now_ms: float) -> Job:
        queue = self.state.queues[llm]
        for rid in request_ids:
            if queue.waiting[0] != rid:
                raise ValueError(f"prefill of {llm} must take its queue head, got request {rid}")
            queue.waiting.popleft()
            state = self.state.requests[rid]
            state.advance_to(PREFILLING)
            self.pool.alloc(llm, rid, state.request.prompt_len, enforce_quota=False)
            queue.in_flight += 1
            queue.lifetime_blocks += state.lifetime_blocks
        tokens = sum(self.state.requests[rid].request.prompt_len for rid in request_ids)
        job = self._new_job(llm, PREFILL, request_ids, sm, tokens, now_ms)
        queue.running = job
        return job

    def launch_decode(self, llm: str, sm: float, now_ms: float) -> Job:
        queue = self.state.queues[llm]
        request_ids = queue.decoding[:self.config.max_batch]
        context = 0
        for rid in request_ids:
            state = self.state.requests[rid]
            context += state.request.prompt_len + state.generated
            self.pool.alloc(llm, rid, 1, enforce_quota=False)
        job = self._new_job(llm, DECODE, request_ids, sm, context, now_ms)
        queue.running = job
        return job

    def _new_job(self, llm: str, kind: str, request_ids: List[int], sm: float, tokens: int,
                 now_ms: float) -> Job:
        job = Job(llm, kind, tuple(request_ids), min(sm, 1.0), tokens=tokens, start_ms=now_ms,
                  id=self._next_job_id)
        self._next_job_id += 1
        self._log(now_ms, 'launch', llm, kind, job.sm, job.batch)
        return job

    def _log(self, now_ms: float, action: str, llm: str, kind: str, sm: float, batch: int,
             **extra) -> None:
        if not self.record_decisions:
            return
        entry = {'time_s': round(now_ms / 1000.0, 9), 'action': action, 'llm': llm,
                 'kind': kind, 'sm': round(sm, 6), 'batch': batch}
        entry.update(extra)
        self.decisions.append(entry)

    # Policy

    def schedule(self, now_ms: float, free_sm: float) -> List[Job]:
        raise NotImplementedError

    def has_work(self) -> bool:
        return any(q.waiting or q.in_flight for q in self.state.queues.values())


class AdbsScheduler(BaseScheduler):
    """
    Adaptive batch scheduling.

    When no prefill runs, the next LLM with queued requests (round robin)
    gets a prefill, taking the free SMs minus one decode share when another
    LLM is ready to decode. A prefill that cannot launch raises
    ``prefill_waiting``, which holds back new decodes so SMs drain towards it;
    decodes still launch when nothing at all is running.
    """

    kind = 'adbs'

    def schedule(self, now_ms: float, free_sm: float) -> List[Job]:
        state = self.state
        order = state.order
        jobs = []

        if not state.prefill_running():
            chosen = None
            for k in range(len(order)):
                index = (state.prefill_cursor + k) % len(order)
                queue = state.queues[order[index]]
                if queue.idle and queue.waiting and queue.in_flight < self.config.max_batch:
                    chosen = index
                    break
            if chosen is None:
                state.prefill_waiting = False
            else:
                state.prefill_waiting = True
                llm = order[chosen]
                state.prefill_cursor = (chosen + 1) % len(order)
                sm = self._prefill_share(llm, free_sm)
                batch = self.prefill_batch(llm, enforce_quota=True)
                if sm + SM_EPSILON >= self.config.min_prefill_sm and batch:
                    jobs.append(self.launch_prefill(llm, batch, sm, now_ms))
                    free_sm -= sm
                    state.prefill_waiting = False
                else:
                    reason = 'sm' if sm + SM_EPSILON < self.config.min_prefill_sm else self._block_reason(llm)
                    self._log(now_ms, 'blocked', llm, PREFILL, sm, 0, reason=reason)

        if state.prefill_waiting and (jobs or state.running_jobs()):
            return jobs

        decode_sm = self.config.decode_sm
        for k in range(len(order)):
            if free_sm + SM_EPSILON < decode_sm:
                break
            index = (state.decode_cursor + k) % len(order)
            queue = state.queues[order[index]]
            if queue.idle and queue.decoding:
                jobs.append(self.launch_decode(queue.name, decode_sm, now_ms))
                free_sm -= decode_sm
                state.decode_cursor = (index + 1) % len(order)
        return jobs

    def _prefill_share(self, llm: str, free_sm: float) -> float:
        others_decode = any(q.idle and q.decoding for name, q in self.state.queues.items()
                            if name != llm)
        reduced = free_sm - self.config.decode_sm
        if others_decode and reduced + SM_EPSILON >= self.config.min_prefill_sm:
            return reduced
        return free_sm

    def _block_reason(self, llm: str) -> str:
        if self.prefill_batch(llm, enforce_quota=False):
            return 'quota'
        return 'pool'


class FcfsScheduler(BaseScheduler):
    """Temporal multiplexing in order of the earliest waiting request."""

    kind = 'fcfs'

    def _arrival_limit(self, holder: str) -> float:
        heads = [self.state.requests[q.waiting[0]].request.arrival_s
                 for name, q in self.state.queues.items() if name != holder and q.waiting]
        return min(heads, default=math.inf)

    def _window_batch(self, holder: str) -> List[int]:
        return self.prefill_batch(holder, enforce_quota=False,
                                  arrival_limit=self._arrival_limit(holder))

    def _next_holder(self) -> Optional[str]:
        best: Optional[Tuple[float, int]] = None
        holder = None
        for index, (name, queue) in enumerate(self.state.queues.items()):
            if not queue.waiting:
                continue
            key = (self.state.requests[queue.waiting[0]].request.arrival_s, index)
            if best is None or key < best:
                best, holder = key, name
        if holder is None:
            holder = next((name for name, q in self.state.queues.items() if q.in_flight), None)
        return holder

    def schedule(self, now_ms: float, free_sm: float) -> List[Job]:
        if self.state.running_jobs():
            return []
        holder = self.state.holder
        if holder is None or not (self.state.queues[holder].in_flight or self._window_batch(holder)):
            holder = self._next_holder()
            if holder is None:
                return []
            if holder != self.state.holder:
                self._log(now_ms, 'hold', holder, PREFILL, free_sm, 0)
            self.state.holder = holder

        queue = self.state.queues[holder]
        batch = self._window_batch(holder)
        if batch:
            return [self.launch_prefill(holder, batch, free_sm, now_ms)]
        if queue.decoding:
            return [self.launch_decode(holder, self.config.decode_sm, now_ms)]
        return []


class RoundRobinScheduler(BaseScheduler):
    """Temporal multiplexing, one job per LLM per turn."""

    kind = 'round_robin'

    def schedule(self, now_ms: float, free_sm: float) -> List[Job]:
        if self.state.running_jobs():
            return []
        order = self.state.order
        for k in range(len(order)):
            index = (self.state.prefill_cursor + k) % len(order)
            llm = order[index]
            batch = self.prefill_batch(llm, enforce_quota=False)
            if batch:
                self.state.prefill_cursor = (index + 1) % len(order)
                return [self.launch_prefill(llm, batch, free_sm, now_ms)]
            if self.state.queues[llm].decoding:
                self.state.prefill_cursor = (index + 1) % len(order)
                return [self.launch_decode(llm, self.config.decode_sm, now_ms)]
        return []


SCHEDULERS = {
    'adbs': AdbsScheduler,
    'fcfs': FcfsScheduler,
    'round_robin': RoundRobinScheduler,
}


def make_scheduler(kind: str, specs: Mapping[str, LLMSpec], pool: BlockPool,
                   config: Optional[SchedulerConfig] = None,
                   record_decisions: bool = False) -> BaseScheduler:
    kind = kind.replace('-', '_')
    if kind == 'rr':
        kind = 'round_robin'
    if kind not in SCHEDULERS:
        raise ValueError(f"unknown scheduler {kind!r}; choose from {sorted(SCHEDULERS)}")
    return SCHEDULERS[kind](specs, pool, config, record_decisions)


def resource_usage(average_blocks: Mapping[str, float], rates: Mapping[str, float],
                   specs: Mapping[str, LLMSpec], lengths: Mapping[str, Tuple[float, float]],
                   block_tokens: int) -> Dict[str, float]:
    """
    Normalized token-block usage R per LLM.

    R is an LLM's share of the time-averaged blocks divided by its share of
    expected demand (rate x blocks per token x mean request tokens); it is 1
    when usage is exactly demand-proportional. Zero-rate LLMs get 0.
    """
    demand = {
        name: rates.get(name, 0.0) * blocks_per_token(specs[name], block_tokens) * sum(lengths[name])
        for name in specs
    }
    total_demand = sum(demand.values())
    total_blocks = sum(average_blocks.get(name, 0.0) for name in specs)
    usage = {}
    for name in specs:
        if demand[name] <= 0 or total_demand <= 0 or total_blocks <= 0:
            usage[name] = 0.0
            continue
        usage[name] = (average_blocks.get(name, 0.0) / total_blocks) / (demand[name] / total_demand)
    return usage


def fairness_gap(usage: Mapping[str, float], rates: Mapping[str, float]) -> float:
    """Largest |R_i - R_j| over LLMs with positive rate."""
    values = [usage[name] for name in usage if rates.get(name, 0.0) > 0]
    if len(values) < 2:
        return 0.0
    return max(values) - min(values)


def is_fair(usage: Mapping[str, float], rates: Mapping[str, float], epsilon: float) -> bool:
    return fairness_gap(usage, rates) <= epsilon + 1e-12
