"""
Scheduler state: jobs, request lifecycles and per-LLM queues.
"""
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Tuple

from django.conf import settings

from apps.workload.domain import Request

PREFILL = 'prefill'
DECODE = 'decode'

WAITING = 'waiting'
PREFILLING = 'prefilling'
DECODING = 'decoding'
DONE = 'done'
REJECTED = 'rejected'

# a request only ever moves forward through these phases
PHASE_ORDER = {WAITING: 0, PREFILLING: 1, DECODING: 2, DONE: 3, REJECTED: 3}

SCHEDULER_KINDS = ('adbs', 'fcfs', 'round_robin')


@dataclass
class Job:
    """One prefill batch or one decode iteration of a single LLM."""

    llm: str
    kind: str
    request_ids: Tuple[int, ...]
    sm: float
    tokens: int = 0
    start_ms: float = 0.0
    duration_ms: float = 0.0
    id: int = 0

    def __post_init__(self):
        if not self.request_ids:
            raise ValueError(f"{self.kind} job for {self.llm} has no requests")
        if not 0 < self.sm <= 1.0 + 1e-9:
            raise ValueError(f"job SM demand must be in (0, 1], got {self.sm}")

    @property
    def batch(self) -> int:
        return len(self.request_ids)

    @property
    def end_ms(self) -> float:
        return self.start_ms + self.duration_ms


@dataclass
class RequestState:
    request: Request
    phase: str = WAITING
    generated: int = 0
    lifetime_blocks: int = 0
    first_token_ms: Optional[float] = None
    done_ms: Optional[float] = None

    @property
    def id(self) -> int:
        return self.request.id

    def advance_to(self, phase: str) -> None:
        if PHASE_ORDER[phase] <= PHASE_ORDER[self.phase]:
            raise ValueError(f"request {self.id} cannot move from {self.phase} to {phase}")
        self.phase = phase


@dataclass
class LLMQueue:
    """Per-LLM bookkeeping: FIFO wait queue, decode batch and the running job."""

    name: str
    waiting: Deque[int] = field(default_factory=deque)
    decoding: List[int] = field(default_factory=list)
    in_flight: int = 0
    lifetime_blocks: int = 0
    running: Optional[Job] = None

    @property
    def idle(self) -> bool:
        return self.running is None


@dataclass(frozen=True)
class SchedulerConfig:
    kind: str = 'adbs'
    prefill_token_budget: int = 4096
    min_prefill_sm: float = 0.3
    decode_sm: float = 0.5
    max_batch: int = 256

    def __post_init__(self):
        if self.kind not in SCHEDULER_KINDS:
            raise ValueError(f"unknown scheduler {self.kind!r}; choose from {SCHEDULER_KINDS}")
        if self.prefill_token_budget < 1 or self.max_batch < 1:
            raise ValueError("prefill_token_budget and max_batch must be positive")
        for name in ('min_prefill_sm', 'decode_sm'):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ValueError(f"{name} must be in (0, 1], got {value}")

    @classmethod
    def from_settings(cls, **overrides) -> 'SchedulerConfig':
        defaults = getattr(settings, 'MUXSIM_DEFAULTS', {})
        values = {
            'prefill_token_budget': defaults.get('prefill_token_budget', 4096),
            'min_prefill_sm': defaults.get('min_prefill_sm', 0.3),
            'decode_sm': defaults.get('decode_sm', defaults.get('sm_saturation', 0.5)),
            'max_batch': defaults.get('max_batch', 256),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class SchedulerState:
    """Everything the schedulers read and mutate for one LLM unit."""

    queues: Dict[str, LLMQueue]
    requests: Dict[int, RequestState] = field(default_factory=dict)
    prefill_waiting: bool = False
    prefill_cursor: int = 0
    decode_cursor: int = 0
    holder: Optional[str] = None

    @classmethod
    def for_llms(cls, names: List[str]) -> 'SchedulerState':
        return cls(queues={name: LLMQueue(name) for name in names})

    @property
    def order(self) -> List[str]:
        return list(self.queues)

    def running_jobs(self) -> List[Job]:
        return [q.running for q in self.queues.values() if q.running is not None]

    def prefill_running(self) -> bool:
        return any(job.kind == PREFILL for job in self.running_jobs())

    def phase_counts(self) -> Dict[str, int]:
        counts = {phase: 0 for phase in PHASE_ORDER}
        for state in self.requests.values():
            counts[state.phase] += 1
        return counts
