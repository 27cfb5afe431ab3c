"""
Simulation records, configuration and results.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from django.conf import settings

JOB_DONE = 0
ARRIVAL = 1
QUOTA_TICK = 2

RECORD_COLUMNS = ['id', 'llm', 'arrival_s', 'ttft_s', 'tpot_s', 'done_s']


class TracePlacementMismatch(ValueError):
    """The trace names LLMs that the placement does not serve."""

    def __init__(self, missing: List[str]):
        self.missing = sorted(missing)
        super().__init__(f"trace LLMs missing from placement: {', '.join(self.missing)}")


@dataclass(frozen=True)
class RequestRecord:
    """Timing of one request; unfinished requests carry ``None`` timings."""

    id: int
    llm: str
    unit: int
    arrival_s: float
    prompt_len: int
    output_len: int
    first_token_s: Optional[float] = None
    done_s: Optional[float] = None

    @property
    def finished(self) -> bool:
        return self.done_s is not None

    @property
    def ttft_s(self) -> Optional[float]:
        if self.first_token_s is None:
            return None
        return self.first_token_s - self.arrival_s

    @property
    def tpot_s(self) -> Optional[float]:
        if self.done_s is None:
            return None
        if self.output_len <= 1:
            return 0.0
        return (self.done_s - self.first_token_s) / (self.output_len - 1)

    @property
    def latency_s(self) -> Optional[float]:
        if self.done_s is None:
            return None
        return self.done_s - self.arrival_s

    def as_row(self) -> Dict:
        return {'id': self.id, 'llm': self.llm, 'arrival_s': self.arrival_s,
                'ttft_s': self.ttft_s, 'tpot_s': self.tpot_s, 'done_s': self.done_s}


@dataclass(frozen=True)
class SimulationConfig:
    scheduler: str = 'adbs'
    interference: float = 0.1
    horizon_s: Optional[float] = None
    block_tokens: int = 16
    activation_reserve: float = 0.1
    quota_floor: float = 0.02
    low_mark: float = 0.5
    high_mark: float = 0.9
    quota_step: float = 0.1
    adapt_period_s: float = 10.0
    adapt_quota: bool = True
    debug_checks: bool = False
    record_decisions: bool = False

    def __post_init__(self):
        if self.interference < 0:
            raise ValueError(f"interference must be >= 0, got {self.interference}")
        if self.horizon_s is not None and self.horizon_s <= 0:
            raise ValueError(f"horizon_s must be positive, got {self.horizon_s}")
        if self.adapt_period_s <= 0:
            raise ValueError(f"adapt_period_s must be positive, got {self.adapt_period_s}")
        if not 0 <= self.low_mark <= self.high_mark <= 1:
            raise ValueError(f"need 0 <= low_mark <= high_mark <= 1, got {self.low_mark}, {self.high_mark}")

    @classmethod
    def from_settings(cls, **overrides) -> 'SimulationConfig':
        defaults = getattr(settings, 'MUXSIM_DEFAULTS', {})
        values = {
            'interference': defaults.get('interference', 0.1),
            'block_tokens': defaults.get('block_tokens', 16),
            'activation_reserve': defaults.get('activation_reserve', 0.1),
            'quota_floor': defaults.get('quota_floor', 0.02),
            'low_mark': defaults.get('low_mark', 0.5),
            'high_mark': defaults.get('high_mark', 0.9),
            'quota_step': defaults.get('quota_step', 0.1),
            'adapt_period_s': defaults.get('adapt_period_s', 10.0),
            'adapt_quota': defaults.get('adapt_quota', True),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class SimulationResult:
    records: List[RequestRecord]
    horizon_s: float
    pool_stats: List[Dict] = field(default_factory=list)
    decisions: List[Dict] = field(default_factory=list)
    stalled: bool = False

    def average_blocks(self) -> Dict[str, float]:
        """Time-averaged KV blocks per LLM over the run."""
        return {llm: used for unit in self.pool_stats for llm, used in unit['average_used'].items()}
