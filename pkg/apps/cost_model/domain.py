"""
Domain types for the analytical latency model.
"""
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional

from django.conf import settings

TP_DEGREES = (1, 2, 4, 8)


def _defaults() -> Dict:
    return getattr(settings, 'MUXSIM_DEFAULTS', {})


@dataclass(frozen=True)
class LLMSpec:
    """Architecture and memory footprint of one served model."""

    name: str
    num_layers: int
    num_heads: int
    head_dim: int
    hidden_size: int
    weight_bytes: int
    bytes_per_element: int = 2

    def __post_init__(self):
        for field_name in ('num_layers', 'num_heads', 'head_dim', 'hidden_size',
                           'weight_bytes', 'bytes_per_element'):
            value = getattr(self, field_name)
            if value <= 0:
                raise ValueError(f"{self.name}: {field_name} must be positive, got {value}")

    @property
    def kv_bytes_per_token(self) -> int:
        # K and V for every head of every layer
        return 2 * self.num_layers * self.num_heads * self.head_dim * self.bytes_per_element

    @property
    def size(self) -> int:
        """Compute-size proxy used to scale the latency coefficients."""
        return self.num_layers * self.hidden_size

    @classmethod
    def from_params(cls, name: str, num_layers: int, num_heads: int, hidden_size: int,
                    params_b: float, head_dim: Optional[int] = None,
                    bytes_per_element: Optional[int] = None) -> 'LLMSpec':
        """Build a spec from a parameter count in billions."""
        defaults = _defaults()
        head_dim = head_dim or defaults.get('head_dim', 128)
        bytes_per_element = bytes_per_element or defaults.get('bytes_per_element', 2)
        return cls(
            name=name,
            num_layers=num_layers,
            num_heads=num_heads,
            head_dim=head_dim,
            hidden_size=hidden_size,
            weight_bytes=int(params_b * 1e9 * bytes_per_element),
            bytes_per_element=bytes_per_element,
        )


@dataclass(frozen=True)
class ExecConfig:
    """Tensor-parallel width and SM share granted to a job."""

    tp_degree: int
    sm_fraction: float

    def __post_init__(self):
        if self.tp_degree not in TP_DEGREES:
            raise ValueError(f"tp_degree must be one of {TP_DEGREES}, got {self.tp_degree}")
        if not 0 < self.sm_fraction <= 1:
            raise ValueError(f"sm_fraction must be in (0, 1], got {self.sm_fraction}")


@dataclass(frozen=True)
class LatencyProfile:
    """
    Coefficients of the parametric latency model.

    Costs are given for a reference model of ``reference_size`` (layers x hidden)
    at tp=1 with all SMs, and scale linearly with LLMSpec.size.
    """

    prefill_ms_per_token: float
    decode_ms_per_step: float
    decode_ms_per_context_token: float
    tp_efficiency: float = 0.9
    sm_saturation: float = 0.5
    batch_knee: float = 16
    reference_size: int = 32 * 4096

    def __post_init__(self):
        for field_name in ('prefill_ms_per_token', 'decode_ms_per_step',
                           'decode_ms_per_context_token', 'tp_efficiency',
                           'sm_saturation', 'batch_knee', 'reference_size'):
            value = getattr(self, field_name)
            if value <= 0:
                raise ValueError(f"LatencyProfile.{field_name} must be positive, got {value}")
        if self.tp_efficiency > 1:
            raise ValueError(f"tp_efficiency must be <= 1, got {self.tp_efficiency}")
        if self.sm_saturation > 1:
            raise ValueError(f"sm_saturation must be <= 1, got {self.sm_saturation}")

    @classmethod
    def from_settings(cls, **overrides) -> 'LatencyProfile':
        defaults = _defaults()
        values = {
            'prefill_ms_per_token': defaults.get('prefill_ms_per_token', 0.1),
            'decode_ms_per_step': defaults.get('decode_ms_per_step', 12.0),
            'decode_ms_per_context_token': defaults.get('decode_ms_per_context_token', 0.005),
            'tp_efficiency': defaults.get('tp_efficiency', 0.9),
            'sm_saturation': defaults.get('sm_saturation', 0.5),
            'batch_knee': defaults.get('batch_knee', 16),
            'reference_size': defaults.get('reference_size', 32 * 4096),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


class ThroughputEstimate(NamedTuple):
    throughput: float
    batch: int
    saturated: bool
    raw_throughput: float


class PeerLoad(NamedTuple):
    """Stable prefill load of a colocated LLM."""

    spec: LLMSpec
    batch: int
