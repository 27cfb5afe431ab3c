"""
Experiment configuration resolved into domain objects, and the model catalog.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from apps.cost_model.domain import LatencyProfile, LLMSpec
from apps.placement.domain import Cluster, PlacementOptions
from apps.scheduler.domain import SchedulerConfig
from apps.sim_engine.domain import SimulationConfig
from apps.workload.domain import WorkloadSpec

# (size label, copies, num_layers, num_heads, hidden_size, params_b) per size bucket
CATALOG_BUCKETS = (
    ('7b', 12, 32, 32, 4096, 6.7),
    ('13b', 4, 40, 40, 5120, 13.0),
    ('30b', 2, 60, 52, 6656, 32.5),
    ('65b', 1, 80, 64, 8192, 65.2),
)


class ConfigError(ValueError):
    """An experiment file that cannot be read or does not match the schema."""

    def __init__(self, message: str, errors: Optional[Dict] = None):
        self.errors = errors or {}
        super().__init__(message)


def table1_catalog(bytes_per_element: Optional[int] = None) -> List[LLMSpec]:
    """Nineteen LLaMA-family models: twelve 7B, four 13B, two 30B and one 65B."""
    catalog = []
    for label, copies, layers, heads, hidden, params_b in CATALOG_BUCKETS:
        for i in range(copies):
            catalog.append(LLMSpec.from_params(f"llama-{label}-{i:02d}", num_layers=layers,
                                               num_heads=heads, hidden_size=hidden, params_b=params_b,
                                               bytes_per_element=bytes_per_element))
    return catalog


@dataclass
class ExperimentConfig:
    seed: int
    cluster: Cluster
    llms: List[LLMSpec]
    workload: WorkloadSpec
    profile: LatencyProfile
    placement: PlacementOptions
    backend: str
    scheduler: SchedulerConfig
    simulation: SimulationConfig
    fairness_epsilon: float
    slo_scales: Sequence[float]
    rate_scales: Sequence[float]
    ablation_schedulers: Sequence[str]
    planning_lengths: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    @property
    def names(self) -> List[str]:
        return [spec.name for spec in self.llms]

    @property
    def specs(self) -> Dict[str, LLMSpec]:
        return {spec.name: spec for spec in self.llms}
