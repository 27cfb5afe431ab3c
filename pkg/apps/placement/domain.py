"""
Placement domain types and their JSON form.
"""
from dataclasses import asdict, dataclass, field
from typing import Dict, List, NamedTuple, Tuple

from django.conf import settings

from apps.cost_model.domain import TP_DEGREES, LLMSpec


class InfeasiblePlacementError(ValueError):
    """No mesh group can host every LLM."""

    def __init__(self, message: str, llm: str = None):
        self.llm = llm
        super().__init__(message)


class SearchSpaceTooLarge(ValueError):
    """An exact solve was asked for more binary dimensions than allowed."""


@dataclass(frozen=True)
class PlacementOptions:
    sm_list: Tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(1, 11))
    tp_degrees: Tuple[int, ...] = TP_DEGREES
    ilp_max_dims: int = 20
    activation_reserve: float = 0.1
    max_batch: int = 256

    def __post_init__(self):
        if not self.sm_list or any(not 0 < f <= 1 for f in self.sm_list):
            raise ValueError(f"sm_list entries must be in (0, 1], got {self.sm_list}")
        if not self.tp_degrees or any(tp not in TP_DEGREES for tp in self.tp_degrees):
            raise ValueError(f"tp_degrees must be drawn from {TP_DEGREES}, got {self.tp_degrees}")
        if not 0 <= self.activation_reserve < 1:
            raise ValueError(f"activation_reserve must be in [0, 1), got {self.activation_reserve}")
        if self.ilp_max_dims < 1 or self.max_batch < 1:
            raise ValueError("ilp_max_dims and max_batch must be positive")

    @classmethod
    def from_settings(cls, **overrides) -> 'PlacementOptions':
        defaults = getattr(settings, 'MUXSIM_DEFAULTS', {})
        values = {
            'sm_list': defaults.get('sm_list', cls.sm_list),
            'tp_degrees': defaults.get('tp_degrees', cls.tp_degrees),
            'ilp_max_dims': defaults.get('ilp_max_dims', cls.ilp_max_dims),
            'activation_reserve': defaults.get('activation_reserve', cls.activation_reserve),
            'max_batch': defaults.get('max_batch', cls.max_batch),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        values['sm_list'] = tuple(sorted(float(f) for f in values['sm_list']))
        values['tp_degrees'] = tuple(sorted(int(tp) for tp in values['tp_degrees']))
        return cls(**values)


@dataclass(frozen=True)
class Cluster:
    num_nodes: int
    gpus_per_node: int
    gpu_memory_bytes: int
    sms_per_gpu: float = 1.0

    def __post_init__(self):
        for field_name in ('num_nodes', 'gpus_per_node', 'gpu_memory_bytes', 'sms_per_gpu'):
            value = getattr(self, field_name)
            if value <= 0:
                raise ValueError(f"Cluster.{field_name} must be positive, got {value}")

    @property
    def total_gpus(self) -> int:
        return self.num_nodes * self.gpus_per_node

    @property
    def total_memory(self) -> int:
        return self.total_gpus * self.gpu_memory_bytes


@dataclass(frozen=True)
class Mesh:
    """GPUs on one node serving one LLM unit."""

    gpu_ids: Tuple[int, ...]
    node: int = 0

    def __post_init__(self):
        if not self.gpu_ids:
            raise ValueError("a mesh needs at least one GPU")
        if len(self.gpu_ids) not in (1, 2, 4, 8):
            raise ValueError(f"mesh size must be 1, 2, 4 or 8, got {len(self.gpu_ids)}")

    @property
    def size(self) -> int:
        return len(self.gpu_ids)


@dataclass(frozen=True)
class ParallelCandidate:
    tp_degree: int
    num_sm: float
    batch: int
    est_tpt: float
    saturated: bool = False


class PlacedLLM(NamedTuple):
    spec: LLMSpec
    candidate: ParallelCandidate


@dataclass
class LLMUnit:
    """A mesh and the LLMs colocated on it."""

    mesh: Mesh
    llms: List[PlacedLLM] = field(default_factory=list)

    @property
    def names(self) -> List[str]:
        return [placed.spec.name for placed in self.llms]


@dataclass
class PlacementResult:
    units: List[LLMUnit]
    est_total_tpt: float
    objective: float
    backend: str

    def unit_of(self, llm: str) -> int:
        for index, unit in enumerate(self.units):
            if llm in unit.names:
                return index
        raise KeyError(llm)

    @property
    def llm_names(self) -> List[str]:
        return [name for unit in self.units for name in unit.names]

    def to_dict(self) -> Dict:
        return {
            'backend': self.backend,
            'est_total_tpt': self.est_total_tpt,
            'objective': self.objective,
            'units': [
                {
                    'mesh': {'node': unit.mesh.node, 'gpu_ids': list(unit.mesh.gpu_ids)},
                    'llms': [
                        {'spec': asdict(placed.spec), 'candidate': asdict(placed.candidate)}
                        for placed in unit.llms
                    ],
                }
                for unit in self.units
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'PlacementResult':
        try:
            units = [
                LLMUnit(
                    mesh=Mesh(tuple(unit['mesh']['gpu_ids']), unit['mesh'].get('node', 0)),
                    llms=[
                        PlacedLLM(LLMSpec(**entry['spec']), ParallelCandidate(**entry['candidate']))
                        for entry in unit['llms']
                    ],
                )
                for unit in data['units']
            ]
            return cls(
                units=units,
                est_total_tpt=float(data['est_total_tpt']),
                objective=float(data.get('objective', data['est_total_tpt'])),
                backend=data.get('backend', 'unknown'),
            )
        except (KeyError, TypeError) as e:
            raise ValueError(f"malformed placement: {e}") from e
